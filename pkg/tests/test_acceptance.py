"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line.

Criteria 6 and 7 train on the bundled scenarios for 200 episodes over five
seeds, so this module takes tens of minutes on a single core.
"""

import csv
import time
from pathlib import Path
from statistics import median

import numpy as np
import pytest

from coopsignal.agents import AgentSet
from coopsignal.cli import main
from coopsignal.convergence import MdpSpec, certify, solve_fixed_point
from coopsignal.emissions import EmissionParams, co_move, co_stop, fleet_emissions, total_co
from coopsignal.neural import DenseNet
from coopsignal.scenario import bundled_scenario, grid_intersections
from coopsignal.simcore import IntersectionSpec, LaneSpec, Network, global_reward, local_reward
from coopsignal.training import Observer, PolicyChooser, evaluate, rollout

SEEDS = ["0", "1", "2", "3", "4"]


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n} [{title}]: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return emit


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- 1 ----------------------------------------------------------------------

def test_criterion_1_certification(report):
    t0 = time.perf_counter()
    rep = certify(n_cases=500, seed=0, gammas=(0.5, 0.9, 0.99), n_range=(2, 20))
    elapsed = time.perf_counter() - t0
    cases = rep.cases
    ok = (
        rep.passed
        and len(cases) == 500
        and max(c.n_states for c in cases) <= 20
        and all(c.contraction_factor <= c.gamma + 1e-12 for c in cases)
        and all(not c.failures for c in cases)
        and max(c.fixed_point_residual for c in cases) <= 1e-10
        and max(c.gershgorin_bound for c in cases) <= 1 + 1e-10
        and elapsed < 5.0
    )
    worst = max(c.fixed_point_residual for c in cases)
    assert report(1, "convergence certification", ok,
                  f"{sum(c.passed for c in cases)}/500 cases, worst fixed-point gap {worst:.2e}, {elapsed:.2f} s")


# -- 2 ----------------------------------------------------------------------

def test_criterion_2_closed_form(report):
    mdp = MdpSpec(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([1.0, 0.0]), 0.9)
    v = solve_fixed_point(mdp)
    ok = bool(np.all(np.abs(v - [5.26316, 4.73684]) <= 1e-5)
              and np.all(np.abs(v - [100 / 19, 90 / 19]) <= 1e-9))
    assert report(2, "closed-form fixed point", ok, f"V = [{v[0]:.9f}, {v[1]:.9f}]")


# -- 3 ----------------------------------------------------------------------

def fd_rel_error(net, x, target, eps=1e-6):
    def loss():
        return 0.5 * float(np.sum((net(x) - target) ** 2))

    y, cache = net.forward(x)
    analytic = net.backward(cache, y - target).flat()
    numeric = []
    for p in net.parameters():
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            down = loss()
            flat[i] = old
            numeric.append((up - down) / (2 * eps))
    numeric = np.array(numeric)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)


def agent_shaped_net(rng, k):
    state = int(rng.integers(3, 13))
    m = int(rng.integers(1, 4))
    hidden = [int(rng.integers(4, 17)), int(rng.integers(4, 17))]
    kind = k % 3
    if kind == 0:  # local actor
        return DenseNet([state, *hidden, 1], "tanh", seed=k)
    if kind == 1:  # critic over state plus joint action
        return DenseNet([state + m, *hidden, 1], "linear", seed=k)
    return DenseNet([state, *hidden, 2 * m], [("tanh", m), ("logistic", m)], seed=k)  # global actor


def test_criterion_3_gradients(report):
    rng = np.random.default_rng(0)
    errors = []
    for k in range(100):
        net = agent_shaped_net(rng, k)
        x = rng.uniform(-1, 1, (2, net.n_in))
        target = rng.normal(size=(2, net.n_out))
        errors.append(fd_rel_error(net, x, target))
    worst = max(errors)
    assert report(3, "gradient correctness", worst <= 1e-4,
                  f"100 networks, worst relative error {worst:.2e}")


# -- 4 ----------------------------------------------------------------------

def oracle_local(r_max, n_max, g_max, n=None, g=None):
    if n is not None:
        if n <= 1:
            return float(r_max)
        return -(r_max * n) / n_max
    if g <= 1:
        return float(r_max)
    return -(r_max * g) / g_max


def oracle_global(net):
    total = 0
    for k in range(len(net.lanes)):
        ids = list(net.queue[k]) + [vid for _, vid in net.transit[k]] + list(net.backlog[k])
        for vid in ids:
            v = net.vehicles[vid]
            wait = v.accumulated_wait
            if v.is_stopped:
                wait += net.time - net._join[vid]
            total += wait
    return -total / net.n_intersections


def test_criterion_4_reward_oracle(report):
    rng = np.random.default_rng(0)
    local_mismatch = 0
    for _ in range(10_000):
        d_max = int(rng.integers(5, 80))
        spec = IntersectionSpec(lanes=(LaneSpec(0.5, 0.1),), phases=((0,),), cycle_length=d_max + 10,
                                green_bounds=(1, d_max), n_max=int(rng.integers(1, 100)),
                                g_max=int(rng.integers(1, 100)))
        r_max = float(rng.uniform(0.1, 10))
        if rng.random() < 0.5:
            n = int(rng.integers(0, 150))
            got = local_reward(spec, r_max, n_remaining=n)
            want = oracle_local(r_max, spec.n_max, spec.g_max, n=n)
        else:
            g = int(rng.integers(0, 80))
            got = local_reward(spec, r_max, g_remaining=g)
            want = oracle_local(r_max, spec.n_max, spec.g_max, g=g)
        local_mismatch += got != want

    global_mismatch = 0
    states = 0
    while states < 10_000:
        rows, cols = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        specs = grid_intersections(rows, cols, ns_rate=float(rng.uniform(0, 0.3)),
                                   ew_rate=float(rng.uniform(0, 0.3)), internal_rate=0.0,
                                   length_capacity=int(rng.integers(3, 30)))
        net = Network(specs, seed=int(rng.integers(1 << 31)))
        for _ in range(500):
            for m in net.ready():
                net.set_green(m, float(rng.uniform(5, 60)))
            net.tick()
            global_mismatch += global_reward(net) != oracle_global(net)
            states += 1
    ok = local_mismatch == 0 and global_mismatch == 0
    assert report(4, "reward oracle", ok,
                  f"local {local_mismatch}/10000 mismatches, global {global_mismatch}/{states} mismatches")


# -- 5 ----------------------------------------------------------------------

def test_criterion_5_emissions(report):
    p = EmissionParams()
    exact = (
        abs(co_move(p) - 2736 / 28970) <= 1e-9
        and abs(co_stop(p, 60) - 180 / 104292) <= 1e-9
        and abs(total_co(p, 60) - (2736 / 28970 + 180 / 104292)) <= 1e-9
    )
    # the quoted values are rounded to their printed digits, so they are
    # checked to one unit in the last place; the quoted total is the sum of
    # the two rounded terms and sits 5.5e-7 from the exact value
    quoted = (
        abs(co_move(p) - 0.094443) <= 1e-6
        and abs(co_stop(p, 60) - 0.0017259) <= 1e-7
        and abs(total_co(p, 60) - 0.096169) <= 1e-6
    )
    rng = np.random.default_rng(0)
    traces = [rng.exponential(30, size=50) for _ in range(100)]
    order = np.argsort([t.sum() for t in traces])
    co = [fleet_emissions(traces[i], p, 3600).co for i in order]
    monotone = all(b > a for a, b in zip(co, co[1:]))
    grow = True
    for t in traces:
        bumped = t.copy()
        bumped[rng.integers(len(t))] += rng.uniform(0.1, 5)
        grow &= fleet_emissions(bumped, p, 3600).co > fleet_emissions(t, p, 3600).co
    ok = exact and quoted and monotone and grow
    assert report(5, "emission formulas", ok,
                  f"move {co_move(p):.9f}, stop {co_stop(p, 60):.9f}, total {total_co(p, 60):.9f}, "
                  f"fleet CO monotone over 100 traces: {monotone and grow}")


# -- 6 and 8 share one training run -----------------------------------------

@pytest.fixture(scope="module")
def corridor_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("corridor")
    t0 = time.perf_counter()
    assert main(["train", "--scenario", "corridor2", "--seeds", *SEEDS, "--out", str(root / "train")]) == 0
    elapsed = time.perf_counter() - t0
    assert main(["baseline", "--scenario", "corridor2", "--seeds", *SEEDS, "--out", str(root / "fixed")]) == 0
    return root, elapsed


def test_criterion_6_corridor_beats_fixed_time(report, corridor_run):
    root, elapsed = corridor_run
    trained = [r for r in read_csv(root / "train" / "summary.csv") if r["seed"] != "median"]
    fixed = read_csv(root / "fixed" / "baseline.csv")
    assert bundled_scenario("corridor2").train.episodes == 200
    t_wait = median(float(r["total_waiting"]) for r in trained)
    f_wait = median(float(r["total_waiting"]) for r in fixed)
    t_thru = median(float(r["throughput"]) for r in trained)
    f_thru = median(float(r["throughput"]) for r in fixed)
    ok = t_thru > f_thru and t_wait <= 0.9 * f_wait
    assert report(6, "corridor vs fixed time", ok,
                  f"median throughput {t_thru:.0f} vs {f_thru:.0f}, median waiting {t_wait:.0f} vs {f_wait:.0f} "
                  f"({100 * (1 - t_wait / f_wait):.1f}% lower), training {elapsed:.0f} s")


def test_criterion_8_decentralized_inference(report, corridor_run):
    root, _ = corridor_run
    sc = bundled_scenario("corridor2")
    observer = Observer(sc.intersections)
    identical = True
    max_weight = 0.0
    for seed in SEEDS:
        agents = AgentSet.load(root / "train" / f"seed{seed}" / "checkpoint")
        assert agents.global_agent is not None
        t = agents.iteration
        chooser = PolicyChooser(agents, observer, 0.0, t, None)
        with_global = rollout(sc.network(int(seed)), observer, sc.horizon, chooser)
        max_weight = max(max_weight, max(chooser.weights))
        deleted = AgentSet(agents.locals, None, agents.gamma, agents.tau, agents.iteration, agents.meta)
        without = evaluate(deleted, sc, int(seed))
        identical &= with_global.actions == without.actions and chooser.global_wins == 0
    ok = identical and max_weight < 0.5
    assert report(8, "decentralized inference", ok,
                  f"actions identical on {len(SEEDS)} seeds: {identical}, max decayed weight {max_weight:.2e}")


# -- 7 ----------------------------------------------------------------------

def test_criterion_7_global_agent_ablation(report, tmp_path):
    sc = bundled_scenario("grid5")
    assert len(sc.intersections) == 5
    t0 = time.perf_counter()
    assert main(["ablate", "--scenario", "grid5", "--seeds", *SEEDS, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    waits = {(r["seed"], r["arm"]): float(r["total_waiting"]) for r in rows}
    wins = sum(waits[(s, "global")] <= waits[(s, "no_global")] for s in SEEDS)
    med_g = median(waits[(s, "global")] for s in SEEDS)
    med_n = median(waits[(s, "no_global")] for s in SEEDS)
    ok = wins >= 4 and med_g <= med_n
    assert report(7, "global agent ablation", ok,
                  f"with-global better or equal on {wins}/5 seeds, median waiting {med_g:.0f} vs {med_n:.0f}, "
                  f"{time.perf_counter() - t0:.0f} s")


# -- 9 ----------------------------------------------------------------------

TINY = """\
schema_version: 1
name: tiny
horizon: 600
grid: {rows: 1, cols: 2, ns_rate: 0.12, ew_rate: 0.06}
train:
  episodes: 3
  hidden: [8, 8]
  batch_size: 8
  updates_per_pass: 2
"""


def test_criterion_9_determinism(report, tmp_path):
    scenario = tmp_path / "tiny.yaml"
    scenario.write_text(TINY)
    ckpt_root = tmp_path / "ckpt"
    assert main(["train", "--scenario", str(scenario), "--out", str(ckpt_root)]) == 0
    ckpt = ckpt_root / "seed0" / "checkpoint"
    commands = {
        "train": ["train", "--scenario", str(scenario), "--seeds", "0", "1"],
        "evaluate": ["evaluate", "--scenario", str(scenario), "--checkpoint", str(ckpt), "--seeds", "0", "5"],
        "baseline": ["baseline", "--scenario", str(scenario), "--seeds", "0", "5"],
        "ablate": ["ablate", "--scenario", str(scenario), "--seeds", "2"],
        "certify": ["certify", "--cases", "60"],
    }
    differing = []
    for name, argv in commands.items():
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / name / rep
            assert main(argv + ["--out", str(out)]) == 0
            outs.append({p.relative_to(out): p.read_bytes() for p in sorted(Path(out).rglob("*.csv"))})
        if not outs[0] or outs[0] != outs[1]:
            differing.append(name)
    assert report(9, "determinism", not differing,
                  f"{len(commands) - len(differing)}/{len(commands)} subcommands byte-identical"
                  + (f", differing: {differing}" if differing else ""))
