"""Command-line entry point: train, evaluate, baseline, ablate, certify."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import median
from typing import Sequence

from .agents import AgentSet
from .convergence import ContractionError, MdpSpec, certify, solve_fixed_point
from .emissions import EmissionParams, EmissionRecord, fleet_emissions, load_emission_params
from .scenario import load_scenario
from .simcore import ConfigError, MetricsRecord
from .training import (
    EpisodeLog,
    Observer,
    RolloutResult,
    Scenario,
    TrainingDiverged,
    evaluate,
    evaluate_fixed,
    train,
)

log = logging.getLogger("coopsignal")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_CERTIFY = 3

OUT_ENV = "COOPSIGNAL_OUT"
DEFAULT_OUT = "runs"
DEFAULT_SCENARIO = "corridor2"
CSV_VERSION = 1
FIXED_CHECKPOINT = "fixed"


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    scenario: str
    seeds: list[int]
    out: Path
    overrides: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.seeds:
            raise UsageError("at least one seed is required")

    @property
    def run_id(self) -> str:
        # hash of everything that determines the outputs; the output path is excluded
        payload = json.dumps({"subcommand": self.subcommand, "scenario": self.scenario,
                              "seeds": self.seeds, "overrides": self.overrides}, sort_keys=True)
        return hashlib.sha1(payload.encode()).hexdigest()[:12]

    def write(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "manifest.json"
        data = {"run_id": self.run_id, "subcommand": self.subcommand, "scenario": self.scenario,
                "seeds": self.seeds, "overrides": self.overrides, "csv_version": CSV_VERSION}
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def metrics_header() -> list[str]:
    return MetricsRecord.columns() + EmissionRecord.columns()


def metrics_row(result: RolloutResult | MetricsRecord, vehicles, params: EmissionParams,
                horizon: int) -> list:
    metrics = result.metrics if isinstance(result, RolloutResult) else result
    done = [v for v in vehicles if v.exit_time is not None]
    return metrics.row() + fleet_emissions(done, params, float(horizon)).row()


def series_rows(history: Sequence[EpisodeLog]) -> list[list]:
    """Long-form (step, series, value) rows for plotting."""
    rows = []
    for h in history:
        for name in ("total_waiting", "throughput", "epsilon", "effective_weight"):
            rows.append([h.episode, name, getattr(h, name)])
    return rows


# -- subcommands -----------------------------------------------------------


def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario)
    cfg = sc.train
    if getattr(args, "episodes", None) is not None:
        if args.episodes < 0:
            raise UsageError("--episodes must be >= 0")
        cfg = replace(cfg, episodes=args.episodes)
    if getattr(args, "no_global", False):
        cfg = replace(cfg, use_global=False)
    if getattr(args, "window", False):
        cfg = replace(cfg, window=True)
    if getattr(args, "checkpoint_every", None) is not None:
        if args.checkpoint_every < 0:
            raise UsageError("--checkpoint-every must be >= 0")
        cfg = replace(cfg, checkpoint_every=args.checkpoint_every)
    sc.train = cfg
    return sc


def _manifest(args, sc: Scenario) -> RunManifest:
    overrides = {k: getattr(args, k) for k in ("episodes", "no_global", "window", "checkpoint",
                                               "checkpoint_every", "emission_params", "cases")
                 if getattr(args, k, None) not in (None, False)}
    seeds = args.seeds if args.seeds else [sc.seed]
    return RunManifest(args.command, str(args.scenario), list(seeds), args.out, overrides)


def _params(args) -> EmissionParams:
    if getattr(args, "emission_params", None):
        return load_emission_params(args.emission_params)
    return EmissionParams()


def _train_seed(sc: Scenario, seed: int, use_global: bool | None = None,
                checkpoint_dir: Path | None = None) -> tuple[AgentSet, list[EpisodeLog]]:
    cfg = replace(sc.train, seed=seed)
    if use_global is not None:
        cfg = replace(cfg, use_global=use_global)
    every = cfg.checkpoint_every

    def snapshot(entry: EpisodeLog, agents: AgentSet) -> None:
        if (entry.episode + 1) % every == 0:
            agents.save(checkpoint_dir / f"checkpoint_ep{entry.episode + 1}")

    hook = snapshot if every > 0 and checkpoint_dir is not None else None
    return train(cfg, sc, on_episode=hook)


def cmd_train(args) -> int:
    sc = _scenario(args)
    man = _manifest(args, sc)
    man.write()
    params = _params(args)
    rows = []
    for seed in man.seeds:
        d = man.out / f"seed{seed}"
        agents, history = _train_seed(sc, seed, checkpoint_dir=d)
        write_csv(d / "training_log.csv", EpisodeLog.columns(), [h.row() for h in history])
        write_csv(d / "series.csv", ["step", "series", "value"], series_rows(history))
        agents.save(d / "checkpoint")
        res = evaluate(agents, sc, seed)
        rows.append([seed] + metrics_row(res, res.network.vehicles, params, sc.horizon))
        log.info("seed %d: waiting %.0f throughput %d", seed, res.metrics.total_waiting,
                 res.metrics.throughput)
    header = ["seed"] + metrics_header()
    med = ["median"] + [median(float(r[i]) for r in rows) for i in range(1, len(header))]
    write_csv(man.out / "summary.csv", header, rows + [med])
    return EXIT_OK


def load_checkpoint(path: str | Path, sc: Scenario) -> AgentSet:
    agents = AgentSet.load(path)
    observer = Observer(sc.intersections)
    expected = {"intersections": len(sc.intersections), "state_dim": observer.dim}
    found = {"intersections": agents.n_agents, "state_dim": int(agents.meta.get("state_dim", -1))}
    if expected != found:
        raise ValidationError(f"checkpoint {path} does not match scenario: expected {expected}, found {found}")
    return agents


def cmd_evaluate(args) -> int:
    sc = _scenario(args)
    man = _manifest(args, sc)
    if not args.checkpoint:
        raise UsageError("evaluate needs --checkpoint (a checkpoint directory or 'fixed')")
    params = _params(args)
    fixed = args.checkpoint == FIXED_CHECKPOINT
    agents = None if fixed else load_checkpoint(args.checkpoint, sc)
    man.write()
    rows = []
    for seed in man.seeds:
        res = evaluate_fixed(sc, seed) if fixed else evaluate(agents, sc, seed)
        rows.append([seed] + metrics_row(res, res.network.vehicles, params, sc.horizon))
    write_csv(man.out / "evaluation.csv", ["seed"] + metrics_header(), rows)
    return EXIT_OK


def cmd_baseline(args) -> int:
    sc = _scenario(args)
    man = _manifest(args, sc)
    man.write()
    params = _params(args)
    rows = []
    for seed in man.seeds:
        res = evaluate_fixed(sc, seed)
        rows.append([seed] + metrics_row(res, res.network.vehicles, params, sc.horizon))
    write_csv(man.out / "baseline.csv", ["seed"] + metrics_header(), rows)
    return EXIT_OK


def cmd_ablate(args) -> int:
    sc = _scenario(args)
    man = _manifest(args, sc)
    man.write()
    params = _params(args)
    rows = []
    wins = 0
    for seed in man.seeds:
        waits = {}
        for arm, use_global in (("global", True), ("no_global", False)):
            agents, history = _train_seed(sc, seed, use_global)
            write_csv(man.out / f"seed{seed}" / f"training_log_{arm}.csv", EpisodeLog.columns(),
                      [h.row() for h in history])
            res = evaluate(agents, sc, seed)
            waits[arm] = res.metrics.total_waiting
            rows.append([seed, arm] + metrics_row(res, res.network.vehicles, params, sc.horizon))
        wins += waits["global"] <= waits["no_global"]
    write_csv(man.out / "ablation.csv", ["seed", "arm"] + metrics_header(), rows)
    print(f"with-global waiting <= without-global on {wins}/{len(man.seeds)} seeds")
    return EXIT_OK


def cmd_certify(args) -> int:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.mdp:
        # replay a single dumped case
        data = json.loads(Path(args.mdp).read_text(encoding="utf-8"))
        try:
            mdp = MdpSpec.from_dict(data)
        except ContractionError as exc:
            print(f"rejected: {exc}", file=sys.stderr)
            return EXIT_CERTIFY
        v = solve_fixed_point(mdp)
        print("fixed point:", " ".join(repr(float(x)) for x in v))
        return EXIT_OK
    seed = args.seeds[0] if args.seeds else 0
    report = certify(n_cases=args.cases, seed=seed)
    (out / "certification.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.summary())
    if not report.passed:
        for p in report.dump_failures(out):
            print(f"failing case written to {p}", file=sys.stderr)
        return EXIT_CERTIFY
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
    "certify": cmd_certify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coopsignal", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--seeds", type=int, nargs="+", default=None)
        p.add_argument("--out", type=Path, default=None,
                       help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        if name == "certify":
            p.add_argument("--cases", type=int, default=500)
            p.add_argument("--mdp", default=None, help="replay one MDP from a JSON dump")
            continue
        p.add_argument("--scenario", default=DEFAULT_SCENARIO,
                       help="scenario YAML file or bundled scenario name")
        p.add_argument("--emission-params", default=None)
        if name in ("train", "ablate", "evaluate"):
            p.add_argument("--episodes", type=int, default=None)
            p.add_argument("--no-global", action="store_true")
            p.add_argument("--window", action="store_true", help="8-neighbour observation mode")
        if name == "train":
            p.add_argument("--checkpoint-every", type=int, default=None, metavar="K",
                           help="also save a checkpoint every K episodes")
        if name == "evaluate":
            p.add_argument("--checkpoint", default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.out is None:
            args.out = Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"coopsignal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValidationError, FileNotFoundError, TrainingDiverged) as exc:
        print(f"coopsignal: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
