"""Training loop: on-policy data generation, local and global agent updates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .agents import (
    ActionScale,
    AgentSet,
    AgentView,
    GlobalAgent,
    InsufficientData,
    LocalAgent,
    ReplayBuffer,
    Transition,
    arbitrate_action,
    global_update,
    local_update,
)
from .simcore import (
    IntersectionSpec,
    MetricsRecord,
    Network,
    collect_metrics,
    global_reward,
    run_fixed_time,
)

log = logging.getLogger(__name__)

# seed-sequence keys for the environment streams of one training seed
TRAIN_STREAM = 1
PRETRAIN_STREAM = 2


@dataclass
class TrainConfig:
    episodes: int = 200
    horizon: int = 3600
    eps_start: float = 0.9
    eps_end: float = 0.1
    decay_base: float = 0.95
    batch_size: int = 64
    tau: float = 0.8
    gamma: float = 0.9
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    optimizer: str = "adam"
    hidden: tuple[int, ...] = (64, 64)
    updates_per_pass: int = 50
    buffer_capacity: int = 100_000
    use_global: bool = True
    window: bool = False
    pretrain: bool = True
    global_reward_scale: float = 1e-3
    initial_global_weight: float | None = 0.9
    divergence_factor: float = 10.0
    divergence_patience: int = 5
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.eps_start > self.eps_end >= 0:
            raise ValueError("need eps_start > eps_end >= 0")
        if not 0 < self.decay_base < 1:
            raise ValueError("decay_base must lie in (0, 1)")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def epsilon(self, episode: int) -> float:
        """Linear schedule from eps_start at episode 0 to eps_end at the last episode."""
        if self.episodes <= 1:
            return self.eps_start
        frac = min(max(episode / (self.episodes - 1), 0.0), 1.0)
        return self.eps_start + (self.eps_end - self.eps_start) * frac


class TrainingDiverged(RuntimeError):
    pass


# -- observations ---------------------------------------------------------


class NeighborWindow:
    """3x3 grid patch around each intersection, row-major, self in the centre.

    Positions outside the network (edges, T/I junctions) become zero slots.
    Each slot holds ``lanes_per_slot`` queue entries plus one phase entry.
    """

    OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]

    def __init__(self, specs: Sequence[IntersectionSpec]):
        self.positions = [tuple(s.position) for s in specs]
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("intersection positions must be distinct")
        self.lookup = {p: m for m, p in enumerate(self.positions)}
        self.lanes_per_slot = max(s.n_lanes for s in specs)

    def neighbors(self, m: int) -> list[int | None]:
        r, c = self.positions[m]
        return [self.lookup.get((r + dr, c + dc)) for dr, dc in self.OFFSETS]

    def present(self, m: int) -> list[int]:
        return [j for j in self.neighbors(m) if j is not None and j != m]


class Observer:
    """Encodes network state as the agents' input vector.

    The full actor observation is, per intersection in order, the queue of
    each lane mapped to [-1, 1] via ``2 q / N_max - 1`` (clipped), followed by
    the phase index mapped to [-1, 1]. Its width is ``M + sum(lanes)``.
    """

    def __init__(self, specs: Sequence[IntersectionSpec]):
        self.specs = tuple(specs)
        self.offsets: list[int] = []
        off = 0
        for s in self.specs:
            self.offsets.append(off)
            off += s.n_lanes + 1
        self.dim = off
        self._qscale = np.concatenate(
            [np.full(s.n_lanes, 2.0 / s.n_max) for s in self.specs])
        self._queue_cols = np.concatenate(
            [np.arange(o, o + s.n_lanes) for o, s in zip(self.offsets, self.specs)])
        self._phase_cols = np.array([o + s.n_lanes for o, s in zip(self.offsets, self.specs)])
        self._phase_den = np.array([max(len(s.phases) - 1, 1) for s in self.specs], dtype=float)
        self.default_actions = np.array([s.fixed_green for s in self.specs])
        self.scale = ActionScale(
            np.array([s.green_bounds[0] for s in self.specs], dtype=float),
            np.array([s.green_bounds[1] for s in self.specs], dtype=float),
        )

    def encode(self, net: Network) -> np.ndarray:
        out = np.empty(self.dim)
        out[self._queue_cols] = np.minimum(net.queue_lengths() * self._qscale - 1.0, 1.0)
        out[self._phase_cols] = 2.0 * net.phases() / self._phase_den - 1.0
        return out

    def joint_actions(self, net: Network) -> np.ndarray:
        a = net.actions()
        return np.where(np.isnan(a), self.default_actions, a)

    def window_index(self, m: int, window: NeighborWindow) -> np.ndarray:
        """Indices into the full observation for intersection ``m``'s window (-1 = zero)."""
        L = window.lanes_per_slot
        idx = []
        for j in window.neighbors(m):
            if j is None:
                idx.extend([-1] * (L + 1))
                continue
            n = self.specs[j].n_lanes
            o = self.offsets[j]
            idx.extend(range(o, o + n))
            idx.extend([-1] * (L - n))
            idx.append(o + n)
        return np.array(idx, dtype=int)

    def agent_view(self, m: int, window: NeighborWindow | None) -> AgentView:
        if window is None:
            return AgentView(None, np.arange(len(self.specs)), m)  # type: ignore[arg-type]
        actions = np.array([-1 if j is None else j for j in window.neighbors(m)], dtype=int)
        return AgentView(self.window_index(m, window), actions, NeighborWindow.OFFSETS.index((0, 0)))


def windowed_observation(obs: np.ndarray, m: int, observer: Observer, window: NeighborWindow) -> np.ndarray:
    """Restrict a full observation to ``m`` and its eight grid neighbours."""
    return AgentView._take(np.asarray(obs, dtype=float), observer.window_index(m, window))


# -- rollouts ---------------------------------------------------------------


Chooser = Callable[[int, np.ndarray], float]


@dataclass
class RolloutResult:
    metrics: MetricsRecord
    network: Network
    actions: list[tuple[int, int, float]] = field(default_factory=list)
    global_share: float = 0.0
    mean_effective_weight: float = math.nan


def rollout(
    net: Network,
    observer: Observer,
    horizon: int,
    choose: Chooser,
    on_transition: Callable[[Transition], None] | None = None,
) -> RolloutResult:
    """Drive ``net`` for ``horizon`` seconds, asking ``choose`` for every decision."""
    M = net.n_intersections
    pending: list[tuple[np.ndarray, np.ndarray] | None] = [None] * M
    log_actions: list[tuple[int, int, float]] = []
    while net.time < horizon:
        ready = net.ready()
        for m in ready:
            obs = observer.encode(net)
            if on_transition is not None and pending[m] is not None:
                s, a = pending[m]
                rewards = np.array([net.last_reward(j) or 0.0 for j in range(M)])
                on_transition(Transition(s, a, rewards, global_reward(net), obs,
                                         observer.joint_actions(net), m))
            green = choose(m, obs)
            net.set_green(m, green)
            log_actions.append((net.time, m, float(green)))
            pending[m] = (obs, observer.joint_actions(net))
        net.tick()
    return RolloutResult(collect_metrics(net.vehicles), net, log_actions)


def fixed_time_chooser(specs: Sequence[IntersectionSpec]) -> Chooser:
    plan = [s.fixed_green for s in specs]
    return lambda m, obs: plan[m]


@dataclass
class Scenario:
    """Road network plus the knobs the training loop needs."""

    intersections: tuple[IntersectionSpec, ...]
    horizon: int = 3600
    r_max: float = 1.0
    seed: int = 0
    name: str = "scenario"
    train: TrainConfig = field(default_factory=TrainConfig)

    def network(self, seed) -> Network:
        return Network(self.intersections, seed=seed, r_max=self.r_max)


def build_agents(scenario: Scenario, config: TrainConfig) -> tuple[AgentSet, Observer]:
    observer = Observer(scenario.intersections)
    window = NeighborWindow(scenario.intersections) if config.window else None
    M = len(scenario.intersections)
    ss = np.random.SeedSequence([config.seed, 7])
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(M + 1)]
    locals_ = []
    for m in range(M):
        view = observer.agent_view(m, window)
        state_dim = observer.dim if view.state_index is None else len(view.state_index)
        locals_.append(LocalAgent(m, state_dim, M, observer.scale, hidden=config.hidden,
                                  seed=seeds[m], lr_actor=config.lr_actor,
                                  lr_critic=config.lr_critic, optimizer=config.optimizer,
                                  view=view))
    glob = None
    if config.use_global:
        glob = GlobalAgent(observer.dim, M, observer.scale, hidden=config.hidden, seed=seeds[M],
                           lr_actor=config.lr_actor, lr_critic=config.lr_critic,
                           optimizer=config.optimizer, reward_scale=config.global_reward_scale,
                           initial_weight=config.initial_global_weight)
    agents = AgentSet(locals_, glob, gamma=config.gamma, tau=config.tau,
                      meta={"state_dim": observer.dim, "scenario": scenario.name,
                            "global_reward_scale": config.global_reward_scale,
                            "window": config.window})
    return agents, observer


class PolicyChooser:
    """epsilon-greedy over the arbitrated local/global suggestion."""

    def __init__(self, agents: AgentSet, observer: Observer, epsilon: float, t: int,
                 rng: np.random.Generator | None, decay: float = 0.95, use_global: bool = True):
        self.agents = agents
        self.observer = observer
        self.epsilon = epsilon
        self.t = t
        self.rng = rng
        self.decay = decay
        self.use_global = use_global and agents.global_agent is not None
        self.decisions = 0
        self.global_wins = 0
        self.weights: list[float] = []

    def __call__(self, m: int, obs: np.ndarray) -> float:
        self.decisions += 1
        lo, hi = self.observer.scale.low[m], self.observer.scale.high[m]
        if self.epsilon > 0 and self.rng.random() < self.epsilon:
            return float(self.rng.uniform(lo, hi))
        local = self.agents.locals[m].act(obs)
        if not self.use_global:
            return local
        suggestion, weight = self.agents.global_agent.suggest(obs)
        self.weights.append(float(weight[m]) * self.decay ** self.t)
        chosen, won = arbitrate_action(local, float(suggestion[m]), float(weight[m]), self.t, self.decay)
        self.global_wins += won
        return float(min(max(chosen, lo), hi))


def generate_on_policy_data(
    scenario: Scenario,
    agents: AgentSet,
    observer: Observer,
    buffer: ReplayBuffer,
    epsilon: float,
    t: int,
    env_seed,
    rng: np.random.Generator,
    config: TrainConfig,
) -> RolloutResult:
    """One simulated episode under the exploring policy; every transition goes to B_m."""
    chooser = PolicyChooser(agents, observer, epsilon, t, rng, config.decay_base, config.use_global)
    result = rollout(scenario.network(env_seed), observer, config.horizon, chooser, buffer.add)
    result.global_share = chooser.global_wins / max(chooser.decisions, 1)
    if chooser.weights:
        result.mean_effective_weight = float(np.mean(chooser.weights))
    return result


@dataclass
class UpdateReport:
    critic_loss: float = math.nan
    actor_loss: float = math.nan
    skipped: list[int] = field(default_factory=list)
    rejected: int = 0


def update_local_agents(agents: AgentSet, buffer: ReplayBuffer, config: TrainConfig,
                        rng: np.random.Generator) -> UpdateReport:
    """Minibatch critic/actor descent and soft target updates for each local agent."""
    report = UpdateReport()
    closs, aloss = [], []
    for agent in agents.locals:
        if buffer.size(agent.m) < config.batch_size:
            report.skipped.append(agent.m)
            continue
        for _ in range(config.updates_per_pass):
            batch = buffer.sample(agent.m, config.batch_size, rng)
            r = local_update(agent, batch, config.gamma, config.tau)
            report.rejected += not r.applied
            closs.append(r.critic_loss)
            aloss.append(r.actor_loss)
    if closs:
        report.critic_loss, report.actor_loss = float(np.mean(closs)), float(np.mean(aloss))
    if report.skipped:
        log.info("local update skipped for %s: buffer below %d", report.skipped, config.batch_size)
    return report


def update_global_agent(agents: AgentSet, buffer: ReplayBuffer, config: TrainConfig,
                        rng: np.random.Generator) -> UpdateReport:
    report = UpdateReport()
    glob = agents.global_agent
    if glob is None:
        return report
    if len(buffer) < config.batch_size:
        report.skipped.append(-1)
        log.info("global update skipped: buffer below %d", config.batch_size)
        return report
    closs, aloss = [], []
    for _ in range(config.updates_per_pass):
        try:
            batch = buffer.sample(None, config.batch_size, rng)
        except InsufficientData:  # pragma: no cover - guarded above
            break
        local_unit = np.stack([a.act_unit(batch.states) for a in agents.locals], axis=1)
        r = global_update(glob, batch, config.gamma, config.tau, local_unit)
        report.rejected += not r.applied
        closs.append(r.critic_loss)
        aloss.append(r.actor_loss)
    if closs:
        report.critic_loss, report.actor_loss = float(np.mean(closs)), float(np.mean(aloss))
    return report


@dataclass
class EpisodeLog:
    episode: int
    epsilon: float
    effective_weight: float
    global_share: float
    total_waiting: float
    throughput: int
    local_critic_loss: float
    local_actor_loss: float
    global_critic_loss: float
    global_actor_loss: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [getattr(self, c) for c in self.columns()]


def train(
    config: TrainConfig,
    scenario: Scenario,
    on_episode: Callable[[EpisodeLog, AgentSet], None] | None = None,
) -> tuple[AgentSet, list[EpisodeLog]]:
    """Pretrain on a fixed-time hour, then per episode: generate data, update locals, update global."""
    agents, observer = build_agents(scenario, config)
    buffer = ReplayBuffer(len(scenario.intersections), observer.dim, config.buffer_capacity)
    rng = np.random.default_rng([config.seed, 11])
    # separate stream so enabling the global agent leaves exploration and
    # local minibatches unchanged (paired ablations)
    global_rng = np.random.default_rng([config.seed, 13])
    history: list[EpisodeLog] = []
    if config.episodes <= 0:
        return agents, history

    baseline = run_fixed_time(scenario.intersections, config.horizon, config.seed, scenario.r_max)
    if config.pretrain:
        rollout(scenario.network([config.seed, PRETRAIN_STREAM, 0]), observer, config.horizon,
                fixed_time_chooser(scenario.intersections), buffer.add)

    strikes = 0
    for t in range(config.episodes):
        eps = config.epsilon(t)
        res = generate_on_policy_data(scenario, agents, observer, buffer, eps, t,
                                      [config.seed, TRAIN_STREAM, t], rng, config)
        lrep = update_local_agents(agents, buffer, config, rng)
        grep = update_global_agent(agents, buffer, config, global_rng)
        agents.iteration = t + 1
        entry = EpisodeLog(t, eps, res.mean_effective_weight, res.global_share,
                           res.metrics.total_waiting, res.metrics.throughput,
                           lrep.critic_loss, lrep.actor_loss, grep.critic_loss, grep.actor_loss)
        history.append(entry)
        if on_episode is not None:
            on_episode(entry, agents)

        limit = config.divergence_factor * max(baseline.total_waiting, 1.0)
        strikes = strikes + 1 if entry.total_waiting > limit else 0
        if strikes >= config.divergence_patience:
            raise TrainingDiverged(
                f"waiting time above {config.divergence_factor}x fixed-time baseline "
                f"({baseline.total_waiting:.0f}s) for {strikes} episodes; last episode {t}: "
                f"waiting={entry.total_waiting:.0f}s eps={eps:.3f} "
                f"critic_loss={entry.local_critic_loss:.4g}"
            )
    return agents, history


def evaluate(
    agents: AgentSet,
    scenario: Scenario,
    seed,
    horizon: int | None = None,
    t: int | None = None,
) -> RolloutResult:
    """Greedy rollout. Without ``t`` only the local actors act; with ``t`` the
    global agent (if present) is arbitrated against them at decay index ``t``."""
    observer = Observer(scenario.intersections)
    use_global = t is not None and agents.global_agent is not None
    chooser = PolicyChooser(agents, observer, 0.0, t or 0, None, use_global=use_global)
    return rollout(scenario.network(seed), observer, horizon or scenario.horizon, chooser)


def evaluate_fixed(scenario: Scenario, seed, horizon: int | None = None) -> RolloutResult:
    observer = Observer(scenario.intersections)
    return rollout(scenario.network(seed), observer, horizon or scenario.horizon,
                   fixed_time_chooser(scenario.intersections))
