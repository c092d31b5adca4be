"""Local and global DDPG agents, replay storage and action arbitration."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .neural import DenseNet, make_optimizer

DECAY_BASE = 0.95


class InsufficientData(LookupError):
    """Not enough stored transitions for the requested minibatch."""


@dataclass
class Transition:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    global_reward: float
    next_states: np.ndarray
    next_actions: np.ndarray
    intersection: int


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    global_rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    intersections: np.ndarray

    def __len__(self) -> int:
        return len(self.global_rewards)

    @classmethod
    def of(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(
            np.array([t.states for t in transitions], dtype=float),
            np.array([t.actions for t in transitions], dtype=float),
            np.array([t.rewards for t in transitions], dtype=float),
            np.array([t.global_reward for t in transitions], dtype=float),
            np.array([t.next_states for t in transitions], dtype=float),
            np.array([t.next_actions for t in transitions], dtype=float),
            np.array([t.intersection for t in transitions], dtype=int),
        )


class _Ring:
    def __init__(self, capacity: int, state_dim: int, n_agents: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, n_agents))
        self.r = np.zeros((capacity, n_agents))
        self.g = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.a2 = np.zeros((capacity, n_agents))
        self.cursor = 0
        self.size = 0
        self.inserted = 0

    def add(self, t: Transition) -> None:
        i = self.cursor
        self.s[i] = t.states
        self.a[i] = t.actions
        self.r[i] = t.rewards
        self.g[i] = t.global_reward
        self.s2[i] = t.next_states
        self.a2[i] = t.next_actions
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def ordered(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.cursor) % self.capacity


class ReplayBuffer:
    """B = (B_1, ..., B_M): one FIFO ring per intersection."""

    def __init__(self, n_agents: int, state_dim: int, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.capacity = capacity
        self.parts = [_Ring(capacity, state_dim, n_agents) for _ in range(n_agents)]

    def add(self, t: Transition) -> None:
        self.parts[t.intersection].add(t)

    def __len__(self) -> int:
        return sum(p.size for p in self.parts)

    def size(self, m: int) -> int:
        return self.parts[m].size

    def _gather(self, m: int, idx: np.ndarray) -> Batch:
        p = self.parts[m]
        return Batch(p.s[idx], p.a[idx], p.r[idx], p.g[idx], p.s2[idx], p.a2[idx],
                     np.full(len(idx), m, dtype=int))

    def sample(self, m: int | None, n: int, rng: np.random.Generator) -> Batch:
        """Uniform minibatch without replacement from B_m, or from all of B when ``m`` is None."""
        if n < 1:
            raise ValueError("minibatch size must be >= 1")
        if m is not None:
            if self.parts[m].size < n:
                raise InsufficientData(f"B_{m} holds {self.parts[m].size} < {n} transitions")
            return self._gather(m, rng.choice(self.parts[m].size, size=n, replace=False))
        total = len(self)
        if total < n:
            raise InsufficientData(f"B holds {total} < {n} transitions")
        flat = rng.choice(total, size=n, replace=False)
        offsets = np.cumsum([0] + [p.size for p in self.parts])
        owner = np.searchsorted(offsets, flat, side="right") - 1
        pieces = [self._gather(j, flat[owner == j] - offsets[j]) for j in range(self.n_agents)]
        return Batch(*(np.concatenate([getattr(b, f) for b in pieces])
                       for f in ("states", "actions", "rewards", "global_rewards",
                                 "next_states", "next_actions", "intersections")))

    def transitions(self, m: int) -> list[Transition]:
        p = self.parts[m]
        return [Transition(p.s[i].copy(), p.a[i].copy(), p.r[i].copy(), float(p.g[i]),
                           p.s2[i].copy(), p.a2[i].copy(), m) for i in p.ordered()]


def sample_minibatch(buffer: ReplayBuffer, m: int | None, n: int, seed) -> Batch:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return buffer.sample(m, n, rng)


@dataclass(frozen=True)
class ActionScale:
    """Affine map between green seconds and the [-1, 1] network range."""

    low: np.ndarray
    high: np.ndarray

    def to_unit(self, seconds: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(seconds) - self.low) / (self.high - self.low) - 1.0

    def to_seconds(self, unit: np.ndarray) -> np.ndarray:
        return self.low + (np.asarray(unit) + 1.0) / 2.0 * (self.high - self.low)


def soft_update(live: DenseNet, target: DenseNet, tau: float) -> DenseNet:
    """theta' <- (1 - tau) * theta + tau * theta', applied to ``target`` in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for p, q in zip(live.parameters(), target.parameters()):
        if p.shape != q.shape:
            raise ValueError("live and target shapes differ")
        q *= tau
        q += (1.0 - tau) * p
    return target


def arbitrate_action(
    local_seconds: float,
    global_seconds: float,
    global_weight: float,
    t: int,
    decay: float = DECAY_BASE,
) -> tuple[float, bool]:
    """Pick the suggestion with the larger decayed importance; ties go local.

    Returns the chosen seconds and whether the global suggestion won.
    """
    w_g = global_weight * decay ** t
    if w_g > 1.0 - w_g:
        return global_seconds, True
    return local_seconds, False


def _critic_input(states: np.ndarray, actions_unit: np.ndarray) -> np.ndarray:
    return np.concatenate([states, actions_unit], axis=-1)


class LocalAgent:
    """Actor/critic pair for intersection ``m`` plus target copies.

    ``view`` maps the full observation and joint action onto this agent's
    inputs; by default the agent sees everything and owns column ``m`` of the
    joint action.
    """

    def __init__(
        self,
        m: int,
        state_dim: int,
        n_actions: int,
        scale: ActionScale,
        hidden: Sequence[int] = (64, 64),
        seed: int = 0,
        lr_actor: float = 1e-4,
        lr_critic: float = 1e-3,
        optimizer: str = "adam",
        view: "AgentView | None" = None,
    ):
        self.m = m
        self.scale = scale
        self.view = view or AgentView.identity(m, n_actions)
        rng = np.random.default_rng(seed)
        self.actor = DenseNet([state_dim, *hidden, 1], "tanh", seed=rng)
        self.critic = DenseNet([state_dim + self.view.n_actions, *hidden, 1], "linear", seed=rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = make_optimizer(optimizer, self.actor, lr_actor)
        self.critic_opt = make_optimizer(optimizer, self.critic, lr_critic)

    @property
    def own_low(self) -> float:
        return float(self.scale.low[self.m])

    @property
    def own_high(self) -> float:
        return float(self.scale.high[self.m])

    def act_unit(self, obs_full: np.ndarray, target: bool = False) -> np.ndarray:
        net = self.target_actor if target else self.actor
        return net(self.view.states(obs_full))[..., 0]

    def act(self, obs_full: np.ndarray) -> float:
        u = float(self.act_unit(obs_full))
        return float(self.own_low + (u + 1.0) / 2.0 * (self.own_high - self.own_low))

    def _joint(self, actions_seconds: np.ndarray, own_unit: np.ndarray | None = None) -> np.ndarray:
        unit = self.scale.to_unit(actions_seconds)
        if own_unit is not None:
            unit = unit.copy()
            unit[..., self.m] = own_unit
        return self.view.actions(unit)

    def q_values(self, states: np.ndarray, actions_seconds: np.ndarray, target: bool = False) -> np.ndarray:
        net = self.target_critic if target else self.critic
        return net(_critic_input(self.view.states(states), self._joint(actions_seconds)))[..., 0]


def critic_target(agent: LocalAgent, batch: Batch | Transition, gamma: float) -> np.ndarray:
    """y = r_m + gamma * Q'(S', A') with the agent's own entry of A' from mu'(S')."""
    if isinstance(batch, Transition):
        batch = Batch.of([batch])
    r = batch.rewards[:, agent.m]
    if gamma == 0.0:
        return r.copy()
    own = agent.act_unit(batch.next_states, target=True)
    x = _critic_input(agent.view.states(batch.next_states), agent._joint(batch.next_actions, own))
    return r + gamma * agent.target_critic(x)[:, 0]


@dataclass
class LossReport:
    critic_loss: float
    actor_loss: float
    applied: bool = True


def local_losses(agent: LocalAgent, batch: Batch, gamma: float) -> tuple[float, float]:
    """(critic loss, actor loss) for a local agent on one minibatch."""
    if len(batch) == 0:
        raise ValueError("empty minibatch")
    y = critic_target(agent, batch, gamma)
    q = agent.q_values(batch.states, batch.actions)
    critic_loss = float(np.mean((y - q) ** 2))
    own = agent.act_unit(batch.states)
    x = _critic_input(agent.view.states(batch.states), agent._joint(batch.actions, own))
    actor_loss = -float(np.mean(agent.critic(x)))
    return critic_loss, actor_loss


def local_update(agent: LocalAgent, batch: Batch, gamma: float, tau: float) -> LossReport:
    """One critic step, one actor step and a soft target update."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty minibatch")
    states = agent.view.states(batch.states)
    y = critic_target(agent, batch, gamma)
    q, cache = agent.critic.forward(_critic_input(states, agent._joint(batch.actions)))
    resid = y - q[:, 0]
    critic_loss = float(np.mean(resid ** 2))
    ok_c = agent.critic_opt.step(agent.critic, agent.critic.backward(cache, (-2.0 / n * resid)[:, None]))

    own, a_cache = agent.actor.forward(states)
    joint = agent._joint(batch.actions, own[:, 0])
    q2, c_cache = agent.critic.forward(_critic_input(states, joint))
    actor_loss = -float(np.mean(q2))
    dq = agent.critic.backward(c_cache, np.full_like(q2, -1.0 / n))
    d_own = dq.inputs[:, states.shape[1] + agent.view.own_column][:, None]
    ok_a = agent.actor_opt.step(agent.actor, agent.actor.backward(a_cache, d_own))

    soft_update(agent.critic, agent.target_critic, tau)
    soft_update(agent.actor, agent.target_actor, tau)
    return LossReport(critic_loss, actor_loss, ok_c and ok_a)


class GlobalAgent:
    """Site-wide critic and an actor emitting M suggested greens plus M importances."""

    def __init__(
        self,
        state_dim: int,
        n_agents: int,
        scale: ActionScale,
        hidden: Sequence[int] = (64, 64),
        seed: int = 0,
        lr_actor: float = 1e-4,
        lr_critic: float = 1e-3,
        optimizer: str = "adam",
        reward_scale: float = 1.0,
        initial_weight: float | None = None,
    ):
        self.n_agents = n_agents
        self.scale = scale
        self.reward_scale = reward_scale
        rng = np.random.default_rng(seed)
        self.actor = DenseNet([state_dim, *hidden, 2 * n_agents],
                              [("tanh", n_agents), ("logistic", n_agents)], seed=rng)
        self.critic = DenseNet([state_dim + n_agents, *hidden, 1], "linear", seed=rng)
        if initial_weight is not None:
            self.actor.weights[-1][:, n_agents:] *= 0.01
            self.actor.biases[-1][n_agents:] = np.log(initial_weight / (1.0 - initial_weight))
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = make_optimizer(optimizer, self.actor, lr_actor)
        self.critic_opt = make_optimizer(optimizer, self.critic, lr_critic)

    def suggest(self, obs_full: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Suggested greens in seconds and importances W_G for every intersection."""
        out = self.actor(obs_full)
        m = self.n_agents
        return self.scale.to_seconds(out[..., :m]), out[..., m:]

    def q_values(self, states: np.ndarray, actions_seconds: np.ndarray, target: bool = False) -> np.ndarray:
        net = self.target_critic if target else self.critic
        return net(_critic_input(states, self.scale.to_unit(actions_seconds)))[..., 0]

    def target(self, batch: Batch, gamma: float) -> np.ndarray:
        r = self.reward_scale * batch.global_rewards
        if gamma == 0.0:
            return r
        nxt = self.target_actor(batch.next_states)[:, :self.n_agents]
        return r + gamma * self.target_critic(_critic_input(batch.next_states, nxt))[:, 0]


def global_losses(agent: GlobalAgent, batch: Batch, gamma: float) -> tuple[float, float]:
    if len(batch) == 0:
        raise ValueError("empty minibatch")
    y = agent.target(batch, gamma)
    q = agent.q_values(batch.states, batch.actions)
    critic_loss = float(np.mean((y - q) ** 2))
    acts = agent.actor(batch.states)[:, :agent.n_agents]
    actor_loss = -float(np.mean(agent.critic(_critic_input(batch.states, acts))))
    return critic_loss, actor_loss


def global_update(
    agent: GlobalAgent,
    batch: Batch,
    gamma: float,
    tau: float,
    local_unit: np.ndarray | None = None,
) -> LossReport:
    """Critic step, actor step, soft target update for the global agent.

    The action head follows the usual deterministic policy gradient. The
    importance head gets its gradient from the critic evaluated at the blend
    ``w * a_global + (1 - w) * a_local`` when ``local_unit`` (the local actors'
    normalized outputs on the batch states) is supplied.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty minibatch")
    m = agent.n_agents
    y = agent.target(batch, gamma)
    q, cache = agent.critic.forward(_critic_input(batch.states, agent.scale.to_unit(batch.actions)))
    resid = y - q[:, 0]
    critic_loss = float(np.mean(resid ** 2))
    ok_c = agent.critic_opt.step(agent.critic, agent.critic.backward(cache, (-2.0 / n * resid)[:, None]))

    out, a_cache = agent.actor.forward(batch.states)
    acts, weights = out[:, :m], out[:, m:]
    q2, c_cache = agent.critic.forward(_critic_input(batch.states, acts))
    actor_loss = -float(np.mean(q2))
    grad_out = np.zeros_like(out)
    grad_out[:, :m] = agent.critic.backward(c_cache, np.full_like(q2, -1.0 / n)).inputs[:, -m:]
    if local_unit is not None:
        blend = weights * acts + (1.0 - weights) * local_unit
        q3, b_cache = agent.critic.forward(_critic_input(batch.states, blend))
        d_blend = agent.critic.backward(b_cache, np.full_like(q3, -1.0 / n)).inputs[:, -m:]
        grad_out[:, m:] = d_blend * (acts - local_unit)
    ok_a = agent.actor_opt.step(agent.actor, agent.actor.backward(a_cache, grad_out))

    soft_update(agent.critic, agent.target_critic, tau)
    soft_update(agent.actor, agent.target_actor, tau)
    return LossReport(critic_loss, actor_loss, ok_c and ok_a)


@dataclass
class AgentView:
    """Column selections mapping full observations/actions onto one agent's inputs.

    Index ``-1`` marks a zero-filled slot.
    """

    state_index: np.ndarray
    action_index: np.ndarray
    own_column: int

    @classmethod
    def identity(cls, m: int, n_actions: int, state_dim: int | None = None) -> "AgentView":
        return cls(np.arange(state_dim) if state_dim is not None else None,  # type: ignore[arg-type]
                   np.arange(n_actions), m)

    @property
    def n_actions(self) -> int:
        return len(self.action_index)

    @staticmethod
    def _take(x: np.ndarray, index: np.ndarray | None) -> np.ndarray:
        if index is None:
            return x
        out = np.take(x, np.maximum(index, 0), axis=-1)
        if (index < 0).any():
            out = np.where(index < 0, 0.0, out)
        return out

    def states(self, x: np.ndarray) -> np.ndarray:
        return self._take(np.asarray(x, dtype=float), self.state_index)

    def actions(self, unit: np.ndarray) -> np.ndarray:
        return self._take(unit, self.action_index)


@dataclass
class AgentSet:
    locals: list[LocalAgent]
    global_agent: GlobalAgent | None
    gamma: float = 0.9
    tau: float = 0.8
    iteration: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.locals)

    def save(self, directory: str | Path) -> Path:
        from .neural import save_net

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nets = {}
        for a in self.locals:
            for role in ("actor", "critic", "target_actor", "target_critic"):
                name = f"local{a.m}_{role}.json"
                save_net(getattr(a, role), d / name)
                nets[f"local{a.m}.{role}"] = name
        if self.global_agent is not None:
            for role in ("actor", "critic", "target_actor", "target_critic"):
                name = f"global_{role}.json"
                save_net(getattr(self.global_agent, role), d / name)
                nets[f"global.{role}"] = name
        views = [
            {"state_index": None if a.view.state_index is None else a.view.state_index.tolist(),
             "action_index": a.view.action_index.tolist(), "own_column": a.view.own_column}
            for a in self.locals
        ]
        manifest = {
            "format": "coopsignal-checkpoint",
            "version": 1,
            "M": self.n_agents,
            "state_dim": int(self.meta.get("state_dim", self.locals[0].actor.n_in)),
            "actor_input_dims": [a.actor.n_in for a in self.locals],
            "critic_input_dims": [a.critic.n_in for a in self.locals],
            "action_low": self.locals[0].scale.low.tolist(),
            "action_high": self.locals[0].scale.high.tolist(),
            "tau": self.tau,
            "gamma": self.gamma,
            "iteration": self.iteration,
            "has_global": self.global_agent is not None,
            "views": views,
            "networks": nets,
            **{k: v for k, v in self.meta.items() if k != "state_dim"},
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "AgentSet":
        from .neural import load_net

        d = Path(directory)
        manifest_path = d / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
        man = json.loads(manifest_path.read_text(encoding="utf-8"))
        scale = ActionScale(np.array(man["action_low"], dtype=float), np.array(man["action_high"], dtype=float))
        locals_: list[LocalAgent] = []
        for m, v in enumerate(man["views"]):
            agent = object.__new__(LocalAgent)
            agent.m = m
            agent.scale = scale
            agent.view = AgentView(
                None if v["state_index"] is None else np.array(v["state_index"], dtype=int),
                np.array(v["action_index"], dtype=int), int(v["own_column"]))
            for role in ("actor", "critic", "target_actor", "target_critic"):
                setattr(agent, role, load_net(d / man["networks"][f"local{m}.{role}"]))
            agent.actor_opt = make_optimizer("sgd", agent.actor, 0.0)
            agent.critic_opt = make_optimizer("sgd", agent.critic, 0.0)
            locals_.append(agent)
        glob = None
        if man["has_global"]:
            glob = object.__new__(GlobalAgent)
            glob.n_agents = man["M"]
            glob.scale = scale
            glob.reward_scale = float(man.get("global_reward_scale", 1.0))
            for role in ("actor", "critic", "target_actor", "target_critic"):
                setattr(glob, role, load_net(d / man["networks"][f"global.{role}"]))
            glob.actor_opt = make_optimizer("sgd", glob.actor, 0.0)
            glob.critic_opt = make_optimizer("sgd", glob.critic, 0.0)
        meta = {k: man[k] for k in man if k not in {
            "format", "version", "M", "state_dim", "actor_input_dims", "critic_input_dims",
            "action_low", "action_high", "tau", "gamma", "iteration", "has_global", "views", "networks"}}
        meta["state_dim"] = man["state_dim"]
        return cls(locals_, glob, gamma=man["gamma"], tau=man["tau"], iteration=man["iteration"], meta=meta)
