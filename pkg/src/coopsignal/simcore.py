"""Per-second queue simulator for a network of signalized intersections.

Vehicles enter an approach lane, travel ``free_flow_time`` seconds to the stop
line and join a point queue. While the lane's phase is green the queue is
served at ``saturation_rate`` vehicles per second. A served vehicle either
leaves the network or enters the downstream lane of the next intersection.

Each intersection runs its own interval clock: the controller picks a green
duration for the current phase, the phase shows green then yellow, and the
phase index rotates. Intersections are asynchronous; a controller is asked for
a new duration whenever its previous interval finishes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid scenario or intersection configuration."""


class BoundsError(ValueError):
    """A green duration outside ``[D_min, D_max]``."""

    def __init__(self, m: int, green: float, bounds: tuple[int, int]):
        self.intersection = m
        self.green = green
        self.bounds = bounds
        super().__init__(
            f"intersection {m}: green {green!r}s outside [{bounds[0]}, {bounds[1]}]"
        )


@dataclass(frozen=True)
class LaneSpec:
    saturation_rate: float
    arrival_rate: float
    free_flow_time: int = 10
    length_capacity: int = 60
    name: str = ""
    # (intersection index, lane index) fed by this lane, None when vehicles exit
    downstream: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if not self.saturation_rate > 0:
            raise ConfigError(f"lane {self.name!r}: saturation_rate must be > 0")
        if not self.arrival_rate >= 0:
            raise ConfigError(f"lane {self.name!r}: arrival_rate must be >= 0")
        if self.length_capacity < 1:
            raise ConfigError(f"lane {self.name!r}: length_capacity must be >= 1")
        if self.free_flow_time < 1:
            raise ConfigError(f"lane {self.name!r}: free_flow_time must be >= 1")


@dataclass(frozen=True)
class IntersectionSpec:
    lanes: tuple[LaneSpec, ...]
    phases: tuple[tuple[int, ...], ...]
    cycle_length: int = 90
    yellow_seconds: int = 3
    green_bounds: tuple[int, int] = (5, 60)
    n_max: int = 40
    g_max: int | None = None
    name: str = ""
    position: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        d_min, d_max = self.green_bounds
        if d_min < 1:
            raise ConfigError(f"{self.name}: D_min must be >= 1")
        if d_min > d_max:
            raise ConfigError(f"{self.name}: D_min > D_max")
        if d_max + self.yellow_seconds > self.cycle_length:
            raise ConfigError(f"{self.name}: D_max + yellow exceeds cycle_length")
        seen = sorted(i for phase in self.phases for i in phase)
        if seen != list(range(len(self.lanes))):
            raise ConfigError(f"{self.name}: every lane must belong to exactly one phase")
        if self.n_max <= 0 or self.max_green_penalty <= 0:
            raise ConfigError(f"{self.name}: N_max and G_max must be positive")

    @property
    def max_green_penalty(self) -> int:
        """G_max, defaulting to D_max."""
        return self.green_bounds[1] if self.g_max is None else self.g_max

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    @property
    def fixed_green(self) -> float:
        """Equal split of the cycle across phases, clipped to the green bounds."""
        n = len(self.phases)
        g = (self.cycle_length - n * self.yellow_seconds) / n
        return float(min(max(g, self.green_bounds[0]), self.green_bounds[1]))


@dataclass
class Vehicle:
    id: int
    entry_time: int
    exit_time: int | None = None
    accumulated_wait: int = 0
    is_stopped: bool = False
    free_flow_time: int = 0


@dataclass
class LocalObservation:
    stopped_per_lane: np.ndarray
    remaining_green: int
    all_phases: np.ndarray


@dataclass
class MetricsRecord:
    throughput: int = 0
    total_waiting: float = 0.0
    mean_delay: float = 0.0
    mean_speed: float = 0.0
    mean_travel_time: float = 0.0
    time_loss: float = 0.0
    no_exits: bool = False

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [getattr(self, c) for c in self.columns()]


def local_reward(
    spec: IntersectionSpec,
    r_max: float,
    *,
    n_remaining: float | None = None,
    g_remaining: float | None = None,
) -> float:
    """Clearance reward for one green interval.

    Pass ``n_remaining`` for a green that expired with vehicles left at the
    intersection, or ``g_remaining`` for green still showing after the active
    phase has cleared.
    """
    if (n_remaining is None) == (g_remaining is None):
        raise ValueError("pass exactly one of n_remaining / g_remaining")
    if n_remaining is not None:
        n_max = spec.n_max
        if n_max == 0:
            raise ConfigError("N_max must be non-zero")
        if n_remaining / n_max <= 1 / n_max:
            return float(r_max)
        return -(r_max * n_remaining) / n_max
    g_max = spec.max_green_penalty
    if g_max == 0:
        raise ConfigError("G_max must be non-zero")
    if g_remaining / g_max <= 1 / g_max:
        return float(r_max)
    return -(r_max * g_remaining) / g_max


class _Controller:
    __slots__ = ("phase", "mode", "remaining", "green", "action", "case2", "reward", "obs")

    def __init__(self) -> None:
        self.phase = 0
        self.mode = "await"  # await | green | yellow
        self.remaining = 0
        self.green = 0
        self.action = math.nan
        self.case2: float | None = None
        self.reward: float | None = None
        self.obs: LocalObservation | None = None


ARRIVAL_BLOCK = 3600


class Network:
    """Mutable simulation state (the ``SimState`` of the model).

    Arrivals are drawn per lane per second from a seeded stream that does not
    depend on signal decisions, so two controllers run on the same seed see
    identical demand.
    """

    def __init__(
        self,
        intersections: Sequence[IntersectionSpec],
        seed: int | Sequence[int] = 0,
        r_max: float = 1.0,
    ):
        if not intersections:
            raise ConfigError("network needs at least one intersection")
        self.specs = tuple(intersections)
        self.r_max = float(r_max)
        self.seed = seed
        self.time = 0

        self.lane_index: list[list[int]] = []
        lanes: list[LaneSpec] = []
        owner: list[int] = []
        for m, spec in enumerate(self.specs):
            self.lane_index.append(list(range(len(lanes), len(lanes) + spec.n_lanes)))
            lanes.extend(spec.lanes)
            owner.extend([m] * spec.n_lanes)
        self.lanes = lanes
        self.lane_owner = owner
        self.downstream: list[int | None] = []
        for lane in lanes:
            if lane.downstream is None:
                self.downstream.append(None)
            else:
                dm, dl = lane.downstream
                if not (0 <= dm < len(self.specs) and 0 <= dl < self.specs[dm].n_lanes):
                    raise ConfigError(f"lane {lane.name!r}: downstream {lane.downstream} does not exist")
                self.downstream.append(self.lane_index[dm][dl])

        n = len(lanes)
        self._rates = np.array([lane.arrival_rate for lane in lanes], dtype=float)
        self._sat = [lane.saturation_rate for lane in lanes]
        self._ff = [lane.free_flow_time for lane in lanes]
        self._cap = [lane.length_capacity for lane in lanes]
        self._seed_key = tuple(int(x) for x in np.atleast_1d(seed))
        self._blocks: dict[int, list[list[int]]] = {}

        self.queue: list[deque] = [deque() for _ in range(n)]
        self.transit: list[deque] = [deque() for _ in range(n)]
        self.backlog: list[deque] = [deque() for _ in range(n)]
        self.credit = [0.0] * n
        # integer aggregates so waiting sums stay exact
        self._join_sum = [0] * n  # over queue and backlog
        self._wait_sum = [0] * n  # settled waits of everything on the lane

        self.vehicles: list[Vehicle] = []
        self._join: list[int] = []
        self.exited = 0

        self.controllers = [_Controller() for _ in self.specs]
        self._green_lanes: list[set[int]] = [set() for _ in self.specs]

    # -- bookkeeping -------------------------------------------------

    @property
    def n_intersections(self) -> int:
        return len(self.specs)

    @property
    def injected(self) -> int:
        return len(self.vehicles)

    @property
    def in_network(self) -> int:
        return sum(len(q) + len(t) for q, t in zip(self.queue, self.transit))

    @property
    def blocked(self) -> int:
        return sum(len(b) for b in self.backlog)

    def ready(self) -> list[int]:
        """Intersections waiting for a green duration."""
        return [m for m, c in enumerate(self.controllers) if c.mode == "await"]

    def phases(self) -> np.ndarray:
        return np.array([c.phase for c in self.controllers], dtype=int)

    def actions(self) -> np.ndarray:
        """Green durations currently in force (NaN before the first decision)."""
        return np.array([c.action for c in self.controllers], dtype=float)

    def queue_lengths(self) -> np.ndarray:
        return np.array([len(q) for q in self.queue], dtype=float)

    def stopped(self, m: int) -> int:
        """N_{m,t}: queued vehicles over all lanes of intersection ``m``."""
        return sum(len(self.queue[k]) for k in self.lane_index[m])

    def vehicle_wait(self, vid: int) -> int:
        """Waiting seconds of a vehicle up to the current time."""
        v = self.vehicles[vid]
        if v.is_stopped:
            return v.accumulated_wait + (self.time - self._join[vid])
        return v.accumulated_wait

    def lane_wait(self, k: int) -> int:
        stopped = len(self.queue[k]) + len(self.backlog[k])
        return self._wait_sum[k] + stopped * self.time - self._join_sum[k]

    def waiting_at(self, m: int) -> int:
        return sum(self.lane_wait(k) for k in self.lane_index[m])

    def last_reward(self, m: int) -> float | None:
        return self.controllers[m].reward

    def last_observation(self, m: int) -> LocalObservation | None:
        return self.controllers[m].obs

    # -- arrivals -------------------------------------------------

    def _arrival_row(self, t: int) -> list[int]:
        b, r = divmod(t, ARRIVAL_BLOCK)
        block = self._blocks.get(b)
        if block is None:
            rng = np.random.default_rng([*self._seed_key, b])
            block = rng.poisson(self._rates, size=(ARRIVAL_BLOCK, len(self.lanes))).tolist()
            self._blocks = {b: block}
        return block[r]

    def _new_vehicle(self, t: int, k: int) -> int:
        vid = len(self.vehicles)
        self.vehicles.append(Vehicle(id=vid, entry_time=t, free_flow_time=self._ff[k]))
        self._join.append(t)
        return vid

    def _room(self, k: int) -> bool:
        return len(self.queue[k]) + len(self.transit[k]) < self._cap[k]

    def inject(self, m: int, lane: int, count: int) -> None:
        """Place ``count`` vehicles directly in a stop-line queue at the current time."""
        k = self.lane_index[m][lane]
        for _ in range(count):
            if not self._room(k):
                raise ConfigError(f"lane {k} over capacity")
            vid = self._new_vehicle(self.time, k)
            self.vehicles[vid].is_stopped = True
            self.vehicles[vid].free_flow_time = 0
            self.queue[k].append(vid)
            self._join_sum[k] += self.time

    # -- control -------------------------------------------------

    def set_green(self, m: int, green: float) -> None:
        spec = self.specs[m]
        ctrl = self.controllers[m]
        d_min, d_max = spec.green_bounds
        if not (d_min <= green <= d_max) or math.isnan(green):
            raise BoundsError(m, green, spec.green_bounds)
        if ctrl.mode != "await":
            raise RuntimeError(f"intersection {m} is mid-interval")
        ctrl.action = float(green)
        # whole-second simulation; actions stay continuous
        ctrl.green = int(min(max(round(green), d_min), d_max))
        ctrl.remaining = ctrl.green
        ctrl.mode = "green"
        ctrl.case2 = None
        ctrl.reward = None
        ctrl.obs = None
        self._green_lanes[m] = {self.lane_index[m][i] for i in spec.phases[ctrl.phase]}

    def tick(self) -> None:
        """Advance the whole network by one second."""
        t = self.time
        arrivals = self._arrival_row(t)
        for m, spec in enumerate(self.specs):
            ctrl = self.controllers[m]
            green = self._green_lanes[m] if ctrl.mode == "green" else ()
            for k in self.lane_index[m]:
                self._lane_tick(t, k, arrivals[k], k in green)
        self.time = t + 1
        for m, ctrl in enumerate(self.controllers):
            if ctrl.mode == "green":
                ctrl.remaining -= 1
                self._check_green(m, ctrl)
            elif ctrl.mode == "yellow":
                ctrl.remaining -= 1
                if ctrl.remaining <= 0:
                    ctrl.phase = (ctrl.phase + 1) % len(self.specs[m].phases)
                    ctrl.mode = "await"

    def _lane_tick(self, t: int, k: int, n_new: int, green: bool) -> None:
        queue = self.queue[k]
        transit = self.transit[k]
        vehicles = self.vehicles
        while transit and transit[0][0] <= t:
            vid = transit.popleft()[1]
            vehicles[vid].is_stopped = True
            self._join[vid] = t
            self._join_sum[k] += t
            queue.append(vid)
        backlog = self.backlog[k]
        while backlog and self._room(k):
            vid = backlog.popleft()
            v = vehicles[vid]
            wait = t - self._join[vid]
            v.accumulated_wait += wait
            v.is_stopped = False
            self._join_sum[k] -= self._join[vid]
            self._wait_sum[k] += wait
            transit.append((t + self._ff[k], vid))
        for _ in range(n_new):
            vid = self._new_vehicle(t, k)
            if self._room(k) and not backlog:
                transit.append((t + self._ff[k], vid))
            else:
                vehicles[vid].is_stopped = True
                self._join_sum[k] += t
                backlog.append(vid)
        if not green:
            self.credit[k] = 0.0
            return
        sat = self._sat[k]
        credit = self.credit[k] + sat
        down = self.downstream[k]
        while credit >= 1.0 and queue:
            vid = queue[0]
            if down is not None and not self._room(down):
                break
            queue.popleft()
            credit -= 1.0
            v = vehicles[vid]
            wait = t - self._join[vid]
            settled = v.accumulated_wait
            v.accumulated_wait = settled + wait
            v.is_stopped = False
            self._join_sum[k] -= self._join[vid]
            self._wait_sum[k] -= settled
            if down is None:
                v.exit_time = t
                self.exited += 1
            else:
                v.free_flow_time += self._ff[down]
                self._wait_sum[down] += v.accumulated_wait
                self.transit[down].append((t + self._ff[down], vid))
        self.credit[k] = min(credit, max(1.0, sat))

    def _check_green(self, m: int, ctrl: _Controller) -> None:
        spec = self.specs[m]
        if ctrl.remaining > 0:
            if ctrl.case2 is None and self._wasted_green(m, ctrl):
                ctrl.case2 = local_reward(spec, self.r_max, g_remaining=ctrl.remaining)
            return
        if ctrl.case2 is not None:
            ctrl.reward = ctrl.case2
        else:
            ctrl.reward = local_reward(spec, self.r_max, n_remaining=self.stopped(m))
        ctrl.obs = LocalObservation(
            stopped_per_lane=np.array([len(self.queue[k]) for k in self.lane_index[m]], dtype=int),
            remaining_green=0,
            all_phases=self.phases(),
        )
        ctrl.mode = "yellow"
        ctrl.remaining = spec.yellow_seconds
        if ctrl.remaining <= 0:
            ctrl.phase = (ctrl.phase + 1) % len(spec.phases)
            ctrl.mode = "await"

    def _wasted_green(self, m: int, ctrl: _Controller) -> bool:
        active = self._green_lanes[m]
        if any(self.queue[k] for k in active):
            return False
        return any(self.queue[k] for k in self.lane_index[m] if k not in active)

    def run_until_ready(self, m: int, default: Callable[[int], float] | None = None) -> None:
        """Tick until intersection ``m`` awaits a decision.

        Other intersections that finish their interval meanwhile get
        ``default(j)`` (their fixed-time green when omitted).
        """
        if default is None:
            default = lambda j: self.specs[j].fixed_green  # noqa: E731
        while self.controllers[m].mode != "await":
            self.tick()
            for j in self.ready():
                if j != m:
                    self.set_green(j, default(j))


def step_intersection(
    state: Network, m: int, green_seconds: float
) -> tuple[Network, float, LocalObservation]:
    """Run intersection ``m`` through one green+yellow interval."""
    state.set_green(m, green_seconds)
    state.run_until_ready(m)
    ctrl = state.controllers[m]
    return state, ctrl.reward, ctrl.obs


def global_reward(state: Network) -> float:
    """Negative site-wide waiting time per intersection."""
    total = sum(state.waiting_at(m) for m in range(state.n_intersections))
    return -total / state.n_intersections


def collect_metrics(vehicles: Sequence[Vehicle]) -> MetricsRecord:
    """Trip statistics over the vehicles that left the network."""
    done = [v for v in vehicles if v.exit_time is not None]
    if not done:
        return MetricsRecord(no_exits=True)
    travel = np.array([v.exit_time - v.entry_time for v in done], dtype=float)
    free = np.array([v.free_flow_time for v in done], dtype=float)
    delay = travel - free
    speed = np.divide(free, travel, out=np.ones_like(free), where=travel > 0)
    return MetricsRecord(
        throughput=len(done),
        total_waiting=float(sum(v.accumulated_wait for v in done)),
        mean_delay=float(delay.mean()),
        mean_speed=float(speed.mean()),
        mean_travel_time=float(travel.mean()),
        time_loss=float(delay.sum()),
    )


def run_fixed_time(
    intersections: Sequence[IntersectionSpec],
    horizon: int,
    seed: int | Sequence[int],
    r_max: float = 1.0,
    green: Sequence[float] | None = None,
) -> MetricsRecord:
    """Baseline where every phase shows the same configured green."""
    net = Network(intersections, seed=seed, r_max=r_max)
    plan = [s.fixed_green for s in net.specs] if green is None else list(green)
    while net.time < horizon:
        for m in net.ready():
            net.set_green(m, plan[m])
        net.tick()
    return collect_metrics(net.vehicles)
