"""Numerical checks of policy-evaluation convergence on finite MDPs.

The Bellman operator for a fixed policy is ``T u = R + lam * P u``. With a
row-stochastic ``P`` it is a ``lam``-contraction in the sup metric, so value
iteration converges geometrically to the unique solution of
``(I - lam P) V = R``.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_TOL = 1e-12
STEP_TOL = 1e-12
MAX_ITER = 100_000
VI_BLOCK = 16
SLACK = 1e-12


class ContractionError(ValueError):
    """The discount is outside [0, 1), so the contraction argument does not apply."""


@dataclass(frozen=True)
class MdpSpec:
    P: np.ndarray
    R: np.ndarray
    gamma: float

    def __post_init__(self) -> None:
        P = np.asarray(self.P, dtype=float)
        R = np.asarray(self.R, dtype=float)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError(f"P must be square, got shape {P.shape}")
        if R.shape != (P.shape[0],):
            raise ValueError(f"R has shape {R.shape}, expected ({P.shape[0]},)")
        if not (np.isfinite(P).all() and np.isfinite(R).all()):
            raise ValueError("P and R must be finite")
        if (P < 0).any():
            raise ValueError("P has negative entries")
        rows = np.abs(P.sum(axis=1) - 1.0)
        if rows.max(initial=0.0) > ROW_TOL:
            raise ValueError(f"row sums deviate from 1 by {rows.max():.3g}")
        if not (0.0 <= self.gamma < 1.0):
            raise ContractionError(f"discount must be in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    def to_dict(self) -> dict:
        return {"P": self.P.tolist(), "R": self.R.tolist(), "gamma": self.gamma}

    @classmethod
    def from_dict(cls, data: dict) -> "MdpSpec":
        return cls(np.array(data["P"]), np.array(data["R"]), float(data["gamma"]))


def bellman_apply(mdp: MdpSpec, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (mdp.n_states,):
        raise ValueError(f"value vector has shape {u.shape}, expected ({mdp.n_states},)")
    return mdp.R + mdp.gamma * (mdp.P @ u)


def sup_metric(u: np.ndarray, v: np.ndarray) -> float:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError("vectors differ in length")
    return float(np.max(np.abs(u - v), initial=0.0))


def contraction_factor(mdp: MdpSpec, u: np.ndarray, v: np.ndarray) -> float:
    d = sup_metric(u, v)
    if d == 0.0:
        raise ValueError("contraction factor undefined for u == v")
    return sup_metric(bellman_apply(mdp, u), bellman_apply(mdp, v)) / d


@dataclass
class GershgorinDiscs:
    centers: np.ndarray
    radii: np.ndarray

    @property
    def bound(self) -> float:
        return float(np.max(np.abs(self.centers) + self.radii))

    def contains(self, z: complex, tol: float = 1e-10) -> bool:
        return bool((np.abs(z - self.centers) <= self.radii + tol).any())


def gershgorin_radius(A: np.ndarray) -> GershgorinDiscs:
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    centers = np.diag(A).copy()
    radii = np.abs(A).sum(axis=1) - np.abs(centers)
    return GershgorinDiscs(centers, radii)


def power_iteration_radius(A: np.ndarray, iterations: int = 500, seed: int = 0) -> float:
    """Spectral-radius estimate ``||A^k x||^(1/k)``-style, via normalized growth."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5, 1.5, size=A.shape[0])
    est = 0.0
    for _ in range(iterations):
        y = A @ x
        norm = np.max(np.abs(y))
        if norm == 0.0:
            return 0.0
        est = norm / np.max(np.abs(x))
        x = y / norm
    return float(est)


@dataclass
class IterationTrace:
    values: np.ndarray
    iterations: int
    errors: list[float] = field(default_factory=list)
    converged: bool = True


def value_iteration(mdp: MdpSpec, u0: np.ndarray | None = None,
                    reference: np.ndarray | None = None) -> IterationTrace:
    """Iterate ``T`` until the sup-metric step drops below 1e-12.

    When ``reference`` is given the distance of every iterate to it is recorded.
    """
    u = np.zeros(mdp.n_states) if u0 is None else np.asarray(u0, dtype=float).copy()
    n = mdp.n_states
    # affine map as one matrix on [u, 1] so each step is a single matmul
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = mdp.gamma * mdp.P
    A[:n, n] = mdp.R
    A[n, n] = 1.0
    blocks = [u[None, :]]
    done = 0
    converged = False
    # steps are checked per block to cut per-iteration overhead; the stopping
    # iterate is the same as checking after every step
    while done < MAX_ITER:
        k = min(VI_BLOCK, MAX_ITER - done)
        block = np.empty((k + 1, n + 1))
        block[0, :n] = u
        block[0, n] = 1.0
        for i in range(k):
            np.matmul(A, block[i], out=block[i + 1])
        block = block[:, :n]
        steps = np.abs(np.diff(block, axis=0)).max(axis=1)
        hit = np.flatnonzero(steps < STEP_TOL)
        if hit.size:
            k = int(hit[0]) + 1
            converged = True
        blocks.append(block[1:k + 1])
        done += k
        u = block[k]
        if converged:
            break
    errors: list[float] = []
    if reference is not None:
        ref = np.asarray(reference, dtype=float)
        errors = np.abs(np.concatenate(blocks) - ref).max(axis=1).tolist()
    return IterationTrace(u.copy(), done, errors, converged)


def direct_solve(mdp: MdpSpec) -> np.ndarray:
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * mdp.P, mdp.R)


class CertificationFailure(AssertionError):
    def __init__(self, message: str, mdp: MdpSpec | None = None):
        super().__init__(message)
        self.mdp = mdp


def geometric_decay_ok(errors: list[float], gamma: float) -> bool:
    return all(b <= gamma * a + SLACK for a, b in zip(errors, errors[1:]))


def solve_fixed_point(mdp: MdpSpec, u0: np.ndarray | None = None) -> np.ndarray:
    """Direct solve, cross-checked by value iteration from ``u0`` (zero by default)."""
    if not (0.0 <= mdp.gamma < 1.0):
        raise ContractionError(f"discount must be in [0, 1), got {mdp.gamma}")
    v = direct_solve(mdp)
    trace = value_iteration(mdp, u0, reference=v)
    if not trace.converged:
        raise CertificationFailure("value iteration did not converge", mdp)
    if not geometric_decay_ok(trace.errors, mdp.gamma):
        raise CertificationFailure("iterates did not decay at rate <= discount", mdp)
    if sup_metric(trace.values, v) > 1e-10:
        raise CertificationFailure("iteration and direct solve disagree", mdp)
    return v


def random_mdp(n: int, gamma: float, rng: np.random.Generator,
               zero_diagonal: bool = False, alpha: float = 1.0) -> MdpSpec:
    """Dirichlet transition rows, uniform rewards in [-1, 1]."""
    if zero_diagonal and n < 2:
        raise ValueError("a zero diagonal needs at least two states")
    P = rng.dirichlet(np.full(n, alpha), size=n)
    if zero_diagonal:
        np.fill_diagonal(P, 0.0)
        P /= P.sum(axis=1, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=n)
    return MdpSpec(P, R, gamma)


@dataclass
class CaseResult:
    case: int
    n_states: int
    gamma: float
    zero_diagonal: bool
    contraction_factor: float
    iterations: int
    fixed_point_residual: float
    bellman_residual: float
    gershgorin_bound: float
    spectral_estimate: float
    passed: bool
    failures: str = ""

    @classmethod
    def columns(cls) -> list[str]:
        return ["case", "n_states", "gamma", "zero_diagonal", "contraction_factor", "iterations",
                "fixed_point_residual", "bellman_residual", "gershgorin_bound",
                "spectral_estimate", "passed", "failures"]

    def row(self) -> list:
        return [self.case, self.n_states, self.gamma, int(self.zero_diagonal),
                f"{self.contraction_factor:.17g}", self.iterations,
                f"{self.fixed_point_residual:.6e}", f"{self.bellman_residual:.6e}",
                f"{self.gershgorin_bound:.17g}", f"{self.spectral_estimate:.17g}",
                int(self.passed), self.failures]


def certify_case(case: int, mdp: MdpSpec, rng: np.random.Generator,
                 zero_diagonal: bool, pairs: int = 3) -> CaseResult:
    lam = mdp.gamma
    fails = []
    factor = 0.0
    for _ in range(pairs):
        u = rng.uniform(-10, 10, size=mdp.n_states)
        v = rng.uniform(-10, 10, size=mdp.n_states)
        if sup_metric(u, v) == 0.0:
            continue
        f = contraction_factor(mdp, u, v)
        factor = max(factor, f)
        d = sup_metric(u, v)
        if sup_metric(bellman_apply(mdp, u), bellman_apply(mdp, v)) > lam * d + SLACK:
            fails.append("contraction")
    v_star = direct_solve(mdp)
    trace = value_iteration(mdp, reference=v_star)
    if not trace.converged:
        fails.append("no_convergence")
    if not geometric_decay_ok(trace.errors, lam):
        fails.append("decay")
    resid = sup_metric(trace.values, v_star)
    if resid > 1e-10:
        fails.append("fixed_point")
    bell = sup_metric(bellman_apply(mdp, v_star), v_star)
    if bell > 1e-10:
        fails.append("bellman")
    discs = gershgorin_radius(mdp.P)
    if discs.bound > 1 + 1e-10:
        fails.append("gershgorin")
    spec = power_iteration_radius(mdp.P, iterations=50)
    if spec > 1 + 1e-10:
        fails.append("spectral")
    if mdp.n_states <= 6:
        eig = np.linalg.eigvals(mdp.P)
        if not all(discs.contains(z) for z in eig):
            fails.append("disc_membership")
    return CaseResult(case, mdp.n_states, lam, zero_diagonal, factor, trace.iterations,
                      resid, bell, discs.bound, spec, not fails, ";".join(fails))


@dataclass
class CertificationReport:
    cases: list[CaseResult]
    seconds: float
    failed_mdps: list[MdpSpec] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CaseResult.columns())
        for c in self.cases:
            w.writerow(c.row())
        return buf.getvalue()

    def summary(self) -> str:
        bad = sum(not c.passed for c in self.cases)
        worst = max((c.contraction_factor / c.gamma for c in self.cases if c.gamma > 0), default=0.0)
        return (f"{len(self.cases)} cases, {bad} failed, "
                f"max factor/discount {worst:.6f}, "
                f"max fixed-point residual {max((c.fixed_point_residual for c in self.cases), default=0.0):.3e}")

    def dump_failures(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        out = []
        for c, mdp in zip((c for c in self.cases if not c.passed), self.failed_mdps):
            path = directory / f"failed_mdp_{c.case:04d}.json"
            path.write_text(json.dumps(mdp.to_dict()), encoding="utf-8")
            out.append(path)
        return out


def certify(n_cases: int = 500, seed: int = 0, gammas=(0.5, 0.9, 0.99),
            n_range: tuple[int, int] = (2, 20)) -> CertificationReport:
    """Run the randomized certification; cases alternate zero and free diagonals."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    cases, failed = [], []
    for i in range(n_cases):
        gamma = gammas[i % len(gammas)]
        zero = bool((i // len(gammas)) % 2)
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        mdp = random_mdp(n, gamma, rng, zero_diagonal=zero)
        res = certify_case(i, mdp, rng, zero)
        cases.append(res)
        if not res.passed:
            failed.append(mdp)
    return CertificationReport(cases, time.perf_counter() - start, failed)
