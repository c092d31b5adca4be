import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopsignal.convergence import (
    ContractionError,
    MdpSpec,
    bellman_apply,
    certify,
    contraction_factor,
    direct_solve,
    gershgorin_radius,
    power_iteration_radius,
    random_mdp,
    solve_fixed_point,
    sup_metric,
    value_iteration,
)

SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


def swap_mdp(gamma=0.9):
    return MdpSpec(SWAP, np.array([1.0, 0.0]), gamma)


def test_mdp_validation():
    with pytest.raises(ValueError):
        MdpSpec(np.array([[0.5, 0.4], [0.0, 1.0]]), np.zeros(2), 0.5)
    with pytest.raises(ValueError):
        MdpSpec(np.array([[1.5, -0.5], [0.0, 1.0]]), np.zeros(2), 0.5)
    with pytest.raises(ValueError):
        MdpSpec(SWAP, np.zeros(3), 0.5)
    with pytest.raises(ContractionError):
        MdpSpec(SWAP, np.zeros(2), 1.0)


def test_bellman_examples():
    np.testing.assert_array_equal(bellman_apply(swap_mdp(0.0), np.array([7.0, -3.0])), [1.0, 0.0])
    np.testing.assert_array_equal(bellman_apply(swap_mdp(), np.zeros(2)), [1.0, 0.0])
    with pytest.raises(ValueError):
        bellman_apply(swap_mdp(), np.zeros(3))


def test_fixed_point_is_fixed():
    mdp = swap_mdp()
    v = solve_fixed_point(mdp)
    assert sup_metric(bellman_apply(mdp, v), v) <= 1e-10


def test_sup_metric_examples():
    u = np.array([1.0, 5.0])
    assert sup_metric(u, u) == 0
    assert sup_metric(u, np.array([0.0, 3.0])) == 2
    assert sup_metric(np.array([0.0, 3.0]), u) == 2
    with pytest.raises(ValueError):
        sup_metric(u, np.zeros(3))


def test_contraction_examples():
    assert contraction_factor(swap_mdp(0.0), np.array([1.0, 0.0]), np.zeros(2)) == 0
    assert contraction_factor(swap_mdp(), np.array([1.0, 0.0]), np.zeros(2)) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        contraction_factor(swap_mdp(), np.ones(2), np.ones(2))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 12), gamma=st.sampled_from([0.0, 0.5, 0.9, 0.99]),
       seed=st.integers(0, 2**32 - 1), zero=st.booleans())
def test_contraction_property(n, gamma, seed, zero):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(n, gamma, rng, zero_diagonal=zero)
    u, v = rng.uniform(-10, 10, (2, n))
    assert sup_metric(bellman_apply(mdp, u), bellman_apply(mdp, v)) <= gamma * sup_metric(u, v) + 1e-12


def test_gershgorin_examples():
    discs = gershgorin_radius(np.eye(4))
    assert discs.radii.tolist() == [0, 0, 0, 0]
    assert discs.bound == 1
    discs = gershgorin_radius(SWAP)
    assert discs.centers.tolist() == [0, 0]
    assert discs.radii.tolist() == [1, 1]
    assert discs.bound == 1
    for z in np.linalg.eigvals(SWAP):
        assert abs(abs(z) - 1) < 1e-12
        assert discs.contains(z)


def test_power_iteration_on_random_stochastic():
    rng = np.random.default_rng(0)
    P = random_mdp(10, 0.9, rng).P
    est = power_iteration_radius(P)
    assert est <= 1 + 1e-10
    assert est == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 2**32 - 1), zero=st.booleans())
def test_gershgorin_soundness(n, seed, zero):
    if zero and n < 2:
        n = 2
    P = random_mdp(n, 0.5, np.random.default_rng(seed), zero_diagonal=zero).P
    discs = gershgorin_radius(P)
    assert discs.bound <= 1 + 1e-10
    assert all(discs.contains(z) for z in np.linalg.eigvals(P))


def test_closed_form_fixed_point():
    v = solve_fixed_point(swap_mdp())
    np.testing.assert_allclose(v, [100 / 19, 90 / 19], rtol=0, atol=1e-9)


def test_zero_discount_fixed_point():
    mdp = random_mdp(5, 0.0, np.random.default_rng(1))
    np.testing.assert_array_equal(solve_fixed_point(mdp), mdp.R)


def test_unique_fixed_point_from_random_starts():
    rng = np.random.default_rng(2)
    mdp = random_mdp(8, 0.9, rng)
    v_star = direct_solve(mdp)
    for _ in range(10):
        v = solve_fixed_point(mdp, u0=rng.uniform(-100, 100, 8))
        trace = value_iteration(mdp, rng.uniform(-100, 100, 8))
        assert sup_metric(trace.values, v_star) <= 1e-10
        np.testing.assert_array_equal(v, v_star)


def test_geometric_decay_of_iterates():
    mdp = random_mdp(6, 0.9, np.random.default_rng(3), zero_diagonal=True)
    trace = value_iteration(mdp, reference=direct_solve(mdp))
    errs = trace.errors
    assert all(b <= 0.9 * a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert trace.converged


def test_zero_diagonal_generator():
    P = random_mdp(7, 0.5, np.random.default_rng(4), zero_diagonal=True).P
    assert np.all(np.diag(P) == 0)
    assert np.allclose(P.sum(axis=1), 1, atol=1e-12)


def test_certify_small_report():
    report = certify(n_cases=30, seed=5)
    assert report.passed
    lines = report.to_csv().strip().splitlines()
    assert len(lines) == 31
    assert lines[0].startswith("case,n_states,gamma")
    assert {c.zero_diagonal for c in report.cases} == {True, False}
    assert {c.gamma for c in report.cases} == {0.5, 0.9, 0.99}
    assert all(c.contraction_factor <= c.gamma + 1e-12 for c in report.cases)


def test_mdp_dump_round_trip():
    mdp = random_mdp(4, 0.9, np.random.default_rng(6))
    back = MdpSpec.from_dict(json.loads(json.dumps(mdp.to_dict())))
    np.testing.assert_array_equal(back.P, mdp.P)
    np.testing.assert_array_equal(back.R, mdp.R)


def test_faulty_discount_rejected_before_iteration():
    data = {"P": SWAP.tolist(), "R": [1.0, 0.0], "gamma": 1.0}
    with pytest.raises(ContractionError):
        MdpSpec.from_dict(data)
