import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from plotllp.ot_core import (
    EXACT_OT_CAP,
    ExactOTSizeError,
    NumericalError,
    SinkhornConfig,
    entropy,
    exact_ot,
    sinkhorn,
    transport_cost,
    transport_simplex,
    validate_coupling,
    wasserstein_p,
)

from oracles import double_loop_cost, enumerate_integral_ot, rational_instance


def measure(rng, n):
    return rng.dirichlet(np.ones(n))


def test_validate_coupling_outer_product(rng):
    a, b = measure(rng, 3), measure(rng, 5)
    assert validate_coupling(np.outer(a, b), a, b)


def test_validate_coupling_permutation():
    a = np.array([0.5, 0.5])
    assert validate_coupling(np.eye(2) / 2, a, a)


def test_validate_coupling_perturbed_entry(rng):
    a, b = measure(rng, 3), measure(rng, 4)
    Q = np.outer(a, b)
    Q[1, 2] += 1e-3
    assert not validate_coupling(Q, a, b, tol=1e-6)


def test_validate_coupling_negative_entry():
    a = np.array([0.5, 0.5])
    Q = np.array([[0.6, -0.1], [-0.1, 0.6]])
    assert not validate_coupling(Q, a, a)


def test_validate_coupling_shape_mismatch():
    with pytest.raises(ValueError):
        validate_coupling(np.ones((2, 3)) / 6, np.ones(2) / 2, np.ones(2) / 2)


def test_transport_cost_zero_cost(rng):
    a, b = measure(rng, 3), measure(rng, 4)
    assert transport_cost(np.outer(a, b), np.zeros((3, 4))) == 0.0


def test_transport_cost_diagonal():
    assert transport_cost(np.diag([0.5, 0.5]), np.array([[0.0, 1.0], [1.0, 0.0]])) == 0.0


def test_transport_cost_matches_double_loop(rng):
    Q, C = rng.random((3, 4)), rng.normal(size=(3, 4))
    assert transport_cost(Q, C) == pytest.approx(double_loop_cost(Q, C), abs=1e-12)


def test_transport_cost_shape_mismatch():
    with pytest.raises(ValueError):
        transport_cost(np.ones((2, 2)), np.ones((2, 3)))


def test_entropy_point_mass():
    Q = np.zeros((2, 3))
    Q[1, 2] = 1.0
    assert entropy(Q) == 0.0


def test_entropy_uniform():
    assert entropy(np.full((2, 2), 0.25)) == pytest.approx(np.log(4), abs=1e-12)


def test_entropy_of_product_is_sum(rng):
    a, b = measure(rng, 4), measure(rng, 6)
    assert entropy(np.outer(a, b)) == pytest.approx(entropy(a) + entropy(b), abs=1e-12)


def test_entropy_negative_entry():
    with pytest.raises(ValueError):
        entropy(np.array([[0.5, -0.1], [0.3, 0.3]]))


def test_sinkhorn_zero_cost_gives_product():
    a = np.array([0.5, 0.5])
    for lam in (0.1, 1.0, 25.0, 100.0):
        res = sinkhorn(np.zeros((2, 2)), a, a, SinkhornConfig(lam=lam))
        assert res.converged
        np.testing.assert_allclose(res.plan, 0.25, atol=1e-9)


def test_sinkhorn_tiny_lambda_is_independent_coupling():
    a, b = np.array([0.3, 0.7]), np.array([0.5, 0.5])
    res = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), a, b, SinkhornConfig(lam=1e-6))
    np.testing.assert_allclose(res.plan, [[0.15, 0.15], [0.35, 0.35]], atol=1e-4)


def test_sinkhorn_large_lambda_matches_exact():
    a = np.array([0.5, 0.5])
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    res = sinkhorn(C, a, a, SinkhornConfig(lam=100, log_domain=True))
    _, exact_cost = exact_ot(C, a, a)
    assert exact_cost == 0.0
    assert abs(transport_cost(res.plan, C) - exact_cost) <= 1e-3
    np.testing.assert_allclose(res.plan, np.diag([0.5, 0.5]), atol=1e-3)


def test_sinkhorn_flags_non_convergence(rng):
    a, b = measure(rng, 4), measure(rng, 5)
    res = sinkhorn(rng.random((4, 5)), a, b, SinkhornConfig(lam=40, max_iter=2, newton_after=None))
    assert not res.converged
    assert res.n_iter == 2
    assert res.marginal_error > 1e-9


def test_sinkhorn_plain_overflow_suggests_log_domain():
    # a nearly empty column under a 50x-scaled integer cost drives the scalings out of range
    C = np.array([[15.0, 8, 9], [1, 2, 0], [5, 24, 19], [27, 15, 18]])
    a = np.array([0.06, 0.22, 0.47, 0.25])
    b = np.array([0.001, 0.968, 0.031])
    with pytest.raises(NumericalError, match="log_domain"):
        sinkhorn(C, a, b, SinkhornConfig(lam=50, max_iter=300, newton_after=None))
    res = sinkhorn(C, a, b, SinkhornConfig(lam=50, log_domain=True))
    assert res.converged


def test_sinkhorn_log_domain_mandatory_above_threshold():
    assert SinkhornConfig(lam=51).use_log_domain
    assert not SinkhornConfig(lam=50).use_log_domain
    assert SinkhornConfig(lam=1, log_domain=True).use_log_domain


@pytest.mark.parametrize(
    "kwargs", [{"lam": 0}, {"lam": -1}, {"tol": 0}, {"max_iter": 0}, {"lam": float("nan")}]
)
def test_sinkhorn_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        SinkhornConfig(**kwargs)


def test_sinkhorn_rejects_bad_measure_and_cost(rng):
    a = np.array([0.5, 0.5])
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((2, 2)), np.array([0.6, 0.6]), a)
    with pytest.raises(ValueError):
        sinkhorn(np.array([[0.0, np.nan], [0.0, 0.0]]), a, a)


def test_sinkhorn_zero_mass_rows_come_back_empty(rng):
    a = np.array([0.5, 0.0, 0.5])
    b = np.array([0.25, 0.0, 0.75])
    res = sinkhorn(rng.random((3, 3)), a, b, SinkhornConfig(lam=10))
    assert res.converged
    assert np.all(res.plan[1] == 0) and np.all(res.plan[:, 1] == 0)
    assert validate_coupling(res.plan, a, b, 1e-9)


def test_sinkhorn_cost_nonincreasing_in_lambda():
    rng = np.random.default_rng(4)
    C, a, b = rng.random((4, 6)), measure(rng, 4), measure(rng, 6)
    costs = [transport_cost(sinkhorn(C, a, b, SinkhornConfig(lam=lam, log_domain=True)).plan, C) for lam in (1, 10, 100)]
    assert costs[0] >= costs[1] >= costs[2]
    _, exact_cost = exact_ot(C, a, b)
    assert costs[2] - exact_cost <= 1e-3


def test_sinkhorn_accepts_negative_costs(rng):
    a, b = measure(rng, 3), measure(rng, 3)
    C = rng.normal(size=(3, 3))
    res = sinkhorn(C, a, b, SinkhornConfig(lam=5))
    assert res.converged
    assert transport_cost(res.plan, C) >= exact_ot(C, a, b)[1] - 1e-9


sizes = st.tuples(st.integers(1, 5), st.integers(1, 8))


@st.composite
def ot_instances(draw):
    n, m = draw(sizes)
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    C = rng.random((n, m)) * draw(st.sampled_from([1.0, 5.0]))
    return C, measure(rng, n), measure(rng, m)


@settings(max_examples=60, deadline=None)
@given(ot_instances(), st.sampled_from([0.5, 5.0, 25.0, 80.0]))
def test_sinkhorn_sandwich_and_feasibility(instance, lam):
    C, a, b = instance
    cfg = SinkhornConfig(lam=lam)
    res = sinkhorn(C, a, b, cfg)
    assert res.converged
    assert validate_coupling(res.plan, a, b, cfg.tol)
    assert transport_cost(res.plan, C) >= exact_ot(C, a, b)[1] - 1e-9
    assert entropy(res.plan) <= entropy(a) + entropy(b) + 1e-9


@settings(max_examples=30, deadline=None)
@given(ot_instances(), st.integers(0, 2**32 - 1))
def test_sinkhorn_row_permutation_equivariance(instance, seed):
    C, a, b = instance
    perm = np.random.default_rng(seed).permutation(a.size)
    cfg = SinkhornConfig(lam=10)
    base = sinkhorn(C, a, b, cfg).plan
    permuted = sinkhorn(C[perm], a[perm], b, cfg).plan
    np.testing.assert_allclose(permuted, base[perm], atol=1e-8)


def test_exact_ot_zero_cost(rng):
    a, b = measure(rng, 3), measure(rng, 4)
    plan, cost = exact_ot(np.zeros((3, 4)), a, b)
    assert cost == 0.0
    assert validate_coupling(plan, a, b, 1e-9)


def test_exact_ot_identical_supports():
    x = np.array([0.0, 1.0, 3.0, 4.5])
    D = (x[:, None] - x[None, :]) ** 2
    a = np.full(4, 0.25)
    plan, cost = exact_ot(D, a, a)
    assert cost == 0.0
    np.testing.assert_allclose(plan, np.eye(4) / 4)


def test_exact_ot_matches_enumeration_on_3x4():
    rng = np.random.default_rng(2024)
    units = 12
    A = rng.multinomial(units, np.ones(3) / 3)
    B = rng.multinomial(units, np.ones(4) / 4)
    C = rng.random((3, 4))
    plan, cost = exact_ot(C, A / units, B / units)
    assert cost == pytest.approx(enumerate_integral_ot(C, A, B) / units, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_exact_ot_is_a_sparse_vertex(n, m, seed):
    rng = np.random.default_rng(seed)
    C, a, b = rng.random((n, m)), measure(rng, n), measure(rng, m)
    plan, cost = exact_ot(C, a, b)
    assert validate_coupling(plan, a, b, 1e-9)
    assert np.count_nonzero(plan > 1e-15) <= n + m - 1
    assert cost == pytest.approx(transport_cost(plan, C), abs=1e-12)


def test_exact_ot_vertex_rows_integral_for_integral_masses(rng):
    C, a, b = rational_instance(rng, 4, 7)
    plan, _ = exact_ot(C, a, b)
    units = plan * 12
    np.testing.assert_allclose(units, np.round(units), atol=1e-9)


def test_exact_ot_size_cap():
    n = 65
    a = np.full(n, 1.0 / n)
    with pytest.raises(ExactOTSizeError, match=str(EXACT_OT_CAP)):
        exact_ot(np.zeros((n, n)), a, a)
    with pytest.raises(ExactOTSizeError, match="10"):
        exact_ot(np.zeros((3, 4)), np.ones(3) / 3, np.ones(4) / 4, cap=10)


def test_transport_simplex_integral_supplies():
    C = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]])
    plan = transport_simplex(C, np.array([2.0, 1.0]), np.array([1.0, 1.0, 1.0]))
    # three labelings respect the counts: costs 4+3+0, 1+3+2 and 4+1+5
    np.testing.assert_allclose(plan, [[0, 1, 1], [1, 0, 0]])


def test_transport_simplex_unbalanced_rejected():
    with pytest.raises(ValueError):
        transport_simplex(np.zeros((2, 2)), np.array([1.0, 1.0]), np.array([1.0, 2.0]))


def test_wasserstein_identical_measures(rng):
    x = rng.random(5)
    D = np.abs(x[:, None] - x[None, :])
    a = measure(rng, 5)
    assert wasserstein_p(D, 2, a, a) == pytest.approx(0.0, abs=1e-12)


def test_wasserstein_symmetric(rng):
    x = rng.random((6, 2))
    D = np.linalg.norm(x[:, None] - x[None, :], axis=2)
    a, b = measure(rng, 6), measure(rng, 6)
    for p in (1, 2, 3.5):
        assert wasserstein_p(D, p, a, b) == pytest.approx(wasserstein_p(D, p, b, a), abs=1e-12)


def test_wasserstein_point_masses():
    D = np.array([[0.0, 2.5, 1.0], [2.5, 0.0, 3.0], [1.0, 3.0, 0.0]])
    a, b = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    for p in (1, 2, 4):
        assert wasserstein_p(D, p, a, b) == pytest.approx(2.5, abs=1e-12)
        assert exact_ot(D**p, a, b)[1] ** (1 / p) == pytest.approx(2.5, abs=1e-12)


def test_wasserstein_domain_errors():
    D = np.array([[0.0, 1.0], [1.0, 0.0]])
    a = np.array([0.5, 0.5])
    with pytest.raises(ValueError):
        wasserstein_p(D, 0.5, a, a)
    with pytest.raises(ValueError):
        wasserstein_p(np.array([[0.0, 1.0], [2.0, 0.0]]), 1, a, a)
    with pytest.raises(ValueError):
        wasserstein_p(np.array([[0.0, -1.0], [-1.0, 0.0]]), 1, a, a)
    with pytest.raises(ValueError):
        wasserstein_p(np.array([[1.0, 1.0], [1.0, 0.0]]), 1, a, a)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 2), elements=st.floats(-5, 5)), st.integers(0, 2**32 - 1))
def test_wasserstein_triangle_inequality(points, seed):
    rng = np.random.default_rng(seed)
    D = np.linalg.norm(points[:, None] - points[None, :], axis=2)
    a, b, c = measure(rng, 4), measure(rng, 4), measure(rng, 4)
    assert wasserstein_p(D, 2, a, c) <= wasserstein_p(D, 2, a, b) + wasserstein_p(D, 2, b, c) + 1e-9
