import numpy as np
import pytest

from _helpers import EXACT, random_cost, random_inputs, random_spec, rel_err
from thermoprop.dynamics import RelaxationConfig, free_phase
from thermoprop.eqprop import (
    GradientEstimate,
    ReadoutCost,
    estimate_one_sided,
    estimate_symmetric,
    local_coupling_update,
    nudge_gradient,
    nudged_phase,
    optimal_beta_sym,
)
from thermoprop.experiments import fit_loglog
from thermoprop.oracle import oracle_implicit


@pytest.fixture(scope="module")
def problem():
    spec = random_spec(8, seed=2)
    y, s = random_inputs(spec, n=4, seed=2)
    cost = random_cost(spec, n=4, seed=2)
    eq = free_phase(spec, y, s, EXACT)
    return spec, cost, eq, oracle_implicit(spec, cost, eq).values


def test_readout_cost_values():
    cost = ReadoutCost.from_dsm(np.array([[1.0, 2.0]]), np.array([2.0]))
    assert cost.value(np.array([[1.0, 2.0]]))[0] == 0.0
    assert cost.value(np.array([[2.0, 2.0]]))[0] == pytest.approx(2.0)
    np.testing.assert_allclose(cost.grad(np.array([[2.0, 2.0]])), [[4.0, 0.0]])


def test_nudge_gradient():
    spec = random_spec(8)
    p = spec.partition
    x = np.zeros((1, 8))
    x[0, p.output_slice] = [1.0, 0.0]
    cost = ReadoutCost.from_dsm(np.zeros((1, 2)), np.array([1.0]))
    g = nudge_gradient(cost, x, 0.1, p)
    expected = np.zeros((1, 8))
    expected[0, p.output_slice.start] = 0.1
    np.testing.assert_allclose(g, expected)
    assert not np.any(nudge_gradient(cost, x, 0.0, p))
    at_target = ReadoutCost.from_dsm(x[:, p.output_slice], np.array([1.0]))
    assert not np.any(nudge_gradient(at_target, x, 0.5, p))


def test_estimators_vanish_at_target(problem):
    spec, _, eq, _ = problem
    cost = ReadoutCost.from_dsm(eq.output(), np.ones(4))
    assert not np.any(estimate_one_sided(spec, cost, eq, 0.1, EXACT).values)
    assert not np.any(estimate_symmetric(spec, cost, eq, 0.1, EXACT).values)


def test_one_sided_near_oracle_and_linear_error(problem):
    spec, cost, eq, ref = problem
    errs = [rel_err(estimate_one_sided(spec, cost, eq, b, EXACT).values, ref) for b in (1e-4, 1e-3, 1e-2)]
    assert errs[0] <= 1e-2
    fit = fit_loglog(list(zip((1e-4, 1e-3, 1e-2), errs)), min_points=3)
    assert 0.9 <= fit.slope <= 1.1


def test_symmetric_bias_quadratic_in_beta(problem):
    spec, cost, eq, ref = problem
    betas = np.logspace(-3, -1, 6)
    bias = [np.linalg.norm(estimate_symmetric(spec, cost, eq, b, EXACT).values - ref) for b in betas]
    fit = fit_loglog(list(zip(betas, bias)))
    assert 1.9 <= fit.slope <= 2.1


def test_beta_must_be_positive(problem):
    spec, cost, eq, _ = problem
    for bad in (0.0, -0.1, float("nan")):
        with pytest.raises(ValueError):
            estimate_symmetric(spec, cost, eq, bad, EXACT)


def test_gradient_estimate_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        GradientEstimate(np.array([1.0, np.inf]), "x")


def test_per_sample_mean(problem):
    spec, cost, eq, _ = problem
    est = estimate_symmetric(spec, cost, eq, 0.01, EXACT)
    assert est.per_sample.shape == (4, spec.n_params)
    np.testing.assert_allclose(est.per_sample.mean(axis=0), est.values)


def test_phases_use_distinct_reproducible_noise(problem):
    spec, cost, eq, _ = problem
    cfg = RelaxationConfig(beta_phys=100.0, max_steps=200, seed=5)
    a = estimate_symmetric(spec, cost, eq, 0.05, cfg).values
    b = estimate_symmetric(spec, cost, eq, 0.05, cfg).values
    c = estimate_symmetric(spec, cost, eq, 0.05, cfg.with_seed(6)).values
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def _coupling_slices(spec, est):
    out, pos = [], 0
    for c in spec.couplings:
        du = est[pos:pos + c.u.size].reshape(c.u.shape, order="F")
        pos += c.u.size
        dv = est[pos:pos + c.v.size].reshape(c.v.shape, order="F")
        pos += c.v.size
        out.append((du, dv))
    return out


def test_local_update_matches_one_sided(problem):
    spec, cost, eq, _ = problem
    beta = 0.02
    nudged = nudged_phase(spec, cost, eq, beta, EXACT.with_seed((0, 1)))
    est = estimate_one_sided(spec, cost, eq, beta, EXACT).values
    for c, (du, dv) in zip(spec.couplings, _coupling_slices(spec, est)):
        lu, lv = local_coupling_update(nudged, eq, c, beta)
        np.testing.assert_allclose(lu, du, atol=1e-12)
        np.testing.assert_allclose(lv, dv, atol=1e-12)


def test_local_update_matches_symmetric(problem):
    spec, cost, eq, _ = problem
    beta = 0.02
    plus = nudged_phase(spec, cost, eq, beta, EXACT)
    minus = nudged_phase(spec, cost, eq, -beta, EXACT)
    est = estimate_symmetric(spec, cost, eq, beta, EXACT).values
    for c, (du, dv) in zip(spec.couplings, _coupling_slices(spec, est)):
        lu, lv = local_coupling_update(plus, minus, c, 2 * beta)
        np.testing.assert_allclose(lu, du, atol=1e-12)
        np.testing.assert_allclose(lv, dv, atol=1e-12)


def test_local_update_zero_for_identical_states(problem):
    spec, _, eq, _ = problem
    du, dv = local_coupling_update(eq, eq, spec.couplings[0], 0.1)
    assert not np.any(du) and not np.any(dv)


def test_optimal_beta_formula():
    assert optimal_beta_sym(1, 1, 1, 1, 1, 1) == pytest.approx(1.0)
    assert optimal_beta_sym(64, 1, 1, 1, 1, 1) == pytest.approx(2.0)
    assert optimal_beta_sym(1, 8, 1, 1, 1, 1) == pytest.approx(2.0)
    # beta_dagger ~ beta_phys^(-1/6)
    assert optimal_beta_sym(1, 1, 1, 64, 1, 1) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        optimal_beta_sym(1, 1, 0, 1, 1, 1)
