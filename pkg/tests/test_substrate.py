import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import PARTITIONS, fd_grad, random_spec, rel_err
from thermoprop.substrate import (
    BaseEnergy,
    BlockPartition,
    LowRankCoupling,
    StiffnessError,
    SubstrateError,
    SubstrateSpec,
    build_substrate,
    energy,
    get_theta,
    grad_theta,
    grad_theta_jvp,
    grad_x,
    hessian_free,
    hessian_full,
    mixed_second,
    mixed_third_coupling_norm,
    mixed_third_tensor,
    random_coupling,
    spec_from_dict,
    spec_to_dict,
    third_x_diagonal,
    with_theta,
)


def unit_spec(x_scale=1.0):
    # two modules of 2, one rank-1 coupling with u = v = e1
    p = BlockPartition(1, 1, 2, (2, 2))
    c = LowRankCoupling(0, 1, [[x_scale], [0.0]], [[x_scale], [0.0]])
    return SubstrateSpec(p, BaseEnergy.uniform(4), (c,), lambda_floor=1e-3)


def dense_energy(spec, x):
    b = spec.base
    e = np.sum(0.5 * b.stiffness * x**2 + 0.25 * b.quartic * x**4 - b.bias * x)
    W = np.zeros((spec.dim, spec.dim))
    for c in spec.couplings:
        W[spec.partition.module_slice(c.source), spec.partition.module_slice(c.target)] = c.dense()
    return e + x @ W @ x


# -- construction --------------------------------------------------------------

def test_partition_layout():
    p = PARTITIONS[16]
    assert p.dim == 16 and p.free_dim == 11
    assert p.free_slice == slice(5, 16)
    assert [p.block_of(i) for i in (0, 4, 5, 11, 12, 15)] == ["I", "I", "H", "H", "O", "O"]
    assert [p.module_of(i) for i in (0, 3, 4, 15)] == [0, 0, 1, 3]


def test_partition_rejects_mismatch():
    with pytest.raises(SubstrateError):
        BlockPartition(3, 3, 2, (3, 3, 3))
    with pytest.raises(SubstrateError):
        BlockPartition(0, 3, 2, (3, 2))


def test_coupling_validation():
    p = PARTITIONS[8]
    base = BaseEnergy.uniform(8)
    with pytest.raises(SubstrateError):
        LowRankCoupling(1, 0, np.ones((3, 1)), np.ones((3, 1)))
    bad = LowRankCoupling(0, 1, np.ones((2, 1)), np.ones((3, 1)))
    with pytest.raises(SubstrateError):
        SubstrateSpec(p, base, (bad,))
    c = random_coupling(p, 0, 1, 1, 0)
    with pytest.raises(SubstrateError):
        SubstrateSpec(p, base, (c, c))


def test_factors_are_read_only():
    c = random_coupling(PARTITIONS[8], 0, 1, 2, 0)
    with pytest.raises(ValueError):
        c.u[0, 0] = 1.0


def test_stiffness_floor_rejected_with_report():
    p = PARTITIONS[8]
    c = random_coupling(p, 1, 2, 2, 3, gain=200.0)
    with pytest.raises(StiffnessError) as info:
        SubstrateSpec(p, BaseEnergy.uniform(8), (c,))
    rep = info.value.report()
    assert rep["lambda_min"] < 0.1 and len(rep["lowest_eigenvalues"]) == 5


def test_auto_rescale_lands_on_floor():
    p = PARTITIONS[8]
    c = random_coupling(p, 1, 2, 2, 3, gain=200.0)
    spec, scale = build_substrate(p, BaseEnergy.uniform(8), [c])
    assert 0 < scale < 1
    assert spec.lambda_min == pytest.approx(0.1, rel=1e-6)
    with pytest.raises(StiffnessError):
        build_substrate(p, BaseEnergy.uniform(8), [c], rescale=False)


def test_couplings_sorted_canonically():
    p = PARTITIONS[16]
    cs = [random_coupling(p, m, mp, 2, m + mp) for m, mp in ((2, 3), (0, 1), (1, 3))]
    spec = SubstrateSpec(p, BaseEnergy.uniform(16), cs)
    assert [(c.source, c.target) for c in spec.couplings] == [(0, 1), (1, 3), (2, 3)]


# -- energy --------------------------------------------------------------------

def test_energy_zero_at_origin():
    spec = random_spec(8, bias_scale=0.0)
    assert energy(spec, np.zeros(8)) == 0.0


def test_energy_hand_value():
    spec = unit_spec()
    x = np.array([1.0, 0.0, 1.0, 0.0])
    assert energy(spec, x) == pytest.approx(2.0)


@pytest.mark.parametrize("kappa", [0.0, 0.5])
def test_energy_matches_dense(kappa):
    spec = random_spec(8, kappa=kappa, seed=3)
    x = np.random.default_rng(1).standard_normal((5, 8))
    np.testing.assert_allclose(energy(spec, x), [dense_energy(spec, xi) for xi in x], rtol=1e-12)


def test_energy_rejects_wrong_length():
    with pytest.raises(SubstrateError):
        energy(random_spec(8), np.zeros(7))


# -- gradients -----------------------------------------------------------------

@pytest.mark.parametrize("kappa", [0.0, 0.3])
def test_grad_x_matches_fd(kappa):
    spec = random_spec(8, kappa=kappa, seed=1)
    x = np.random.default_rng(2).standard_normal(8)
    assert rel_err(grad_x(spec, x), fd_grad(lambda z: energy(spec, z), x)) <= 1e-6


def test_grad_x_zero_at_origin_without_bias():
    spec = random_spec(8, bias_scale=0.0)
    assert not np.any(grad_x(spec, np.zeros(8)))


def test_grad_x_quartic_term():
    # the quartic contribution at x = 2 with kappa = 1 is kappa x^3 = 8
    p = PARTITIONS[8]
    x = np.full(8, 2.0)
    with_k = SubstrateSpec(p, BaseEnergy.uniform(8, quartic=1.0), ())
    without = SubstrateSpec(p, BaseEnergy.uniform(8), ())
    np.testing.assert_allclose(grad_x(with_k, x) - grad_x(without, x), 8.0)


def test_grad_x_batched_matches_loop():
    spec = random_spec(16, seed=4)
    x = np.random.default_rng(0).standard_normal((3, 2, 16))
    loop = np.array([[grad_x(spec, xi) for xi in row] for row in x])
    np.testing.assert_allclose(grad_x(spec, x), loop, rtol=1e-13)


@pytest.mark.parametrize("dim", [8, 16])
def test_grad_theta_matches_fd(dim):
    spec = random_spec(dim, kappa=0.2, seed=5)
    x = np.random.default_rng(3).standard_normal(dim)
    theta = get_theta(spec)
    fd = fd_grad(lambda t: energy(with_theta(spec, t, check=False), x), theta)
    assert rel_err(grad_theta(spec, x), fd) <= 1e-6


def test_grad_theta_hand_value():
    spec = unit_spec()
    x = np.array([2.0, 0.0, 3.0, 0.0])
    g = grad_theta(spec, x)
    assert g[0] == pytest.approx(6.0)  # dE/dU_11 = x_m (x_m' . v)


def test_grad_theta_zero_at_origin_for_factors():
    spec = random_spec(8)
    g = grad_theta(spec, np.zeros(8))
    assert not np.any(g[spec.coupling_mask()])


def test_grad_theta_jvp_is_directional_derivative():
    spec = random_spec(8, seed=6)
    rng = np.random.default_rng(4)
    x, dx = rng.standard_normal(8), rng.standard_normal(8)
    h = 1e-6
    fd = (grad_theta(spec, x + h * dx) - grad_theta(spec, x - h * dx)) / (2 * h)
    assert rel_err(grad_theta_jvp(spec, x, dx), fd) <= 1e-7


# -- second and third derivatives ---------------------------------------------

def test_hessian_free_diagonal_without_couplings():
    p = PARTITIONS[8]
    a = np.arange(1.0, 9.0)
    spec = SubstrateSpec(p, BaseEnergy(a, np.zeros(8), np.zeros(8)), ())
    np.testing.assert_array_equal(hessian_free(spec, np.zeros(8)), np.diag(a[3:]))


@pytest.mark.parametrize("kappa", [0.0, 0.4])
def test_hessian_free_matches_fd(kappa):
    spec = random_spec(8, kappa=kappa, seed=7)
    x = np.random.default_rng(5).standard_normal(8)
    fs = spec.partition.free_slice
    fd = np.empty((5, 5))
    for j in range(5):
        e = np.zeros(8)
        e[3 + j] = 1e-5
        fd[:, j] = (grad_x(spec, x + e) - grad_x(spec, x - e))[fs] / 2e-5
    assert rel_err(hessian_free(spec, x), fd) <= 1e-5


def test_hessian_full_symmetric():
    spec = random_spec(16, kappa=0.2, seed=2)
    h = hessian_full(spec, np.random.default_rng(0).standard_normal(16))
    np.testing.assert_allclose(h, h.T)


def test_mixed_second_matches_fd():
    spec = random_spec(8, kappa=0.1, seed=8)
    x = np.random.default_rng(6).standard_normal(8)
    fd = np.empty((spec.n_params, 5))
    for j in range(5):
        e = np.zeros(8)
        e[3 + j] = 1e-5
        fd[:, j] = (grad_theta(spec, x + e) - grad_theta(spec, x - e)) / 2e-5
    assert rel_err(mixed_second(spec, x), fd) <= 1e-5


def test_mixed_second_bias_rows():
    spec = random_spec(8, seed=9)
    m = mixed_second(spec, np.random.default_rng(0).standard_normal(8))
    bias_rows = m[~spec.coupling_mask()]
    np.testing.assert_array_equal(bias_rows, -np.eye(5))


def test_mixed_second_at_origin_vanishes_between_free_modules():
    # at x = 0 a coupling row is linear in the partner block, so it is zero
    spec = random_spec(8, seed=1)
    m = mixed_second(spec, np.zeros(8))
    assert not np.any(m[spec.coupling_mask()])


def test_third_mixed_bias_rows_vanish():
    spec = random_spec(8, kappa=0.5, seed=2)
    n = mixed_third_tensor(spec, np.random.default_rng(1).standard_normal(8))
    assert np.max(np.abs(n[~spec.coupling_mask()])) <= 1e-6


def test_third_mixed_is_constant_in_state():
    spec = random_spec(8, kappa=0.5, seed=2)
    rng = np.random.default_rng(2)
    a = mixed_third_tensor(spec, rng.standard_normal(8))
    b = mixed_third_tensor(spec, rng.standard_normal(8))
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_third_mixed_diagonal_vanishes():
    # d^3 E / dU dx_j dx_j = 0: the energy is bilinear across modules, never quadratic within one
    spec = random_spec(16, kappa=0.5, seed=3)
    n = mixed_third_tensor(spec, np.random.default_rng(3).standard_normal(16))
    assert np.max(np.abs(np.diagonal(n, axis1=1, axis2=2))) <= 1e-6


def test_third_mixed_zero_when_coupling_touches_only_clamped_and_one_free_module():
    p = BlockPartition(3, 3, 2, (3, 3, 2))
    c = random_coupling(p, 0, 1, 2, 0)
    spec = SubstrateSpec(p, BaseEnergy.uniform(8), (c,))
    assert mixed_third_coupling_norm(spec, np.random.default_rng(0).standard_normal(8)) <= 1e-6


def test_third_mixed_nonzero_between_free_modules():
    # factor rows pair one free coordinate in each module with the partner factor
    spec = random_spec(8, seed=4)
    assert mixed_third_coupling_norm(spec, np.zeros(8)) > 1e-3


def test_third_x_diagonal_is_6_kappa_x():
    spec = random_spec(8, kappa=0.7, seed=5)
    x = np.random.default_rng(4).standard_normal(8)
    expected = 6 * spec.base.quartic * x
    np.testing.assert_allclose(third_x_diagonal(spec, x), expected[3:], atol=1e-6)
    assert np.max(np.abs(expected[3:])) > 0.1


# -- parameters and serialization ---------------------------------------------

def test_theta_round_trip_and_order():
    spec = random_spec(8, seed=3)
    theta = get_theta(spec)
    assert theta.size == spec.n_params
    c = spec.couplings[0]
    np.testing.assert_array_equal(theta[:c.u.size], c.u.ravel(order="F"))
    new = with_theta(spec, theta + 0.01, check=False)
    np.testing.assert_allclose(get_theta(new), theta + 0.01)


def test_with_theta_checks_shape_and_floor():
    spec = random_spec(8, seed=3)
    with pytest.raises(SubstrateError):
        with_theta(spec, np.zeros(3))
    theta = get_theta(spec) * 50
    with pytest.raises(StiffnessError):
        with_theta(spec, theta)


def test_trainable_flags_shrink_theta():
    full = random_spec(8, seed=1)
    no_v = random_spec(8, seed=1, train_v=False)
    assert no_v.n_params == full.n_params - sum(c.v.size for c in full.couplings)
    no_bias = random_spec(8, seed=1, train_bias=False)
    assert no_bias.coupling_mask().all()


def test_spec_dict_round_trip():
    spec = random_spec(16, kappa=0.2, seed=2)
    back, scale = spec_from_dict(spec_to_dict(spec))
    assert scale == 1.0
    x = np.random.default_rng(0).standard_normal(16)
    assert energy(back, x) == energy(spec, x)
    np.testing.assert_array_equal(get_theta(back), get_theta(spec))


def test_spec_from_dict_strict():
    d = {"partition": PARTITIONS[8].to_dict(), "couplings": [], "colour": 1}
    with pytest.raises(SubstrateError, match="unknown keys"):
        spec_from_dict(d)
    d = {"partition": PARTITIONS[8].to_dict(), "couplings": [{"m": 0, "mp": 1, "k": 1, "seed": 0, "x": 2}]}
    with pytest.raises(SubstrateError, match="unknown keys"):
        spec_from_dict(d)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), gain=st.floats(0.1, 50.0), kappa=st.sampled_from([0.0, 0.3]))
def test_constructed_specs_respect_floor(seed, gain, kappa):
    spec = random_spec(8, kappa=kappa, seed=seed, gain=gain)
    ev = np.linalg.eigvalsh(hessian_free(spec, np.zeros(8)))
    assert ev[0] >= spec.lambda_floor * (1 - 1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_energy_gradient_consistency_property(seed):
    spec = random_spec(8, kappa=0.2, seed=seed % 50)
    x = np.random.default_rng(seed).standard_normal(8)
    d = np.random.default_rng(seed + 1).standard_normal(8)
    h = 1e-6
    slope = (energy(spec, x + h * d) - energy(spec, x - h * d)) / (2 * h)
    assert slope == pytest.approx(grad_x(spec, x) @ d, rel=1e-5, abs=1e-7)
