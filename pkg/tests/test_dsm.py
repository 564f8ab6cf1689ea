import numpy as np
import pytest

from _helpers import EXACT, PARTITIONS, random_spec
from thermoprop.dsm import DsmBatch, DsmTask, batch_loss, data_covariance, make_batch, sample_batch
from thermoprop.dynamics import free_phase
from thermoprop.oracle import oracle_implicit
from thermoprop.substrate import BaseEnergy, SubstrateSpec, get_theta, with_theta


def test_task_validation():
    with pytest.raises(ValueError):
        DsmTask(2, sigma_range=(0.5, 0.1))
    with pytest.raises(ValueError):
        DsmTask(0)


def test_reconstruction_identity_exact():
    b = sample_batch(DsmTask(4, batch=64, rng_seed=3))
    s = b.sigma[:, None]
    np.testing.assert_array_equal(b.target * s**2 + b.y_tilde, b.y)
    np.testing.assert_allclose(b.y_tilde, b.y + s * b.eps, atol=1e-14)


def test_fixed_sigma():
    b = sample_batch(DsmTask(3, sigma_range=(0.4, 0.4), batch=10))
    np.testing.assert_array_equal(b.sigma, 0.4)


def test_sigma_within_range():
    b = sample_batch(DsmTask(3, sigma_range=(0.1, 1.0), batch=500))
    assert b.sigma.min() >= 0.1 and b.sigma.max() <= 1.0


def test_zero_noise_gives_zero_target():
    b = sample_batch(DsmTask(3, batch=8), zero_noise=True)
    assert not np.any(b.target)
    np.testing.assert_array_equal(b.y_tilde, b.y)


def test_sample_covariance_matches():
    task = DsmTask(4, data_cov_seed=2, batch=100_000, rng_seed=1)
    b = sample_batch(task)
    cov = data_covariance(4, 2)
    emp = np.cov(b.y.T)
    assert np.max(np.abs(emp - cov)) <= 0.05 * np.max(np.abs(cov))


def test_covariance_normalized_spd():
    cov = data_covariance(16, 0)
    assert np.mean(np.diag(cov)) == pytest.approx(1.0)
    assert np.linalg.eigvalsh(cov)[0] > 0


def test_same_seed_same_batch():
    t = DsmTask(3, batch=5, rng_seed=9)
    np.testing.assert_array_equal(sample_batch(t).y_tilde, sample_batch(t).y_tilde)


def test_csv_round_trip(tmp_path):
    b = sample_batch(DsmTask(3, batch=6, rng_seed=2))
    b.to_csv(tmp_path / "b.csv")
    back = DsmBatch.from_csv(tmp_path / "b.csv")
    for name in ("y", "sigma", "eps", "y_tilde", "target"):
        np.testing.assert_array_equal(getattr(back, name), getattr(b, name))


def test_iteration_and_subset():
    b = sample_batch(DsmTask(2, batch=5))
    samples = list(b)
    assert len(samples) == 5 and samples[2].sigma == b.sigma[2]
    assert len(b.subset([0, 3])) == 2


def test_make_batch_target_formula():
    y = np.array([[1.0, -1.0]])
    b = make_batch(y, np.array([0.5]), np.array([[0.2, 0.4]]))
    np.testing.assert_allclose(b.target, [[-0.4, -0.8]])


def test_loss_with_zero_readout():
    p = PARTITIONS[8]
    spec = SubstrateSpec(p, BaseEnergy.uniform(8), ())
    b = sample_batch(DsmTask(2, batch=16, rng_seed=4))
    expected = np.mean(0.5 * b.sigma**2 * np.sum(b.target**2, axis=1))
    assert batch_loss(spec, b, EXACT) == pytest.approx(expected, rel=1e-12)


def test_loss_nonnegative_and_decreases_with_oracle_steps():
    spec = random_spec(8, seed=1)
    b = sample_batch(DsmTask(2, batch=16, rng_seed=5))
    theta = get_theta(spec)
    losses = []
    for _ in range(15):
        s = with_theta(spec, theta, check=False)
        eq = free_phase(s, b.y_tilde, b.sigma, EXACT)
        losses.append(float(np.mean(b.cost().value(eq.output()))))
        theta = theta - 0.05 * oracle_implicit(s, b.cost(), eq).values
    assert min(losses) >= 0
    assert np.all(np.diff(losses) < 0)
