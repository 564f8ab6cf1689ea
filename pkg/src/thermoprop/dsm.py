"""Synthetic denoising-score-matching data.

Clean samples come from a zero-mean Gaussian whose covariance (low rank plus
diagonal) is fixed by ``data_cov_seed``.  Noise levels are log-uniform.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dynamics import free_phase
from .eqprop import ReadoutCost


@dataclass(frozen=True)
class DsmTask:
    data_dim: int
    data_cov_seed: int = 0
    sigma_range: tuple = (0.1, 1.0)
    batch: int = 16
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not (0 < lo <= hi):
            raise ValueError(f"invalid sigma_range {self.sigma_range}")
        if self.data_dim < 1 or self.batch < 1:
            raise ValueError("data_dim and batch must be positive")


def data_covariance(data_dim, seed, rank=None, floor=0.1):
    """``F F^T + floor I`` with ``F`` Gaussian of shape ``(d, rank)``; unit mean variance."""
    rank = rank or max(1, data_dim // 4)
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((data_dim, rank)) / np.sqrt(rank)
    cov = f @ f.T + floor * np.eye(data_dim)
    return cov / np.mean(np.diag(cov))


@dataclass(eq=False)
class DsmSample:
    y: np.ndarray
    sigma: float
    eps: np.ndarray
    y_tilde: np.ndarray
    target: np.ndarray


@dataclass(eq=False)
class DsmBatch:
    """Stacked samples; row ``i`` is one :class:`DsmSample`."""

    y: np.ndarray
    sigma: np.ndarray
    eps: np.ndarray
    y_tilde: np.ndarray
    target: np.ndarray

    def __len__(self):
        return len(self.sigma)

    def __iter__(self):
        for i in range(len(self)):
            yield DsmSample(self.y[i], float(self.sigma[i]), self.eps[i], self.y_tilde[i], self.target[i])

    def cost(self):
        return ReadoutCost.from_dsm(self.target, self.sigma)

    def subset(self, idx):
        return DsmBatch(*(a[idx] for a in (self.y, self.sigma, self.eps, self.y_tilde, self.target)))

    def to_csv(self, path):
        d = self.y.shape[1]
        header = ([f"y{i}" for i in range(d)] + ["sigma"] + [f"eps{i}" for i in range(d)]
                  + [f"y_tilde{i}" for i in range(d)] + [f"target{i}" for i in range(d)])
        rows = np.column_stack([self.y, self.sigma, self.eps, self.y_tilde, self.target])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) for v in r])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        arr = np.array([[float(v) for v in r] for r in rows[1:]])
        d = (arr.shape[1] - 1) // 4
        return cls(arr[:, :d], arr[:, d], arr[:, d + 1:2 * d + 1],
                   arr[:, 2 * d + 1:3 * d + 1], arr[:, 3 * d + 1:])


def make_batch(y, sigma, eps):
    """Assemble corrupted inputs and targets from clean data and noise.

    ``y`` is re-derived as ``target * sigma^2 + y_tilde`` so the reconstruction
    identity holds exactly in floating point (a change of at most an ulp).
    """
    y = np.asarray(y, float)
    sigma = np.asarray(sigma, float)
    eps = np.asarray(eps, float)
    s = sigma[:, None]
    y_tilde = y + s * eps
    target = (y - y_tilde) / s**2
    y = target * s**2 + y_tilde
    return DsmBatch(y, sigma, eps, y_tilde, target)


def sample_batch(task, zero_noise=False):
    rng = np.random.default_rng(task.rng_seed)
    cov = data_covariance(task.data_dim, task.data_cov_seed)
    chol = np.linalg.cholesky(cov)
    y = rng.standard_normal((task.batch, task.data_dim)) @ chol.T
    lo, hi = task.sigma_range
    sigma = np.exp(rng.uniform(np.log(lo), np.log(hi), task.batch)) if hi > lo else np.full(task.batch, float(lo))
    eps = rng.standard_normal((task.batch, task.data_dim))
    if zero_noise:
        eps = np.zeros_like(eps)
    return make_batch(y, sigma, eps)


def batch_loss(spec, batch, cfg):
    """Mean DSM loss of the free-phase readout over the batch."""
    eq = free_phase(spec, batch.y_tilde, batch.sigma, cfg)
    return float(np.mean(batch.cost().value(eq.output())))
