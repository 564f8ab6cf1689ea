"""Clamped relaxation of the substrate by explicit Euler-Maruyama.

Each step updates the free coordinates only:

    x <- x - dt * (grad E(x) + extra_grad(x)) + sqrt(2 dt / beta_phys) * xi

``beta_phys = inf`` gives plain gradient descent.  Clamped coordinates are
never written, so they stay bit-identical to their clamp values.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .substrate import SubstrateError, energy, grad_x, hessian_free

DIVERGENCE_NORM = 1e6
CHECK_EVERY = 25


class RelaxationError(RuntimeError):
    """Relaxation diverged or produced non-finite values."""


@dataclass(frozen=True)
class RelaxationConfig:
    """Integrator settings.

    ``step_size=None`` picks ``step_scale / lambda_max`` at the start point.
    ``tol=0`` disables early stopping (fixed budget of ``max_steps``).
    ``tau`` is the readout window in time units; ``0`` reads the last state.
    """

    step_size: float | None = None
    max_steps: int = 300
    beta_phys: float = math.inf
    tol: float = 0.0
    tau: float = 0.0
    seed: object = 0
    step_scale: float = 0.1
    record: bool = False

    def __post_init__(self):
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.beta_phys <= 0:
            raise ValueError("beta_phys must be positive")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")

    @property
    def deterministic(self):
        return math.isinf(self.beta_phys)

    def with_seed(self, seed):
        return replace(self, seed=seed)


@dataclass(eq=False)
class EquilibriumResult:
    state: np.ndarray
    time_avg_state: np.ndarray
    final_grad_norm: float
    steps_used: int
    converged: bool
    step_size: float
    clamp_idx: np.ndarray
    partition: object = None
    trajectory: list = field(default_factory=list)

    @property
    def readout_state(self):
        """State the estimators read: the time average (equal to state when tau=0)."""
        return self.time_avg_state

    def output(self):
        return self.state[..., self.partition.output_slice]

    def dump_trajectory(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "energy", "grad_norm"])
            w.writerows(self.trajectory)


def lambda_max_estimate(spec, x, iters=100, seed=0):
    """Largest free-Hessian eigenvalue at ``x`` by power iteration."""
    h = hessian_free(spec, x)
    v = np.random.default_rng(seed).standard_normal(h.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = h @ v
        lam_new = float(np.linalg.norm(w))
        if lam_new == 0.0:
            return 0.0
        v = w / lam_new
        if abs(lam_new - lam) <= 1e-10 * lam_new:
            lam = lam_new
            break
        lam = lam_new
    return float(v @ h @ v)


def _max_norm(g):
    return float(np.sqrt(np.max(np.einsum("...i,...i->...", g, g))))


def _check_finite(x, g, steps, dt, lam_max):
    if not np.all(np.isfinite(g)):
        raise RelaxationError(f"non-finite gradient at step {steps}")
    if np.max(np.linalg.norm(x, axis=-1)) > DIVERGENCE_NORM:
        raise RelaxationError(
            f"state norm exceeded {DIVERGENCE_NORM:g} at step {steps}; "
            f"step_size={dt:.4g} vs stability bound 2/lambda_max={2.0 / lam_max:.4g}"
        )


def relax(spec, clamp, init, cfg, extra_grad=None):
    """Relax from ``init`` with ``clamp = (indices, values)`` held fixed.

    ``init`` may be a single state or a batch ``(n, D)``; clamp values
    broadcast against it.  ``extra_grad(x)`` returns a full-length gradient
    added to the energy gradient (the nudge).
    """
    idx, vals = clamp
    idx = np.asarray(idx, dtype=int)
    p = spec.partition
    if np.any(idx >= p.input_dim) or np.any(idx < 0):
        raise SubstrateError("clamp indices must lie in the input block")
    x = np.array(init, dtype=float)
    if x.shape[-1] != spec.dim:
        raise SubstrateError(f"init has length {x.shape[-1]}, expected D={spec.dim}")
    x[..., idx] = vals
    if np.array_equal(idx, np.arange(idx.size)):
        free = slice(idx.size, spec.dim)
    else:
        free = np.ones(spec.dim, bool)
        free[idx] = False

    flat = x.reshape(-1, spec.dim)
    probe = flat[np.argmax(np.linalg.norm(flat, axis=1))]
    lam_max = lambda_max_estimate(spec, probe)
    dt = cfg.step_size if cfg.step_size is not None else cfg.step_scale / lam_max
    if dt >= 2.0 / lam_max:
        raise RelaxationError(
            f"step_size={dt:.4g} violates the stability bound 2/lambda_max={2.0 / lam_max:.4g}"
        )

    rng = None if cfg.deterministic else np.random.default_rng(cfg.seed)
    amp = 0.0 if cfg.deterministic else math.sqrt(2.0 * dt / cfg.beta_phys)
    n_free = spec.dim - np.unique(idx).size
    noise_shape = x.shape[:-1] + (n_free,)

    n_avg = min(math.ceil(cfg.tau / dt), cfg.max_steps) if cfg.tau > 0 else 0
    acc = np.zeros_like(x) if n_avg else None
    early_stop = cfg.tol > 0 and n_avg == 0

    def total_grad(z):
        g = grad_x(spec, z)
        if extra_grad is not None:
            g = g + extra_grad(z)
        return g[..., free]

    traj = []
    g = total_grad(x)
    gnorm = _max_norm(g)
    steps = 0
    if cfg.record:
        traj.append((0, float(np.mean(energy(spec, x))), gnorm))
    if not (early_stop and gnorm <= cfg.tol):
        for steps in range(1, cfg.max_steps + 1):
            upd = x[..., free] - dt * g
            if rng is not None:
                upd += amp * rng.standard_normal(noise_shape)
            x[..., free] = upd
            if n_avg and steps > cfg.max_steps - n_avg:
                acc += x
            g = total_grad(x)
            last = steps == cfg.max_steps
            periodic = last or steps % CHECK_EVERY == 0
            if early_stop or cfg.record or periodic:
                gnorm = _max_norm(g)
                if periodic or not math.isfinite(gnorm):
                    _check_finite(x, g, steps, dt, lam_max)
            if cfg.record:
                traj.append((steps, float(np.mean(energy(spec, x))), gnorm))
            if early_stop and gnorm <= cfg.tol:
                break

    avg = acc / n_avg if n_avg else x.copy()
    if n_avg:
        avg[..., idx] = x[..., idx]
    return EquilibriumResult(
        state=x,
        time_avg_state=avg,
        final_grad_norm=gnorm,
        steps_used=steps,
        converged=bool(cfg.tol > 0 and gnorm <= cfg.tol),
        step_size=dt,
        clamp_idx=idx,
        partition=p,
        trajectory=traj,
    )


def input_clamp(spec, y_tilde, sigma):
    """Clamp indices and values for a (batch of) corrupted inputs.

    ``y_tilde`` of length ``input_dim`` fills the input block directly;
    length ``input_dim - 1`` leaves the last input coordinate to carry
    ``log(sigma)``.
    """
    p = spec.partition
    y = np.asarray(y_tilde, dtype=float)
    n_data = y.shape[-1]
    if n_data == p.input_dim:
        vals = y
    elif n_data == p.input_dim - 1:
        s = np.broadcast_to(np.log(np.asarray(sigma, dtype=float)), y.shape[:-1])
        vals = np.concatenate([y, s[..., None]], axis=-1)
    else:
        raise SubstrateError(
            f"y_tilde has length {n_data}; input block takes {p.input_dim} (or {p.input_dim - 1} plus log sigma)"
        )
    return np.arange(p.input_dim), vals


def free_phase(spec, y_tilde, sigma, cfg, warm_start=None):
    """Free-phase equilibrium with the input block clamped; cold start at zero."""
    idx, vals = input_clamp(spec, y_tilde, sigma)
    if warm_start is None:
        init = np.zeros(vals.shape[:-1] + (spec.dim,))
    else:
        init = np.array(warm_start, dtype=float)
    return relax(spec, (idx, vals), init, cfg)
