"""Readout cost, nudged phases and the EqProp gradient estimators."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import relax
from .substrate import grad_theta


@dataclass(frozen=True, eq=False)
class ReadoutCost:
    """``C(x_O) = (weight / 2) ||x_O - target||^2`` with ``weight = sigma^2``.

    ``target`` may be a batch ``(n, output_dim)`` with ``weight`` of shape ``(n,)``.
    """

    target: np.ndarray
    weight: np.ndarray

    @classmethod
    def from_dsm(cls, target, sigma):
        return cls(np.asarray(target, float), np.asarray(sigma, float) ** 2)

    def value(self, x_out):
        w = np.asarray(self.weight)
        return 0.5 * w * np.sum((x_out - self.target) ** 2, axis=-1)

    def grad(self, x_out):
        w = np.asarray(self.weight)[..., None]
        return w * (x_out - self.target)


@dataclass(eq=False)
class GradientEstimate:
    values: np.ndarray
    estimator_tag: str
    beta: float = 0.0
    per_sample: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError(f"{self.estimator_tag} gradient has non-finite entries")


def nudge_gradient(cost, x, beta, partition):
    """``beta * dC/dx`` embedded at output coordinates, zeros elsewhere."""
    g = np.zeros_like(x)
    osl = partition.output_slice
    g[..., osl] = beta * cost.grad(x[..., osl])
    return g


def nudged_phase(spec, cost, free_eq, beta, cfg):
    """Relax ``E + beta C`` warm-started from the free-phase state."""
    p = spec.partition
    return relax(
        spec,
        (free_eq.clamp_idx, free_eq.state[..., free_eq.clamp_idx]),
        free_eq.state,
        cfg,
        extra_grad=lambda z: nudge_gradient(cost, z, beta, p),
    )


def _phase_seed(cfg, tag):
    # independent noise per phase, reproducible from the base seed
    base = cfg.seed if isinstance(cfg.seed, (tuple, list)) else (cfg.seed,)
    return tuple(base) + (tag,)


def _check_beta(beta):
    if not (beta > 0 and math.isfinite(beta)):
        raise ValueError(f"beta must be a positive finite number, got {beta}")


def estimate_one_sided(spec, cost, free_eq, beta, cfg):
    """``(dE/dtheta(x_beta) - dE/dtheta(x_0)) / beta`` from readout states."""
    _check_beta(beta)
    nudged = nudged_phase(spec, cost, free_eq, beta, cfg.with_seed(_phase_seed(cfg, 1)))
    diff = (grad_theta(spec, nudged.readout_state) - grad_theta(spec, free_eq.readout_state)) / beta
    return _batch_estimate(diff, "one_sided", beta)


def estimate_symmetric(spec, cost, free_eq, beta, cfg):
    """``(dE/dtheta(x_{+beta}) - dE/dtheta(x_{-beta})) / (2 beta)``."""
    _check_beta(beta)
    plus = nudged_phase(spec, cost, free_eq, beta, cfg.with_seed(_phase_seed(cfg, 1)))
    minus = nudged_phase(spec, cost, free_eq, -beta, cfg.with_seed(_phase_seed(cfg, 2)))
    diff = (grad_theta(spec, plus.readout_state) - grad_theta(spec, minus.readout_state)) / (2 * beta)
    return _batch_estimate(diff, "symmetric", beta)


def _batch_estimate(diff, tag, beta):
    if diff.ndim == 1:
        return GradientEstimate(diff, tag, beta)
    flat = diff.reshape(-1, diff.shape[-1])
    return GradientEstimate(flat.mean(axis=0), tag, beta, per_sample=flat)


def local_coupling_update(x_a, x_b, coupling, beta):
    """Factor-level contrast for one coupling plane.

    Returns ``(dU, dV)`` with
    ``dU = [x_a^m (x_a^m'^T V) - x_b^m (x_b^m'^T V)] / beta`` and the mirror
    expression for ``dV``, averaged over any batch axis.  Only the two
    modules' blocks and this coupling's factors are read.  Pass ``2 * beta``
    for the symmetric (+beta, -beta) pair.
    """
    p = x_a.partition
    sm, smp = p.module_slice(coupling.source), p.module_slice(coupling.target)

    def contrast(xm_a, xmp_a, xm_b, xmp_b, factor):
        return (xm_a[..., :, None] * (xmp_a @ factor)[..., None, :]
                - xm_b[..., :, None] * (xmp_b @ factor)[..., None, :]) / beta

    a, b = x_a.readout_state, x_b.readout_state
    du = contrast(a[..., sm], a[..., smp], b[..., sm], b[..., smp], coupling.v)
    dv = contrast(a[..., smp], a[..., sm], b[..., smp], b[..., sm], coupling.u)
    lead = tuple(range(du.ndim - 2))
    return du.mean(axis=lead), dv.mean(axis=lead)


def optimal_beta_sym(c_v, m_norm, k2_sym, beta_phys, lambda_star, tau):
    """Bias-variance optimal nudge for the symmetric estimator.

    ``(c_v ||M||^2 / (k2_sym^2 beta_phys lambda_star^2 tau)) ** (1/6)``
    """
    args = dict(c_v=c_v, m_norm=m_norm, k2_sym=k2_sym, beta_phys=beta_phys,
                lambda_star=lambda_star, tau=tau)
    bad = [k for k, v in args.items() if not v > 0]
    if bad:
        raise ValueError(f"optimal_beta_sym needs positive inputs; got nonpositive {bad}")
    return (c_v * m_norm**2 / (k2_sym**2 * beta_phys * lambda_star**2 * tau)) ** (1.0 / 6.0)
