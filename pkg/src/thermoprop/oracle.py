"""Reference gradients of the readout loss and gradient-comparison metrics.

``oracle_implicit`` differentiates through the free-phase equilibrium with the
implicit function theorem; ``oracle_fd`` re-relaxes the substrate under
perturbed parameters.  The two share only the energy definition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .dynamics import free_phase
from .eqprop import GradientEstimate
from .substrate import get_theta, grad_theta_jvp, hessian_free, with_theta


class OracleError(RuntimeError):
    pass


def oracle_implicit(spec, cost, free_eq):
    """Exact ``d C(s_theta) / d theta`` at a converged free phase.

    Solves ``H z = b`` with ``b`` the cost gradient on the output block and
    returns ``-M z`` (``M`` the mixed theta/free-coordinate Hessian).
    """
    if not free_eq.converged:
        raise OracleError(
            f"free phase not converged (grad norm {free_eq.final_grad_norm:.3g}); "
            "the implicit oracle needs an exact equilibrium"
        )
    p = spec.partition
    x0 = np.atleast_2d(free_eq.state)
    target = np.atleast_2d(cost.target)
    weight = np.broadcast_to(np.asarray(cost.weight, float), x0.shape[:1])
    n_free = p.free_dim
    n_hidden = p.hidden_dim
    quadratic = not np.any(spec.base.quartic)
    factor = None
    z = np.zeros_like(x0)
    for i, x in enumerate(x0):
        if factor is None or not quadratic:
            try:
                factor = cho_factor(hessian_free(spec, x))
            except LinAlgError as exc:
                raise OracleError("free Hessian is not positive definite at the equilibrium") from exc
        b = np.zeros(n_free)
        b[n_hidden:] = weight[i] * (x[p.output_slice] - target[min(i, len(target) - 1)])
        z[i, p.free_slice] = cho_solve(factor, b)
    per = -grad_theta_jvp(spec, x0, z)
    return GradientEstimate(per.mean(axis=0), "oracle_implicit", 0.0, per_sample=per)


def readout_loss(spec, cost, y_tilde, sigma, cfg, warm_start=None):
    """Mean readout cost at the free-phase equilibrium."""
    eq = free_phase(spec, y_tilde, sigma, cfg, warm_start=warm_start)
    return float(np.mean(cost.value(eq.output()))), eq


def oracle_fd(spec, cost, y_tilde, sigma, cfg, fd_step=1e-5):
    """Central differences of the mean readout cost in every theta entry."""
    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    if not math.isinf(cfg.beta_phys):
        raise ValueError("the finite-difference oracle needs deterministic relaxation")
    theta = get_theta(spec)
    _, base_eq = readout_loss(spec, cost, y_tilde, sigma, cfg)
    grad = np.empty_like(theta)
    for j in range(theta.size):
        losses = []
        for sgn in (1.0, -1.0):
            th = theta.copy()
            th[j] += sgn * fd_step
            pert = with_theta(spec, th, check=False)
            loss, _ = readout_loss(pert, cost, y_tilde, sigma, cfg, warm_start=base_eq.state)
            losses.append(loss)
        grad[j] = (losses[0] - losses[1]) / (2 * fd_step)
    return GradientEstimate(grad, "oracle_fd", 0.0)


@dataclass(frozen=True)
class ComparisonReport:
    """Cosine similarity and relative L2 error of ``a`` against reference ``b``.

    ``cosine_similarity`` is ``None`` when either vector is zero.
    """

    cosine_similarity: float | None
    rel_l2_error: float
    blocks: dict

    def to_dict(self):
        return {"cosine_similarity": self.cosine_similarity, "rel_l2_error": self.rel_l2_error,
                "blocks": self.blocks}


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def rel_l2(a, b):
    nb = np.linalg.norm(b)
    diff = np.linalg.norm(a - b)
    if nb == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return float(diff / nb)


def compare(a, b, coupling_mask=None):
    """Compare two gradients in the same canonical order."""
    va = getattr(a, "values", a)
    vb = getattr(b, "values", b)
    va, vb = np.asarray(va, float), np.asarray(vb, float)
    if va.shape != vb.shape:
        raise ValueError(f"gradient shapes differ: {va.shape} vs {vb.shape}")
    blocks = {}
    if coupling_mask is not None:
        for name, m in (("coupling", coupling_mask), ("bias", ~coupling_mask)):
            if m.any():
                blocks[name] = {"cosine_similarity": cosine(va[m], vb[m]), "rel_l2_error": rel_l2(va[m], vb[m])}
    return ComparisonReport(cosine(va, vb), rel_l2(va, vb), blocks)
