"""Energy per training step: analog symmetric EqProp vs digital backprop.

Analog: three equilibrations (free, +beta, -beta), each dissipating about
``kB_T / lambda_star`` per cell, so ``3 * n_cells * kB_T / lambda_star``.
Digital: ``n_mac * e_mac``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass

logger = logging.getLogger(__name__)

KB_T_300K = 4.14e-21
E_MAC = 1e-11
ADVANTAGE_BAND = (1e3, 1e4)


@dataclass(frozen=True)
class PhysicalParams:
    """Inputs of the cost model.  ``kB_T`` and ``e_mac`` in joules."""

    kB_T: float = KB_T_300K
    lambda_star: float = 0.1
    n_cells: float = 1e6
    c_init: float = 2.0
    n_mac: float = 1e10
    e_mac: float = E_MAC

    def __post_init__(self):
        for name in ("kB_T", "lambda_star", "n_cells", "c_init", "e_mac"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_mac < 0:
            raise ValueError("n_mac must be nonnegative")


PRESETS = {
    # effective per-cell energy scale of ~1 pJ (an RC node at ~1 V), not bare kT
    "representative": PhysicalParams(kB_T=1e-12, lambda_star=0.1, n_cells=1e6, n_mac=1e10),
    # the same sizes with physical kT at 300 K; lands far outside the band
    "thermal-limit": PhysicalParams(kB_T=KB_T_300K, lambda_star=0.1, n_cells=1e6, n_mac=1e10),
}


def coupling_macs(spec):
    """Multiply-accumulates of one forward+backward pass through the factors, per sample.

    Each coupling costs ``k (d_m + d_m')`` MACs to apply in both directions;
    forward, backward and the weight gradient triple it, and a factor 2
    counts multiply and add separately.
    """
    p = spec.partition
    per = sum(c.rank * (p.module_sizes[c.source] + p.module_sizes[c.target]) for c in spec.couplings)
    return 6 * per


def cell_equilibration_energy(p):
    """``(kB_T / (2 lambda_star)) * c_init`` for one cell and one equilibration."""
    return p.kB_T / (2 * p.lambda_star) * p.c_init


def analog_step_energy(p):
    return 3 * p.n_cells * p.kB_T / p.lambda_star


def digital_step_energy(p):
    if p.n_mac == 0:
        warnings.warn("n_mac = 0: digital step energy is zero", RuntimeWarning, stacklevel=2)
    return p.n_mac * p.e_mac


def advantage_ratio(p):
    """Return ``(analog / digital, digital / analog)``."""
    analog = analog_step_energy(p)
    digital = digital_step_energy(p)
    if digital == 0:
        return float("inf"), 0.0
    return analog / digital, digital / analog


def cost_report(p, band=ADVANTAGE_BAND):
    ratio, advantage = advantage_ratio(p)
    in_band = band[0] <= advantage <= band[1]
    if not in_band:
        logger.warning("advantage %.3g lies outside the projected band [%g, %g]", advantage, *band)
    return {
        "inputs": asdict(p),
        "units": {"energy": "J", "ratio": "dimensionless"},
        "cell_equilibration_energy_J": cell_equilibration_energy(p),
        "analog_step_energy_J": analog_step_energy(p),
        "digital_step_energy_J": digital_step_energy(p),
        "ratio_analog_over_digital": ratio,
        "advantage": advantage,
        "band": list(band),
        "in_band": in_band,
    }
