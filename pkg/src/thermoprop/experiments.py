"""Experiment drivers: gradient agreement (E1), bias scaling (E2),
bias-variance sweep and training dynamics (E3).

Every driver takes a :class:`~thermoprop.config.RunConfig` and returns an
:class:`ExperimentResult` holding flat :class:`SweepRecord` rows, a summary
dict and plot series.  Results depend only on the config and its seeds.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dsm import sample_batch
from .dynamics import free_phase
from .eqprop import ReadoutCost, estimate_one_sided, estimate_symmetric, nudged_phase, optimal_beta_sym
from .oracle import compare, cosine, oracle_implicit
from .substrate import get_theta, grad_theta, hessian_free, mixed_second, with_theta

logger = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6


class FitError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepRecord:
    experiment_id: str
    beta: float
    seed: int
    metric_name: str
    metric_value: float
    config_hash: str
    step: int = -1

    def sort_key(self):
        return (self.experiment_id, self.beta, self.seed, self.step, self.metric_name)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float
    beta_range: tuple
    n_points: int

    def to_dict(self):
        return asdict(self)


@dataclass
class ExperimentResult:
    experiment_id: str
    config_hash: str
    records: list
    summary: dict
    plots: dict = field(default_factory=dict)

    def sorted_records(self):
        return sorted(self.records, key=SweepRecord.sort_key)


def fit_loglog(points, min_points=4):
    """Least-squares line through ``(log x, log y)``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise FitError("points must be (x, y) pairs")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise FitError("log-log fit needs finite positive x and y")
    if len(pts) < min_points:
        raise FitError(f"need at least {min_points} points, got {len(pts)}")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), float(min(max(r2, 0.0), 1.0)),
                    (float(pts[:, 0].min()), float(pts[:, 0].max())), len(pts))


def fit_valid(betas, values, min_points=4):
    """Fit over the finite positive entries only."""
    pts = [(b, v) for b, v in zip(betas, values) if v > 0 and math.isfinite(v)]
    return fit_loglog(pts, min_points)


def is_u_shaped(values, allowed_violations=1):
    """Decreasing up to the minimum, increasing after it, minimum strictly inside."""
    v = np.asarray(values, float)
    k = int(np.argmin(v))
    if k == 0 or k == len(v) - 1:
        return False
    bad = int(np.sum(np.diff(v[:k + 1]) > 0) + np.sum(np.diff(v[k:]) < 0))
    return bad <= allowed_violations


def _pmap(fn, items, jobs):
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _mean_std(vals):
    a = np.asarray([v for v in vals if v is not None], float)
    if a.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(a.mean()), "std": float(a.std()), "n": int(a.size)}


# -- E1 -----------------------------------------------------------------------

class _E1Seed:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, seed):
        cfg = self.cfg
        spec = cfg.spec()
        batch = sample_batch(cfg.task.task(seed))
        cost = batch.cost()
        mask = spec.coupling_mask()
        exact_eq = free_phase(spec, batch.y_tilde, batch.sigma, cfg.exact.relaxation())
        ref = oracle_implicit(spec, cost, exact_eq)
        dyn = cfg.dynamics.relaxation(seed)
        feq = free_phase(spec, batch.y_tilde, batch.sigma, dyn)
        beta = cfg.e1.beta
        one = compare(estimate_one_sided(spec, cost, feq, beta, dyn), ref, mask)
        sym = compare(estimate_symmetric(spec, cost, feq, beta, dyn), ref, mask)
        ex = cfg.exact.relaxation()
        cb = cfg.e1.consistency_beta
        one_x = compare(estimate_one_sided(spec, cost, exact_eq, cb, ex), ref, mask)
        sym_x = compare(estimate_symmetric(spec, cost, exact_eq, cb, ex), ref, mask)
        return {
            "cos_one_sided": one.cosine_similarity,
            "cos_symmetric": sym.cosine_similarity,
            "rel_l2_one_sided": one.rel_l2_error,
            "rel_l2_symmetric": sym.rel_l2_error,
            "cos_one_sided_coupling": one.blocks["coupling"]["cosine_similarity"],
            "cos_symmetric_coupling": sym.blocks["coupling"]["cosine_similarity"],
            "free_residual_grad_norm": feq.final_grad_norm,
            "cos_one_sided_exact": one_x.cosine_similarity,
            "cos_symmetric_exact": sym_x.cosine_similarity,
        }


def run_e1(cfg, jobs=1):
    """Cosine agreement of one-sided and symmetric EqProp with the implicit oracle.

    Estimators run under ``cfg.dynamics`` (the finite K-step budget in the
    paper-e1 preset); the oracle always comes from an exact-equilibrium side run
    on the same parameters and batch.  A consistency pass repeats both
    estimators at ``consistency_beta`` with exact equilibria.
    """
    h = cfg.config_hash()
    rows = _pmap(_E1Seed(cfg), cfg.seeds, jobs)
    records = []
    for seed, row in zip(cfg.seeds, rows):
        for name, val in row.items():
            beta = cfg.e1.consistency_beta if name.endswith("_exact") else cfg.e1.beta
            records.append(SweepRecord("e1", beta, seed, name, _num(val), h))
    summary = {
        "beta": cfg.e1.beta,
        "n_seeds": len(cfg.seeds),
        "one_sided": _mean_std(r["cos_one_sided"] for r in rows),
        "symmetric": _mean_std(r["cos_symmetric"] for r in rows),
        "exact_beta": cfg.e1.consistency_beta,
        "one_sided_exact": _mean_std(r["cos_one_sided_exact"] for r in rows),
        "symmetric_exact": _mean_std(r["cos_symmetric_exact"] for r in rows),
        "free_residual_grad_norm": _mean_std(r["free_residual_grad_norm"] for r in rows),
        "coupling_rescale": cfg.coupling_rescale(),
    }
    plots = {
        "cosine": {
            "kind": "scatter", "logx": False, "logy": False,
            "xlabel": "seed", "ylabel": "cosine vs oracle",
            "series": {
                "one-sided": [(s, r["cos_one_sided"]) for s, r in zip(cfg.seeds, rows)],
                "symmetric": [(s, r["cos_symmetric"]) for s, r in zip(cfg.seeds, rows)],
            },
        }
    }
    return ExperimentResult("e1", h, records, summary, plots)


def _num(v):
    return float("nan") if v is None else float(v)


# -- E2 -----------------------------------------------------------------------

class _E2Seed:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, seed):
        cfg = self.cfg
        spec = cfg.spec()
        batch = sample_batch(cfg.task.task(seed))
        cost = batch.cost()
        exact_eq = free_phase(spec, batch.y_tilde, batch.sigma, cfg.exact.relaxation())
        ref = oracle_implicit(spec, cost, exact_eq).values
        dyn = cfg.dynamics.relaxation(seed)
        feq = free_phase(spec, batch.y_tilde, batch.sigma, dyn) if not dyn.tol else exact_eq
        one, sym = [], []
        for beta in cfg.e2.betas.values():
            one.append(estimate_one_sided(spec, cost, feq, beta, dyn).values)
            sym.append(estimate_symmetric(spec, cost, feq, beta, dyn).values)
        return ref, np.array(one), np.array(sym)


def run_e2(cfg, jobs=1):
    """Bias of the seed-mean estimate against the oracle, and its log-log slope."""
    h = cfg.config_hash()
    betas = cfg.e2.betas.values()
    out = _pmap(_E2Seed(cfg), cfg.seeds, jobs)
    refs = np.array([o[0] for o in out])
    ests = {"one_sided": np.array([o[1] for o in out]), "symmetric": np.array([o[2] for o in out])}
    ref_mean = refs.mean(axis=0)
    records, summary, series = [], {"betas": betas.tolist(), "n_seeds": len(cfg.seeds)}, {}
    for name, arr in ests.items():
        bias = np.linalg.norm(arr.mean(axis=0) - ref_mean, axis=-1)
        for j, beta in enumerate(betas):
            records.append(SweepRecord("e2", float(beta), -1, f"bias_{name}", float(bias[j]), h))
            for i, seed in enumerate(cfg.seeds):
                records.append(SweepRecord("e2", float(beta), seed, f"cos_{name}",
                                           _num(cosine(arr[i, j], refs[i])), h))
        try:
            fit = fit_valid(betas, bias).to_dict()
        except FitError as exc:
            fit = {"error": str(exc)}
        summary[name] = {"fit": fit, "bias": bias.tolist(),
                         "rel_bias": (bias / np.linalg.norm(ref_mean)).tolist()}
        series[name] = list(zip(betas.tolist(), bias.tolist()))
    plots = {"bias": {"kind": "line", "logx": True, "logy": True, "xlabel": "beta",
                      "ylabel": "||E[g] - grad L||", "series": series}}
    return ExperimentResult("e2", h, records, summary, plots)


# -- E3: bias-variance sweep -------------------------------------------------

def run_e3_sweep(cfg, jobs=1):
    """Per-beta variance, bias and MSE of the symmetric estimator at finite temperature.

    One data batch (first seed) is replicated ``n_rep`` times with independent
    thermal noise.  The deterministic bias curve gives ``K2``; the variance
    curve gives the variance coefficient; together with the measured
    ``lambda_star`` and ``||M||`` they fix the predicted optimal nudge.
    """
    h = cfg.config_hash()
    e3 = cfg.e3
    spec = cfg.spec()
    seed = cfg.seeds[0]
    batch = sample_batch(cfg.task.task(seed))
    cost = batch.cost()
    exact_eq = free_phase(spec, batch.y_tilde, batch.sigma, cfg.exact.relaxation())
    ref = oracle_implicit(spec, cost, exact_eq).values
    betas = e3.betas.values()

    n = e3.n_rep
    y_rep = np.broadcast_to(batch.y_tilde, (n,) + batch.y_tilde.shape)
    s_rep = np.broadcast_to(batch.sigma, (n,) + batch.sigma.shape)
    cost_rep = ReadoutCost(np.broadcast_to(batch.target, (n,) + batch.target.shape),
                           np.broadcast_to(batch.sigma**2, (n,) + batch.sigma.shape))
    feq = free_phase(spec, y_rep, s_rep, e3.relaxation((e3.noise_seed, 0)))

    var, bias_mean, bias_det, mse = [], [], [], []
    for j, beta in enumerate(betas):
        plus = nudged_phase(spec, cost_rep, feq, beta, e3.relaxation((e3.noise_seed, j, 1)))
        minus = nudged_phase(spec, cost_rep, feq, -beta, e3.relaxation((e3.noise_seed, j, 2)))
        g = (grad_theta(spec, plus.readout_state) - grad_theta(spec, minus.readout_state)) / (2 * beta)
        g = g.mean(axis=1)  # batch mean per replica
        var.append(float(np.sum(np.var(g, axis=0, ddof=1))))
        bias_mean.append(float(np.linalg.norm(g.mean(axis=0) - ref)))
        mse.append(float(np.mean(np.sum((g - ref) ** 2, axis=1))))
        det = estimate_symmetric(spec, cost, exact_eq, beta, cfg.exact.relaxation()).values
        bias_det.append(float(np.linalg.norm(det - ref)))

    betas_l = betas.tolist()
    var_fit = fit_valid(betas, var)
    bias_fit = fit_valid(betas, bias_det)
    b = np.asarray(betas)
    v_coef = float(np.exp(np.mean(np.log(np.asarray(var) * b**2))))
    k2 = float(np.exp(np.mean(np.log(np.asarray(bias_det) / b**2))))
    lam_star = float(np.min([np.linalg.eigvalsh(hessian_free(spec, x))[0] for x in exact_eq.state]))
    m_norm = float(np.linalg.norm(np.mean([mixed_second(spec, x) for x in exact_eq.state], axis=0), 2))
    c_v = v_coef * e3.beta_phys * lam_star**2 * e3.tau / m_norm**2
    beta_pred = optimal_beta_sym(c_v, m_norm, k2, e3.beta_phys, lam_star, e3.tau)
    k_emp = int(np.argmin(mse))
    beta_emp = betas_l[k_emp]

    records = []
    for j, beta in enumerate(betas_l):
        for name, arr in (("variance", var), ("bias_mean", bias_mean), ("bias_det", bias_det), ("mse", mse)):
            records.append(SweepRecord("e3_sweep", beta, -1, name, arr[j], h))
    summary = {
        "betas": betas_l,
        "variance": var, "bias_mean": bias_mean, "bias_det": bias_det, "mse": mse,
        "variance_fit": var_fit.to_dict(),
        "bias_fit": bias_fit.to_dict(),
        "variance_coef": v_coef,
        "K2_sym": k2,
        "lambda_star": lam_star,
        "M_norm": m_norm,
        "C_V": c_v,
        "beta_phys": e3.beta_phys,
        "tau": e3.tau,
        "beta_dagger_pred": beta_pred,
        "beta_dagger_emp": beta_emp,
        "pred_over_emp": beta_pred / beta_emp,
        "mse_u_shaped": is_u_shaped(mse),
        "oracle_norm": float(np.linalg.norm(ref)),
    }
    plots = {
        "bias_variance": {"kind": "line", "logx": True, "logy": True, "xlabel": "beta", "ylabel": "value",
                          "series": {"variance": list(zip(betas_l, var)),
                                     "bias^2": list(zip(betas_l, (np.asarray(bias_det) ** 2).tolist())),
                                     "mse": list(zip(betas_l, mse))},
                          "vlines": {"beta_dagger_pred": beta_pred}},
    }
    return ExperimentResult("e3_sweep", h, records, summary, plots)


# -- E3: training dynamics ----------------------------------------------------

def _exact_loss_and_grad(spec, batch, cfg):
    eq = free_phase(spec, batch.y_tilde, batch.sigma, cfg.exact.relaxation())
    cost = batch.cost()
    loss = float(np.mean(cost.value(eq.output())))
    return loss, oracle_implicit(spec, cost, eq).values


def _exact_loss(spec, batch, cfg):
    eq = free_phase(spec, batch.y_tilde, batch.sigma, cfg.exact.relaxation())
    return float(np.mean(batch.cost().value(eq.output())))


def run_e3_training(cfg, jobs=1):
    """Symmetric-EqProp SGD next to oracle-gradient SGD on one data stream.

    Both runs start from the config's parameters and see identical batches
    and learning rate.  Per step: both training-batch losses (exact
    equilibria) and the cosine between the EqProp update and the oracle
    gradient at the EqProp iterate.  Every ``eval_every`` steps both
    parameter sets are scored on a fixed held-out batch.
    """
    h = cfg.config_hash()
    tr = cfg.train
    spec0 = cfg.spec()
    theta_e = get_theta(spec0)
    theta_o = theta_e.copy()
    eval_batch = sample_batch(replace(cfg.task.task(tr.data_seed - 1), batch=tr.eval_batch))
    dyn = cfg.dynamics

    rows = []
    for step in range(tr.steps + 1):
        se = with_theta(spec0, theta_e, check=False)
        so = with_theta(spec0, theta_o, check=False)
        row = {"step": step}
        if step % tr.eval_every == 0 or step == tr.steps:
            row["eval_loss_eqprop"] = _exact_loss(se, eval_batch, cfg)
            row["eval_loss_oracle"] = _exact_loss(so, eval_batch, cfg)
        if step == tr.steps:
            rows.append(row)
            break
        batch = sample_batch(cfg.task.task(tr.data_seed + step))
        cost = batch.cost()
        loss_e, grad_e = _exact_loss_and_grad(se, batch, cfg)
        loss_o, grad_o = _exact_loss_and_grad(so, batch, cfg)
        rdyn = dyn.relaxation((tr.data_seed, step))
        feq = free_phase(se, batch.y_tilde, batch.sigma, rdyn)
        upd = estimate_symmetric(se, cost, feq, tr.beta, rdyn).values
        row.update(loss_eqprop=loss_e, loss_oracle=loss_o, alignment=_num(cosine(upd, grad_e)))
        if max(loss_e, loss_o) > DIVERGENCE_LOSS or not np.isfinite([loss_e, loss_o]).all():
            raise TrainingDiverged(f"loss exceeded {DIVERGENCE_LOSS:g} at step {step}")
        rows.append(row)
        theta_e = theta_e - tr.lr * upd
        theta_o = theta_o - tr.lr * grad_o

    records = []
    for row in rows:
        for k, v in row.items():
            if k != "step":
                records.append(SweepRecord("e3_train", tr.beta, -1, k, float(v), h, step=row["step"]))
    align = np.array([r["alignment"] for r in rows if "alignment" in r])
    q = max(1, len(align) // 10)
    final = rows[-1]
    summary = {
        "steps": tr.steps,
        "lr": tr.lr,
        "beta": tr.beta,
        "alignment_first_decile": float(np.mean(align[:q])),
        "alignment_last_decile": float(np.mean(align[-q:])),
        "alignment_min": float(align.min()),
        "initial_eval_loss": rows[0]["eval_loss_oracle"],
        "final_eval_loss_eqprop": final["eval_loss_eqprop"],
        "final_eval_loss_oracle": final["eval_loss_oracle"],
        "final_rel_loss_gap": abs(final["eval_loss_eqprop"] - final["eval_loss_oracle"]) / final["eval_loss_oracle"],
    }
    ev = [r for r in rows if "eval_loss_eqprop" in r]
    plots = {
        "loss": {"kind": "line", "logx": False, "logy": False, "xlabel": "step", "ylabel": "held-out DSM loss",
                 "series": {"symmetric EqProp": [(r["step"], r["eval_loss_eqprop"]) for r in ev],
                            "oracle gradient": [(r["step"], r["eval_loss_oracle"]) for r in ev]}},
        "alignment": {"kind": "line", "logx": False, "logy": False, "xlabel": "step", "ylabel": "cosine",
                      "series": {"alignment": [(r["step"], r["alignment"]) for r in rows if "alignment" in r]}},
    }
    return ExperimentResult("e3_train", h, records, summary, plots)
