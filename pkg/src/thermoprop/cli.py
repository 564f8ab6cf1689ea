"""Command-line front end.

Every subcommand takes ``--preset NAME`` or ``--config FILE`` and optional
``--set key=value`` overrides (dotted keys, JSON values).  Outputs go to
``OUT/<experiment>/<config-hash>/``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from . import costs as costs_mod
from . import experiments as ex
from .config import PRESET_NAMES, ConfigError, _preset_dicts, apply_seed_override, config_from_dict
from .dynamics import RelaxationError
from .oracle import OracleError
from .report import dumps, format_summary, write_result
from .substrate import StiffnessError, SubstrateError, origin_spectrum, spec_from_dict

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

NUMERICAL_ERRORS = (RelaxationError, OracleError, ex.FitError, ex.TrainingDiverged, FloatingPointError)

log = logging.getLogger("thermoprop")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _raw_config(args):
    if args.config:
        try:
            with open(args.config) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    else:
        dicts = _preset_dicts()
        if args.preset not in dicts:
            raise ConfigError(f"unknown preset '{args.preset}'; choose from {', '.join(PRESET_NAMES)}")
        d = dicts[args.preset]
    d = copy.deepcopy(d)
    for item in args.set or []:
        _apply_override(d, item)
    return d


def _apply_override(d, item):
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not key=value")
    key, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override '{key}': '{p}' is not a section")
    node[parts[-1]] = val


def _load(args):
    cfg = config_from_dict(_raw_config(args))
    return apply_seed_override(cfg)


def _emit(result, cfg, args):
    path = write_result(result, args.out, config=cfg.to_dict(), plots=not args.no_plots)
    print("\n".join(format_summary(f"{result.experiment_id} [{result.config_hash}]", result.summary)))
    print(f"wrote {path}")


def cmd_e1(args):
    cfg = _load(args)
    res = ex.run_e1(cfg, jobs=args.jobs)
    if args.trajectory:
        _dump_trajectory(cfg, args.trajectory)
    _emit(res, cfg, args)


def _dump_trajectory(cfg, path):
    from dataclasses import replace

    from .dsm import sample_batch
    from .dynamics import free_phase

    seed = cfg.seeds[0]
    batch = sample_batch(cfg.task.task(seed))
    relax_cfg = replace(cfg.dynamics.relaxation(seed), record=True)
    eq = free_phase(cfg.spec(), batch.y_tilde, batch.sigma, relax_cfg)
    eq.dump_trajectory(path)


def cmd_e2(args):
    cfg = _load(args)
    res = ex.run_e2(cfg, jobs=args.jobs)
    if args.estimator != "both":
        keep = args.estimator
        drop = "symmetric" if keep == "one_sided" else "one_sided"
        res.summary.pop(drop, None)
        res.records = [r for r in res.records if not r.metric_name.endswith(drop)]
        for p in res.plots.values():
            p["series"].pop(drop, None)
    _emit(res, cfg, args)


def cmd_e3(args):
    cfg = _load(args)
    _emit(ex.run_e3_sweep(cfg, jobs=args.jobs), cfg, args)


def cmd_train(args):
    cfg = _load(args)
    _emit(ex.run_e3_training(cfg, jobs=args.jobs), cfg, args)


def cmd_costs(args):
    params = costs_mod.PRESETS[args.preset]
    over = {k: getattr(args, k) for k in ("kB_T", "lambda_star", "n_cells", "n_mac", "e_mac")
            if getattr(args, k) is not None}
    if over:
        from dataclasses import replace
        try:
            params = replace(params, **over)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    report = costs_mod.cost_report(params)
    report["preset"] = args.preset
    text = dumps(report)
    out_dir = os.path.join(args.out, "costs")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{args.preset}.json")
    with open(path, "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    if not report["in_band"]:
        print(f"note: advantage {report['advantage']:.3g} is outside the projected band", file=sys.stderr)


def cmd_validate(args):
    d = _raw_config(args)
    sub = d.get("substrate", d)
    try:
        spec, scale = spec_from_dict(sub)
    except StiffnessError as exc:
        print(f"invalid substrate: {exc}", file=sys.stderr)
        print(dumps({"valid": False, **exc.report()}), end="")
        return EXIT_CONFIG
    except SubstrateError as exc:
        raise ConfigError(f"substrate: {exc}") from exc
    if "substrate" in d:
        cfg = apply_seed_override(config_from_dict(d))
        extra = {"config_hash": cfg.config_hash(), "seeds": list(cfg.seeds)}
    else:
        extra = {}
    ev = origin_spectrum(spec)
    print(dumps({
        "valid": True,
        "dim": spec.dim,
        "free_dim": spec.partition.free_dim,
        "n_params": spec.n_params,
        "n_couplings": len(spec.couplings),
        "lambda_floor": spec.lambda_floor,
        "lambda_min": float(np.min(ev)),
        "lambda_max": float(np.max(ev)),
        "coupling_rescale": scale,
        **extra,
    }), end="")
    return EXIT_OK


def _add_common(p, experiment=True):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", default="desk-small", choices=PRESET_NAMES,
                     help="shipped configuration: paper-e1 (finite K=300 step budget of the reference "
                          "experiments), paper-exact (tight-tolerance equilibria for the scaling laws), "
                          "desk-small (D=16 fast preset), desk-tiny (D=8 bias-variance preset)")
    src.add_argument("--config", metavar="FILE", help="JSON run configuration (strict schema)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set e1.beta=0.02 (repeatable)")
    if experiment:
        p.add_argument("--out", default="runs", help="output root directory (default: runs)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes across seeds (default: 1)")
        p.add_argument("--no-plots", action="store_true", help="skip SVG output")


def build_parser():
    ap = _Parser(prog="thermoprop", description=__doc__.split("\n\n")[0],
                 epilog="Set THERMOPROP_SEED=N to shift the seed list to start at N.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("e1", help="gradient agreement of one-sided and symmetric EqProp with the exact gradient",
                       description="Cosine similarity of the one-sided and symmetric estimators with the "
                                   "implicit-differentiation gradient at nudge e1.beta, per seed, under the "
                                   "configured finite relaxation budget.  A consistency pass repeats both at "
                                   "e1.consistency_beta with exact equilibria.")
    _add_common(p)
    p.add_argument("--trajectory", metavar="CSV",
                   help="also dump the free-phase relaxation trajectory (first seed) to this CSV")
    p.set_defaults(func=cmd_e1)

    p = sub.add_parser("e2", help="bias scaling in beta (one-sided ~ beta, symmetric ~ beta^2)",
                       description="Bias of the seed-averaged estimate versus the exact gradient over the "
                                   "e2.betas grid, with log-log slopes.  The nudge-expansion predicts slope 1 "
                                   "for the one-sided and 2 for the symmetric estimator.")
    _add_common(p)
    p.add_argument("--estimator", choices=("one_sided", "symmetric", "both"), default="both",
                   help="which estimator to report (default: both)")
    p.set_defaults(func=cmd_e2)

    p = sub.add_parser("e3", help="bias-variance sweep and predicted optimal nudge",
                       description="Finite-temperature sweep of the symmetric estimator over e3.betas: "
                                   "thermal variance (~ 1/beta^2), squared bias (~ beta^4), their sum, and the "
                                   "predicted minimiser beta_dagger = (C_V ||M||^2 / (K2^2 beta_phys "
                                   "lambda_star^2 tau))^(1/6) against the empirical one.")
    _add_common(p)
    p.set_defaults(func=cmd_e3)

    p = sub.add_parser("train", help="denoising score-matching training, EqProp vs exact gradient",
                       description="SGD on the denoising score-matching loss with symmetric EqProp and with "
                                   "the exact gradient from the same start; logs losses and per-step gradient "
                                   "alignment.")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("costs", help="energy per training step, analog vs digital",
                       description="Analog cost 3 N kT / lambda_star (three equilibrations at the "
                                   "thermal-limit dissipation per cell) against digital N_mac e_mac.  "
                                   "The representative preset lands inside the projected 1e3-1e4 band.")
    p.add_argument("--preset", default="representative", choices=sorted(costs_mod.PRESETS),
                   help="parameter set (default: representative)")
    p.add_argument("--kB-T", dest="kB_T", type=float, help="per-cell energy scale kT in joules")
    p.add_argument("--lambda-star", dest="lambda_star", type=float, help="slowest relaxation rate")
    p.add_argument("--n-cells", dest="n_cells", type=float, help="number of analog cells N")
    p.add_argument("--n-mac", dest="n_mac", type=float, help="digital multiply-accumulates per step")
    p.add_argument("--e-mac", dest="e_mac", type=float, help="energy per MAC in joules")
    p.add_argument("--out", default="runs", help="output root directory (default: runs)")
    p.set_defaults(func=cmd_costs)

    p = sub.add_parser("validate", help="check a configuration and the substrate stiffness floor",
                       description="Parse a configuration strictly and report the free-Hessian spectrum at "
                                   "the clamped origin.  Exits 2 with the eigenvalue report when lambda_min "
                                   "falls below lambda_floor.  A bare substrate object is also accepted.")
    _add_common(p, experiment=False)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        ap.error("--jobs must be at least 1")
    try:
        code = args.func(args)
    except (ConfigError, SubstrateError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
