"""Command line entry point: fit, simulate, mc, validate.

Exit codes: 0 success, 1 bad input (CSV validation, config, usage),
2 numerical failure (the message names the pipeline step where it arose).
Every run writes a flat key=value manifest with the resolved parameters,
the seed where randomness is involved, and the package version.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .config import _FIELD_TYPES, config_from_sources, config_to_pairs, parse_config_file
from .data import load_csv, write_csv
from .errors import ConfigError, DataError, NumericalError, SvcmError
from .harness import VARIANT_ORDER, mc_study, report, write_rep_csv
from .pipeline import efficient_fit, pointwise_ci_g, write_result_dir
from .simulate import SimConfig, simulate_dataset, write_truth_csv


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit 2; this tool reserves 2 for
    numerical failures, so usage errors are rerouted through ConfigError."""

    def error(self, message):
        raise ConfigError(message)


def _float_list(raw):
    try:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats: {raw!r}")


def _add_config_flags(sub):
    grp = sub.add_argument_group("pipeline configuration (override --config)")
    grp.add_argument("--config", metavar="FILE", help="flat key=value file")
    for key, typ in _FIELD_TYPES.items():
        flag = "--" + key.replace("_", "-")
        if typ is tuple:
            grp.add_argument(flag, dest=key, type=_float_list, default=None,
                             metavar="V1,V2,...")
        else:
            grp.add_argument(flag, dest=key, type=typ, default=None)


def _resolved_config(args):
    file_values = parse_config_file(args.config) if args.config else None
    flag_values = {k: getattr(args, k, None) for k in _FIELD_TYPES}
    return config_from_sources(file_values, flag_values)


def _write_manifest(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in pairs:
            fh.write(f"{k}={v}\n")


def _ensure_seed(seed):
    if seed is not None:
        return int(seed)
    return int(np.random.SeedSequence().generate_state(1, np.uint64)[0])


def _sim_config(args, seed):
    kwargs = dict(
        n=args.n, m0=args.m0, mr=args.mr, binom_p=args.binom_p, rho=args.rho,
        omega=args.omega, scenario=args.scenario, B=args.B, C=args.C,
        seed=seed,
    )
    if args.beta0 is not None:
        kwargs["beta0"] = args.beta0
    try:
        return SimConfig(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def _sim_manifest_pairs(sim):
    beta0 = ",".join(format(b, ".15g") for b in sim.beta0)
    return [
        ("n", str(sim.n)), ("m0", str(sim.m0)), ("mr", str(sim.mr)),
        ("binom_p", format(sim.binom_p, ".15g")),
        ("rho", format(sim.rho, ".15g")),
        ("omega", format(sim.omega, ".15g")),
        ("beta0", beta0), ("scenario", sim.scenario),
        ("B", format(sim.B, ".15g")), ("C", format(sim.C, ".15g")),
        ("seed", str(sim.seed)),
    ]


def _sig6(x):
    return format(float(x), ".6g")


def cmd_fit(args):
    dataset = load_csv(args.data_csv, add_intercept=args.add_intercept,
                       rescale_time=args.rescale_time)
    config = _resolved_config(args)
    result = efficient_fit(dataset, config)
    model = result.covariance_model
    bands = pointwise_ci_g(
        dataset,
        result.g_ll_updated,
        lambda ts: np.interp(ts, model.grid, model.variance),
        result.h1,
        level=config.ci_level,
    )
    extra = [
        ("command", "fit"), ("version", __version__),
        ("data_csv", args.data_csv),
        ("add_intercept", str(args.add_intercept).lower()),
        ("rescale_time", str(args.rescale_time).lower()),
        ("n_subjects", str(dataset.n)), ("n_obs", str(dataset.N1)),
    ]
    os.makedirs(args.out_dir, exist_ok=True)
    write_result_dir(result, args.out_dir, config=config, bands=bands,
                     extra_manifest=extra)
    print(f"{'variant':<12} {'coef':<6} {'estimate':>12} {'se':>12} {'wald':>10}")
    for name, beta, se in (("independent", result.beta_init, result.se_init),
                           ("efficient", result.beta_eff, result.se_eff)):
        for k in range(len(beta)):
            print(f"{name:<12} x{k + 1:<5} {_sig6(beta[k]):>12} "
                  f"{_sig6(se[k]):>12} {_sig6(beta[k] / se[k]):>10}")
    print(f"bandwidths: h1={_sig6(result.h1)} h2={_sig6(result.h2)} "
          f"h3={_sig6(result.h3)}")
    print(f"wrote {args.out_dir}")
    return 0


def cmd_simulate(args):
    seed = _ensure_seed(args.seed)
    sim = _sim_config(args, seed)
    dataset, truth = simulate_dataset(sim)
    os.makedirs(args.out_dir, exist_ok=True)
    write_csv(dataset, os.path.join(args.out_dir, "data.csv"))
    write_truth_csv(dataset, truth,
                    os.path.join(args.out_dir, "truth.csv"),
                    os.path.join(args.out_dir, "sigma_digest.csv"))
    pairs = [("command", "simulate"), ("version", __version__)]
    pairs += _sim_manifest_pairs(sim)
    _write_manifest(os.path.join(args.out_dir, "manifest.txt"), pairs)
    print(f"seed={seed}")
    print(f"wrote {args.out_dir} ({dataset.n} subjects, {dataset.N1} observations)")
    return 0


def cmd_mc(args):
    seed = _ensure_seed(args.seed)
    sim = _sim_config(args, seed)
    config = _resolved_config(args)
    if args.reps < 2:
        raise ConfigError("--reps must be >= 2")
    if not 0.0 < args.coverage_level < 1.0:
        raise ConfigError("--coverage-level must be in (0, 1)")
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    unknown = [v for v in variants if v not in VARIANT_ORDER]
    if unknown:
        raise ConfigError(
            f"unknown variants {unknown}; choose from {', '.join(VARIANT_ORDER)}"
        )
    summary = mc_study(
        sim, args.reps, variants, config,
        jobs=args.jobs, coverage_level=args.coverage_level,
        curves=args.curves, g_ci_at=args.g_ci_at,
        positive_lambda=args.positive_lambda, keep_reps=True,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "summary.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(report(summary, "csv"))
    md = report(summary, "markdown")
    with open(os.path.join(args.out_dir, "summary.md"), "w",
              encoding="utf-8") as fh:
        fh.write(md)
    write_rep_csv(summary, os.path.join(args.out_dir, "reps.csv"))
    pairs = [("command", "mc"), ("version", __version__)]
    pairs += _sim_manifest_pairs(sim)
    pairs += [
        ("reps", str(args.reps)), ("variants", ",".join(variants)),
        ("coverage_level", format(args.coverage_level, ".15g")),
        ("curves", str(args.curves).lower()),
        ("g_ci_at", "" if args.g_ci_at is None else format(args.g_ci_at, ".15g")),
        ("positive_lambda", format(args.positive_lambda, ".15g")),
        ("reps_done", str(summary.reps_done)),
        ("failures", str(summary.failures)),
    ]
    pairs += [("config_" + k, v) for k, v in config_to_pairs(config)]
    _write_manifest(os.path.join(args.out_dir, "manifest.txt"), pairs)
    print(f"seed={seed}")
    sys.stdout.write(md)
    if summary.failures:
        print(f"note: {summary.failures}/{args.reps} replications failed "
              "and were excluded")
    print(f"wrote {args.out_dir} ({summary.runtime:.1f}s)")
    return 0


def cmd_validate(args):
    dataset = load_csv(args.data_csv, add_intercept=args.add_intercept,
                       rescale_time=args.rescale_time)
    print(f"ok: {dataset.n} subjects, {dataset.N1} observations, "
          f"p={dataset.p}, q={dataset.q}")
    return 0


def build_parser():
    parser = _Parser(prog="svcm",
                     description="Semivarying coefficient models for "
                                 "longitudinal data: efficient GEE estimation")
    parser.add_argument("--version", action="version",
                        version=f"svcm {__version__}")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    p_fit = subs.add_parser("fit", help="fit one dataset, write result CSVs")
    p_fit.add_argument("data_csv")
    p_fit.add_argument("--out-dir", required=True)
    p_fit.add_argument("--add-intercept", action="store_true",
                       help="prepend a constant-1 column to z")
    p_fit.add_argument("--rescale-time", action="store_true",
                       help="map the observed time range onto [0,1]")
    _add_config_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_sim = subs.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--out-dir", required=True)
    _add_sim_flags(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_mc = subs.add_parser("mc", help="Monte Carlo study over simulated data")
    p_mc.add_argument("--out-dir", required=True)
    _add_sim_flags(p_mc)
    p_mc.add_argument("--reps", type=int, required=True)
    p_mc.add_argument("--variants", default="independent,efficient",
                      help=f"comma list from: {', '.join(VARIANT_ORDER)}")
    p_mc.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                      help="worker processes (default: available cores)")
    p_mc.add_argument("--coverage-level", type=float, default=0.95)
    p_mc.add_argument("--curves", action="store_true",
                      help="track integrated squared curve errors")
    p_mc.add_argument("--g-ci-at", type=float, default=None,
                      help="also track curve CI coverage at this time point")
    p_mc.add_argument("--positive-lambda", type=float, default=0.05,
                      help="eigenvalue cut for the positive variant")
    _add_config_flags(p_mc)
    p_mc.set_defaults(func=cmd_mc)

    p_val = subs.add_parser("validate", help="check a CSV against the schema")
    p_val.add_argument("data_csv")
    p_val.add_argument("--add-intercept", action="store_true")
    p_val.add_argument("--rescale-time", action="store_true")
    p_val.set_defaults(func=cmd_validate)
    return parser


def _add_sim_flags(sub):
    grp = sub.add_argument_group("simulation design")
    grp.add_argument("--n", type=int, required=True, help="number of subjects")
    grp.add_argument("--m0", type=int, default=6)
    grp.add_argument("--mr", type=int, default=6)
    grp.add_argument("--binom-p", type=float, default=0.65)
    grp.add_argument("--rho", type=float, default=0.4)
    grp.add_argument("--omega", type=float, default=4.95)
    grp.add_argument("--beta0", type=_float_list, default=None,
                     metavar="B1,B2,...")
    grp.add_argument("--scenario", choices=("bounded", "diverging"),
                     default="bounded")
    grp.add_argument("--B", type=float, default=1.5)
    grp.add_argument("--C", type=float, default=4.0)
    grp.add_argument("--seed", type=int, default=None,
                     help="omit to draw one (printed and stored)")


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigError, DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except SvcmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
