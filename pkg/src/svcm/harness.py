"""Monte Carlo study runner: bias, SEs, empirical SDs, coverage, MISE.

Each replication r simulates with a seed derived deterministically from
(base seed, r), runs the pipeline once, and extracts every requested
estimator variant from that single run (plus cheap refits for the oracle,
crude and positive variants). Replications are independent, so the study
parallelizes over reps with joblib; aggregation happens in rep order, which
makes summaries byte-identical across worker counts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.special import ndtri

from .config import with_overrides
from .errors import NumericalError, PipelineError
from .pipeline import (
    crude_variant,
    efficient_fit,
    oracle_variant,
    pointwise_ci_g,
    positive_variant,
)
from .simulate import simulate_dataset, with_seed

VARIANT_ORDER = ("independent", "efficient", "oracle", "crude", "positive",
                 "iterative")

CURVE_KINDS = ("ll_init", "ll_refined", "spline_init", "spline_refined")


def rep_seed(seed, r):
    """Deterministic 64-bit ladder, stable across platforms and versions."""
    return int(np.random.SeedSequence((int(seed), int(r))).generate_state(
        1, np.uint64)[0])


@dataclass
class McSummary:
    n: int
    rho: float
    reps_requested: int
    reps_done: int
    failures: int
    seed: int
    variants: tuple
    coverage_level: float
    stats: dict          # variant -> dict(bias, se_mean, sd_mc, coverage) arrays
    mise: dict           # curve kind -> float, or {} when curves were off
    g_point: dict        # optional curve-CI tracking at one t
    extras: dict         # iteration depth, iterate-vs-single-sweep gap
    runtime: float
    reps_raw: list | None = None   # per-rep outputs in rep order, when kept


def _mise(curve, g_true_fn, grid):
    diff = curve(grid) - g_true_fn(grid)
    return float(np.mean(np.trapezoid(diff**2, grid, axis=0)))


def _run_rep(r, sim, pipe_cfg, variants, coverage_level, curves, g_ci_at,
             positive_lambda, mise_grid_size):
    seed_r = rep_seed(sim.seed, r)
    dataset, truth = simulate_dataset(with_seed(sim, seed_r))
    want_iter = "iterative" in variants
    cfg = pipe_cfg if not want_iter else with_overrides(
        pipe_cfg, max_iter=max(pipe_cfg.max_iter, 8)
    )
    result = efficient_fit(dataset, cfg, keep_state=True)

    out = {"betas": {}, "ses": {}}
    out["betas"]["independent"] = result.beta_init
    out["ses"]["independent"] = result.se_init
    out["betas"]["efficient"] = result.beta_path[0]
    out["ses"]["efficient"] = result.se_path[0]
    if want_iter:
        out["betas"]["iterative"] = result.beta_path[-1]
        out["ses"]["iterative"] = result.se_path[-1]
        out["iter_sweeps"] = result.iterations
    if "oracle" in variants:
        b, s = oracle_variant(dataset, result.basis, truth.sigmas,
                              designs=result.state["designs"])
        out["betas"]["oracle"], out["ses"]["oracle"] = b, s
    if "crude" in variants:
        b, s = crude_variant(dataset, cfg, result)
        out["betas"]["crude"], out["ses"]["crude"] = b, s
    if "positive" in variants:
        b, s = positive_variant(dataset, cfg, result, lambda_l=positive_lambda)
        out["betas"]["positive"], out["ses"]["positive"] = b, s

    if curves:
        grid = np.linspace(0.0, 1.0, mise_grid_size)
        g0 = sim.g
        out["mise"] = {
            "ll_init": _mise(result.g_ll_init, g0, grid),
            "ll_refined": _mise(result.g_ll_updated, g0, grid),
            "spline_init": _mise(result.g_spline_init, g0, grid),
            "spline_refined": _mise(result.g_spline_updated, g0, grid),
        }
    if g_ci_at is not None:
        t0 = float(g_ci_at)
        bands = pointwise_ci_g(
            dataset,
            result.g_ll_updated,
            lambda ts: np.interp(ts, result.covariance_model.grid,
                                 result.covariance_model.variance),
            result.h1,
            level=coverage_level,
        )
        idx = int(np.argmin(np.abs(bands.grid - t0)))
        est = result.g_ll_updated.values[idx]
        hw = bands.half_widths[idx]
        truth_g = sim.g(bands.grid[idx])
        out["g_cover"] = (np.abs(est - truth_g) <= hw).astype(float)
    return out


def mc_study(sim, reps, variants, config, *, jobs=1, coverage_level=0.95,
             curves=False, g_ci_at=None, positive_lambda=0.05,
             mise_grid_size=201, keep_reps=False):
    """Run the Monte Carlo study and aggregate the per-variant statistics."""
    if reps < 2:
        raise ValueError("reps must be >= 2")
    variants = tuple(v for v in VARIANT_ORDER if v in set(variants))
    if not variants:
        raise ValueError("no known variants requested")
    t0 = time.perf_counter()
    worker = delayed(_guarded_rep)
    raw = Parallel(n_jobs=jobs)(
        worker(r, sim, config, variants, coverage_level, curves, g_ci_at,
               positive_lambda, mise_grid_size)
        for r in range(reps)
    )
    oks = [r for r in raw if not isinstance(r, str)]
    failures = reps - len(oks)
    if failures > 0.2 * reps:
        msgs = [r for r in raw if isinstance(r, str)][:3]
        raise NumericalError(
            f"{failures}/{reps} replications failed; first causes: {msgs}"
        )

    beta0 = np.asarray(sim.beta0, dtype=float)
    z = ndtri(0.5 * (1.0 + coverage_level))
    stats = {}
    for v in variants:
        B = np.vstack([o["betas"][v] for o in oks])
        S = np.vstack([o["ses"][v] for o in oks])
        cover = (np.abs(B - beta0[None, :]) <= z * S).mean(axis=0)
        stats[v] = {
            "bias": B.mean(axis=0) - beta0,
            "se_mean": S.mean(axis=0),
            "sd_mc": B.std(axis=0, ddof=1),
            "coverage": cover,
        }
    mise = {}
    if curves:
        for kind in CURVE_KINDS:
            mise[kind] = float(np.mean([o["mise"][kind] for o in oks]))
    g_point = {}
    if g_ci_at is not None:
        g_point = {
            "t": float(g_ci_at),
            "coverage": np.vstack([o["g_cover"] for o in oks]).mean(axis=0),
        }
    extras = {}
    if "iterative" in variants:
        extras["iter_sweeps_mean"] = float(
            np.mean([o["iter_sweeps"] for o in oks])
        )
        # per-rep gap between iterated and single-pass beta, for stability checks
        gaps = [
            np.abs(o["betas"]["iterative"] - o["betas"]["efficient"]).max()
            for o in oks
        ]
        extras["iter_gap_median"] = float(np.median(gaps))
    summary = McSummary(
        n=sim.n,
        rho=sim.rho,
        reps_requested=reps,
        reps_done=len(oks),
        failures=failures,
        seed=sim.seed,
        variants=variants,
        coverage_level=coverage_level,
        stats=stats,
        mise=mise,
        g_point=g_point,
        extras=extras,
        runtime=time.perf_counter() - t0,
        reps_raw=list(raw) if keep_reps else None,
    )
    return summary


def _guarded_rep(r, *args):
    try:
        return _run_rep(r, *args)
    except (NumericalError, PipelineError) as e:
        return f"rep {r}: {e}"


# ---------------------------------------------------------------------------
# rendering


def _sig6(x):
    return format(float(x), ".6g")


def report(summary, fmt="csv"):
    """Render the per-coefficient variant table (csv or markdown)."""
    p = len(next(iter(summary.stats.values()))["bias"])
    header = ["n", "rho", "coefficient", "variant", "bias", "se_mean",
              "sd_mc", "coverage"]
    rows = []
    for k in range(p):
        for v in summary.variants:
            st = summary.stats[v]
            rows.append(
                [
                    str(summary.n),
                    _sig6(summary.rho),
                    f"beta{k + 1}",
                    v,
                    _sig6(st["bias"][k]),
                    _sig6(st["se_mean"][k]),
                    _sig6(st["sd_mc"][k]),
                    _sig6(st["coverage"][k]),
                ]
            )
    for kind in CURVE_KINDS:
        if kind in summary.mise:
            rows.append(
                [str(summary.n), _sig6(summary.rho), f"mise_{kind}", "curves",
                 _sig6(summary.mise[kind]), "", "", ""]
            )
    if fmt == "csv":
        lines = [",".join(header)] + [",".join(r) for r in rows]
        return "\n".join(lines) + "\n"
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |",
                 "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def write_rep_csv(summary, path):
    """Raw per-rep audit trail (full precision), from keep_reps=True runs."""
    if summary.reps_raw is None:
        raise ValueError("summary was built without keep_reps=True")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rep,variant,coefficient,estimate,se\n")
        for rep_idx, out in enumerate(summary.reps_raw):
            if isinstance(out, str):
                fh.write(f"{rep_idx},FAILED,,,\n")
                continue
            for v in (w for w in VARIANT_ORDER if w in out["betas"]):
                b, s = out["betas"][v], out["ses"][v]
                for k in range(len(b)):
                    fh.write(
                        f"{rep_idx},{v},beta{k + 1},"
                        f"{format(b[k], '.15g')},{format(s[k], '.15g')}\n"
                    )
