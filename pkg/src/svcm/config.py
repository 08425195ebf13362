"""Pipeline configuration and the flat key=value config-file format."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the seven-step efficient estimation pipeline.

    h1/h2 fixed at a positive value disables cross-validation for that
    smoother; None means select by leave-one-subject-out CV over h1_grid /
    h2_grid (or an automatic geometric grid when the grid is None too).
    h3 = h3_mult * h1 unless fixed explicitly.
    """

    spline_degree: int = 3
    kn: int | None = None          # explicit spline dimension
    ck: float = 2.0                # K_n = floor(ck * n^(1/5)) when kn is None
    h1: float | None = None
    h2: float | None = None
    h3: float | None = None
    h3_mult: float = 2.0
    h1_grid: tuple | None = None
    h2_grid: tuple | None = None
    cv_grid_size: int = 10
    lambda_l: float = 0.0
    cov_grid_size: int = 101
    ridge_eps: float = 1e-10
    pd_floor: float = 1e-8
    max_iter: int = 1
    iter_tol: float = 1e-6
    eval_grid_size: int = 201
    ci_level: float = 0.95

    def __post_init__(self):
        if self.spline_degree < 1:
            raise ConfigError("spline_degree must be >= 1")
        if self.kn is not None and self.kn < self.spline_degree + 1:
            raise ConfigError("kn must be >= spline_degree + 1")
        for name in ("ck", "h3_mult", "ridge_eps", "pd_floor", "iter_tol"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("h1", "h2", "h3"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"{name} must be positive when fixed")
        if self.lambda_l < 0:
            raise ConfigError("lambda_l must be >= 0")
        if self.cov_grid_size < 11:
            raise ConfigError("cov_grid_size must be >= 11")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.cv_grid_size < 1 or self.eval_grid_size < 2:
            raise ConfigError("grid sizes too small")
        if not 0.0 < self.ci_level < 1.0:
            raise ConfigError("ci_level must be in (0,1)")

    def resolve_kn(self, n):
        if self.kn is not None:
            return self.kn
        kn = int(np.floor(self.ck * n ** 0.2))
        # never below the minimum usable dimension for the chosen degree
        return max(kn, self.spline_degree + 1)


_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def _coerce(name, raw, typ):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    try:
        if typ is bool:
            return _BOOL_WORDS[raw.lower()]
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except (ValueError, KeyError):
        raise ConfigError(f"cannot parse {name}={raw!r}") from None


_FIELD_TYPES = {
    "spline_degree": int, "kn": int, "ck": float,
    "h1": float, "h2": float, "h3": float, "h3_mult": float,
    "h1_grid": tuple, "h2_grid": tuple, "cv_grid_size": int,
    "lambda_l": float, "cov_grid_size": int, "ridge_eps": float,
    "pd_floor": float, "max_iter": int, "iter_tol": float,
    "eval_grid_size": int, "ci_level": float,
}


def parse_config_file(path):
    """Read a flat key=value file into a dict of raw string values.

    '#' starts a comment; blank lines are skipped; unknown keys are fatal.
    """
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value.strip()
    return out


def config_from_sources(file_values=None, flag_values=None):
    """Build a PipelineConfig from config-file values overridden by flags.

    file_values holds raw strings (from parse_config_file); flag_values holds
    already-typed values (argparse output), with None meaning 'not given'.
    """
    kwargs = {}
    for key, raw in (file_values or {}).items():
        kwargs[key] = _coerce(key, raw, _FIELD_TYPES[key])
    for key, val in (flag_values or {}).items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = tuple(val) if _FIELD_TYPES[key] is tuple else val
    return PipelineConfig(**kwargs)


def config_to_pairs(config):
    """Flat (key, value) pairs for manifests, in field order."""
    pairs = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(format(x, ".15g") for x in v)
        pairs.append((f.name, "" if v is None else str(v)))
    return pairs


def with_overrides(config, **kwargs):
    return replace(config, **kwargs)
