"""Batch command line: ``logem {simulate,converge,feller,probe} --config FILE``.

Config files are INI-style: ``[section]`` headers followed by ``key = value``
lines, ``#`` or ``;`` comments.  Every section and key is checked against the
tables below before any computation starts; unknown ones are rejected.

    [model]       name, then the model's parameters (see logem.models.MODEL_PARAMS)
    [run]         seed, workers
    [experiment]  scheme, reference (exact-gle | self | sre), T, levels, ref_level, paths, p_norm
    [simulate]    schemes, level, fine_level, path_index, paths
    [truncation]  base_radius, epsilon, H, beta, H1, c0
    [theta]       theta, newton_tol, newton_max_iter, bisection_bracket_width
    [feller]      boundary (lower | upper | both), anchor
    [probe]       y_min, y_max, y_points, p_min_exp, p_max_exp

Step sizes are ``T * 2^-level``; ``levels`` takes ``6-11`` or ``6, 7, 8``.
CSV outputs start with ``# logem <version> config-sha256=<hash>`` where the
hash covers the resolved configuration (file plus overrides, minus the
worker count), so the same config and seed give byte-identical files.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .experiments import (
    REFERENCE_KINDS,
    ExperimentConfig,
    Reference,
    positivity_stats,
    strong_error,
    trajectories,
    write_csv,
)
from .feller import classify_boundary
from .models import MODEL_PARAMS, ParameterError, assumption_probe, build_model, raw_sde
from .schemes import SCHEMES, ThetaSolveConfig, TruncationConfig

__all__ = ["ConfigError", "load_config", "main"]

SECTIONS = {
    "model": None,  # keys depend on the model name
    "run": {"seed", "workers"},
    "experiment": {"scheme", "reference", "T", "levels", "ref_level", "paths", "p_norm"},
    "simulate": {"schemes", "level", "fine_level", "path_index", "paths"},
    "truncation": {"base_radius", "epsilon", "H", "beta", "H1", "c0"},
    "theta": {"theta", "newton_tol", "newton_max_iter", "bisection_bracket_width"},
    "feller": {"boundary", "anchor"},
    "probe": {"y_min", "y_max", "y_points", "p_min_exp", "p_max_exp"},
}
# excluded from the config hash: they do not change results
_UNHASHED = {("run", "workers")}


class ConfigError(ValueError):
    pass


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive (H vs h)
    return cp


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> configparser.ConfigParser:
    cp = _parser()
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh, source=path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}".replace("\n", " ")) from None
    for ov in overrides:
        key, sep, value = ov.partition("=")
        sec, dot, opt = key.strip().partition(".")
        if not sep or not dot or not sec or not opt:
            raise ConfigError(f"override {ov!r} is not of the form section.key=value")
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, opt, value.strip())
    _validate_keys(cp)
    return cp


def _validate_keys(cp: configparser.ConfigParser) -> None:
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]; expected one of {sorted(SECTIONS)}")
        if sec == "model":
            name = cp.get("model", "name", fallback=None)
            if name not in MODEL_PARAMS:
                raise ConfigError(f"[model] name must be one of {sorted(MODEL_PARAMS)}, got {name!r}")
            allowed = {"name", *MODEL_PARAMS[name]}
        else:
            allowed = SECTIONS[sec]
        for key in cp.options(sec):
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{sec}]; allowed: {', '.join(sorted(allowed))}")
    if not cp.has_section("model"):
        raise ConfigError("missing [model] section")


def config_hash(cp: configparser.ConfigParser) -> str:
    items = []
    for sec in sorted(cp.sections()):
        for key in sorted(cp.options(sec)):
            if (sec, key) not in _UNHASHED:
                items.append(f"{sec}.{key}={cp.get(sec, key).strip()}")
    return hashlib.sha256("\n".join(items).encode()).hexdigest()


def _num(text: str, what: str) -> float:
    s = text.strip()
    try:
        return float(s)
    except ValueError:
        pass
    try:
        return float(Fraction(s.replace(" ", "")))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{what}: expected a number, got {text!r}") from None


def _int(text: str, what: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ConfigError(f"{what}: expected an integer, got {text!r}") from None


def _get(cp, sec, key, default=None, conv=None):
    if cp.has_option(sec, key):
        raw = cp.get(sec, key)
        return conv(raw, f"{sec}.{key}") if conv else raw.strip()
    return default


def _levels(text: str, what: str) -> List[int]:
    s = text.strip()
    if "-" in s and "," not in s:
        a, _, b = s.partition("-")
        lo, hi = _int(a, what), _int(b, what)
        if lo > hi:
            raise ConfigError(f"{what}: empty range {s!r}")
        return list(range(lo, hi + 1))
    return [_int(p, what) for p in s.split(",") if p.strip()]


def _model_params(cp) -> Dict[str, float]:
    name = cp.get("model", "name")
    return {k: _num(cp.get("model", k), f"model.{k}") for k in MODEL_PARAMS[name] if cp.has_option("model", k)}


def _truncation(cp, model, scheme: str) -> Optional[TruncationConfig]:
    if scheme not in ("log-te", "te"):
        return None
    eps = _get(cp, "truncation", "epsilon", 0.05, _num)
    rb = _get(cp, "truncation", "base_radius", None, _num)
    explicit = [k for k in ("H", "beta", "H1", "c0") if cp.has_option("truncation", k)]
    base = (model.default_truncation if scheme == "log-te" else model.default_x_truncation)(eps, rb)
    if not explicit:
        return base
    vals = {k: _get(cp, "truncation", k, getattr(base, k), _num) for k in ("H", "beta", "H1", "c0")}
    if "c0" not in explicit:
        vals["c0"] = max(1.0, vals["H"] * math.exp(vals["beta"] + 1), vals["H1"])
    return TruncationConfig(vals["H"], vals["beta"], vals["H1"], eps, vals["c0"])


def _theta(cp) -> Optional[ThetaSolveConfig]:
    if not cp.has_section("theta"):
        return None
    d = ThetaSolveConfig()
    return ThetaSolveConfig(
        theta=_get(cp, "theta", "theta", d.theta, _num),
        newton_tol=_get(cp, "theta", "newton_tol", d.newton_tol, _num),
        newton_max_iter=_get(cp, "theta", "newton_max_iter", d.newton_max_iter, _int),
        bisection_bracket_width=_get(cp, "theta", "bisection_bracket_width", d.bisection_bracket_width, _num),
    )


def _scheme(text: str) -> str:
    if text not in SCHEMES:
        raise ConfigError(f"unknown scheme {text!r}; expected one of {', '.join(SCHEMES)}")
    return text


def _check_out(out: str) -> None:
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not usable: {exc.strerror}") from None
    if not os.access(out, os.W_OK | os.X_OK):
        raise ConfigError(f"output directory {out} is not writable")


# --------------------------------------------------------------------------
# subcommands


def _cmd_converge(cp, seed, workers, out, comment):
    model = build_model(cp.get("model", "name"), _model_params(cp))
    scheme = _scheme(_get(cp, "experiment", "scheme", "log-te"))
    T = _get(cp, "experiment", "T", 1.0, _num)
    kind = _get(cp, "experiment", "reference", None)
    if kind is None:
        kind = {"GLE": "exact-gle", "CIR": "sre"}.get(model.name, "self")
    if kind not in REFERENCE_KINDS:
        raise ConfigError(f"experiment.reference must be one of {REFERENCE_KINDS}, got {kind!r}")
    ref_level = _get(cp, "experiment", "ref_level", 12 if kind == "exact-gle" else 14, _int)
    levels = _get(cp, "experiment", "levels", None, _levels)
    if not levels:
        raise ConfigError("experiment.levels is required")
    cfg = ExperimentConfig(
        model=model,
        scheme=scheme,
        reference=Reference(kind, T * 2.0**-ref_level),
        T=T,
        step_sizes=tuple(T * 2.0**-k for k in levels),
        M0=_get(cp, "experiment", "paths", 1000, _int),
        p_norm=_get(cp, "experiment", "p_norm", 2.0, _num),
        master_seed=seed,
        truncation=_truncation(cp, model, scheme),
        theta_cfg=_theta(cp),
        workers=workers,
    )
    rep = strong_error(cfg)
    write_csv(os.path.join(out, "errors.csv"), ["delta", "error", "stderr"], rep.per_delta.tolist(), comment)
    write_csv(os.path.join(out, "rate.csv"), ["slope", "intercept"], [[rep.slope, rep.intercept]], comment)
    write_csv(os.path.join(out, "positivity.csv"), ["scheme", "violations", "paths"],
              [[s, v, rep.paths] for s, v in rep.positivity_violations.items()], comment)
    for note in rep.notes:
        print(f"note: {note}", file=sys.stderr)
    print(f"{model.name} {scheme}: slope {rep.slope:.4f} over {len(levels)} step sizes, {rep.paths} paths"
          + ("" if rep.valid else " (INVALID: too many aborted paths)"))
    return 0 if rep.valid else 1


def _cmd_simulate(cp, seed, workers, out, comment):
    model = build_model(cp.get("model", "name"), _model_params(cp))
    T = _get(cp, "experiment", "T", 1.0, _num)
    raw = _get(cp, "simulate", "schemes", "log-te")
    schemes = [_scheme(s.strip()) for s in raw.split(",") if s.strip()]
    level = _get(cp, "simulate", "level", 6, _int)
    fine = _get(cp, "simulate", "fine_level", level, _int)
    if fine < level:
        raise ConfigError("simulate.fine_level must be >= simulate.level")
    idx = _get(cp, "simulate", "path_index", 0, _int)
    paths = _get(cp, "simulate", "paths", 0, _int)
    dt = T * 2.0**-level
    trunc = {s: _truncation(cp, model, s) for s in schemes}
    theta = _theta(cp)
    rows = trajectories(model, schemes, dt, seed, idx, T, 2**fine, trunc, theta)
    write_csv(os.path.join(out, "trajectories.csv"), ["t", "value", "scheme"], rows, comment)
    summary = f"{model.name}: {len(schemes)} trajectory(ies) at step 2^-{level}"
    if paths > 0:
        stats = positivity_stats(model, schemes, dt, paths, seed, T, trunc, theta)
        write_csv(os.path.join(out, "positivity.csv"), ["scheme", "violations", "paths"],
                  [[s, v, n] for s, (v, n) in stats.items()], comment)
        summary += "; violations " + ", ".join(f"{s}={v}/{n}" for s, (v, n) in stats.items())
    print(summary)
    return 0


def _cmd_feller(cp, seed, workers, out, comment):
    # diagnostic: runs on the raw SDE so parameter sets that build_model rejects can be examined
    sde = raw_sde(cp.get("model", "name"), _model_params(cp))
    which = _get(cp, "feller", "boundary", "both")
    if which not in ("lower", "upper", "both"):
        raise ConfigError(f"feller.boundary must be lower, upper or both, got {which!r}")
    anchor = _get(cp, "feller", "anchor", None, _num)
    for b in (("lower", "upper") if which == "both" else (which,)):
        rep = classify_boundary(sde, b, anchor)
        ratios = np.concatenate([[np.nan], rep.ratios])
        rows = [[x, v, r] for (x, v), r in zip(rep.v_samples.tolist(), ratios.tolist())]
        write_csv(os.path.join(out, f"feller_{b}.csv"), ["x", "v", "ratio"], rows, comment)
        if rep.warning:
            print(f"warning: {rep.warning}", file=sys.stderr)
        print(rep.verdict())
    return 0


def _cmd_probe(cp, seed, workers, out, comment):
    model = build_model(cp.get("model", "name"), _model_params(cp))
    y = np.linspace(_get(cp, "probe", "y_min", -30.0, _num), _get(cp, "probe", "y_max", 30.0, _num),
                    _get(cp, "probe", "y_points", 2001, _int))
    p = 2.0 ** np.arange(_get(cp, "probe", "p_min_exp", 2, _int), _get(cp, "probe", "p_max_exp", 10, _int) + 1)
    res = assumption_probe(model.transformed, y, p)
    rows = [[pi, si, ai, int(ci)] for pi, si, ai, ci in zip(res.p, res.S, res.argmax_y, res.censored)]
    write_csv(os.path.join(out, "probe.csv"), ["p", "S", "argmax_y", "censored"], rows, comment)
    if res.note:
        print(f"note: {res.note}", file=sys.stderr)
    m = "n/a" if res.m_hat is None else f"{res.m_hat:.4f}"
    K = "n/a" if res.K_hat is None else f"{res.K_hat:.4g}"
    print(f"{model.name}: m_hat {m}, K_hat {K}, exponential growth {'yes' if res.exponential else 'no'}")
    return 0


COMMANDS = {"simulate": _cmd_simulate, "converge": _cmd_converge, "feller": _cmd_feller, "probe": _cmd_probe}


def _arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="logem", description="Positivity-preserving log-Euler schemes for scalar SDEs.")
    ap.add_argument("--version", action="version", version=f"logem {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, metavar="PATH")
        sp.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides run.seed)")
        sp.add_argument("--workers", type=int, metavar="N", help="worker processes (overrides run.workers)")
        sp.add_argument("--out", default=".", metavar="DIR", help="output directory (default: current)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", dest="overrides")
    return ap


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _arg_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError(f"--seed must be a 64-bit unsigned integer, got {args.seed}")
            overrides.append(f"run.seed={args.seed}")
        if args.workers is not None:
            overrides.append(f"run.workers={args.workers}")
        cp = load_config(args.config, overrides)
        seed = _get(cp, "run", "seed", 0, _int)
        if not 0 <= seed < 2**64:
            raise ConfigError(f"run.seed must be a 64-bit unsigned integer, got {seed}")
        workers = _get(cp, "run", "workers", 1, _int)
        if workers < 1:
            raise ConfigError("run.workers must be >= 1")
        _check_out(args.out)
        comment = f"logem {__version__} config-sha256={config_hash(cp)}"
        return COMMANDS[args.command](cp, seed, workers, args.out, comment)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except ParameterError as exc:
        return _fail("parameter", exc, 2)
    except (ValueError, TypeError) as exc:
        return _fail("validation", exc, 2)
    except (ArithmeticError, RuntimeError, OSError) as exc:
        return _fail("runtime", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
