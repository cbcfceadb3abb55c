"""Monte-Carlo harness: coupled strong errors, rate fits, pathwise errors, positivity counts.

Every path index owns one fine Brownian grid.  The reference and each step
size for that index consume coarsenings of those same increments, so the
measured errors compare schemes rather than noise.

Paths are processed in fixed blocks of contiguous indices.  The block size
does not depend on the worker count, and per-block results are reassembled in
path-index order, so the output is bit-identical for any number of workers.
"""

from __future__ import annotations

import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .models import ModelSpec, build_model, gle_exact_paths
from .noise import coarsen_array, generate, generate_batch
from .schemes import SCHEMES, ThetaSolveConfig, TruncationConfig, run_batch, simulate

__all__ = [
    "REFERENCE_KINDS",
    "Reference",
    "default_reference",
    "ExperimentConfig",
    "ErrorReport",
    "PathwiseReport",
    "fit_rate",
    "jackknife_lp",
    "strong_error",
    "pathwise_error",
    "positivity_stats",
    "trajectories",
    "monotone_trend",
    "write_csv",
]

REFERENCE_KINDS = ("exact-gle", "self", "sre")
ABORT_LIMIT = 0.01
JACKKNIFE_BLOCKS = 50
PATH_BLOCK = 250


@dataclass(frozen=True)
class Reference:
    """Reference solution: exact GLE formula, the scheme itself on a fine grid, or SRE (CIR only)."""

    kind: str
    step: float

    def __post_init__(self):
        if self.kind not in REFERENCE_KINDS:
            raise ValueError(f"unknown reference {self.kind!r}; expected one of {REFERENCE_KINDS}")
        if not self.step > 0:
            raise ValueError("reference step must be positive")

    def describe(self) -> str:
        return f"{self.kind}@{self.step!r}"


def default_reference(model_name: str, T: float = 1.0) -> Reference:
    if model_name == "GLE":
        return Reference("exact-gle", 2.0**-12 * T)
    if model_name == "CIR":
        return Reference("sre", 2.0**-14 * T)
    return Reference("self", 2.0**-14 * T)


def _steps_count(T: float, dt: float, what: str) -> int:
    r = T / dt
    n = int(round(r))
    if n < 1 or abs(r - n) > 1e-9 * r or n & (n - 1):
        raise ValueError(f"{what} {dt!r} is not T / 2^k for T={T!r}")
    return n


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    model: ModelSpec
    scheme: str
    reference: Reference
    T: float
    step_sizes: Tuple[float, ...]
    M0: int
    p_norm: float = 2.0
    master_seed: int = 0
    truncation: Optional[TruncationConfig] = None
    theta_cfg: Optional[ThetaSolveConfig] = None
    workers: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.M0 < 2:
            raise ValueError(f"M0 must be >= 2, got {self.M0}")
        if not self.p_norm >= 1:
            raise ValueError(f"p_norm must be >= 1, got {self.p_norm}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not self.step_sizes:
            raise ValueError("no step sizes given")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        n_fine = _steps_count(self.T, self.reference.step, "reference step")
        for dt in self.step_sizes:
            n = _steps_count(self.T, dt, "step size")
            if n > n_fine:
                raise ValueError(f"step size {dt!r} is finer than the reference grid")
        ref = self.reference
        if ref.kind == "exact-gle":
            if self.model.name != "GLE":
                raise ValueError("the exact reference exists only for GLE")
            if ref.step > 2.0**-12 * self.T * (1 + 1e-12):
                raise ValueError(f"exact GLE reference needs step <= 2^-12 T, got {ref.step!r}")
        if ref.kind == "sre" and self.model.name != "CIR":
            raise ValueError("the SRE reference exists only for CIR")
        object.__setattr__(self, "step_sizes", tuple(sorted((float(d) for d in self.step_sizes), reverse=True)))

    @property
    def n_fine(self) -> int:
        return _steps_count(self.T, self.reference.step, "reference step")

    def resolved_truncation(self) -> Optional[TruncationConfig]:
        if self.truncation is not None:
            return self.truncation
        if self.scheme == "log-te":
            return self.model.default_truncation()
        if self.scheme == "te":
            return self.model.default_x_truncation()
        return None


@dataclass
class ErrorReport:
    per_delta: np.ndarray  # rows (delta, error, stderr), delta descending
    slope: float
    intercept: float
    positivity_violations: Dict[str, int]
    aborted: np.ndarray
    paths: int
    valid: bool
    reference: str
    notes: List[str] = field(default_factory=list)

    @property
    def deltas(self) -> np.ndarray:
        return self.per_delta[:, 0]

    @property
    def errors(self) -> np.ndarray:
        return self.per_delta[:, 1]

    @property
    def stderr(self) -> np.ndarray:
        return self.per_delta[:, 2]


@dataclass
class PathwiseReport:
    deltas: np.ndarray
    sup_errors: np.ndarray  # (paths, n_deltas)
    gamma: np.ndarray  # per path, nan where a fit is impossible
    median_gamma: float
    aborted: np.ndarray


def fit_rate(deltas, errors) -> Tuple[float, float]:
    """Least-squares slope and intercept of ``ln error`` against ``ln delta``."""
    d = np.log(np.asarray(deltas, dtype=float))
    e = np.log(np.asarray(errors, dtype=float))
    if len(d) < 2:
        raise ValueError("need at least two step sizes for a rate")
    A = np.vstack([d, np.ones_like(d)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, e, rcond=None)
    return float(slope), float(icpt)


def jackknife_lp(abs_err_p: np.ndarray, p: float, n_blocks: int = JACKKNIFE_BLOCKS) -> Tuple[float, float]:
    """``(mean |e|^p)^{1/p}`` and its delete-one-block jackknife standard error."""
    a = np.asarray(abs_err_p, dtype=float)
    n = len(a)
    est = float(np.mean(a) ** (1.0 / p))
    B = min(n_blocks, n)
    if B < 2:
        return est, float("nan")
    edges = np.linspace(0, n, B + 1).astype(int)
    sums = np.array([a[edges[i]:edges[i + 1]].sum() for i in range(B)])
    cnts = np.diff(edges)
    tot, cnt = sums.sum(), cnts.sum()
    loo = ((tot - sums) / (cnt - cnts)) ** (1.0 / p)
    se = math.sqrt((B - 1) / B * float(np.sum((loo - loo.mean()) ** 2)))
    return est, se


# --------------------------------------------------------------------------
# per-block work; everything passed to workers is picklable


@dataclass(frozen=True)
class _Job:
    model_name: str
    params: Tuple[Tuple[str, float], ...]
    scheme: str
    ref_kind: str
    T: float
    n_fine: int
    levels: Tuple[int, ...]  # steps count per step size
    seed: int
    truncation: Optional[TruncationConfig]
    theta_cfg: Optional[ThetaSolveConfig]
    sparse: int = 0  # >0: record every path at this many coarse points


_MODEL_CACHE: Dict[tuple, ModelSpec] = {}


def _model_for(job: _Job) -> ModelSpec:
    key = (job.model_name, job.params)
    m = _MODEL_CACHE.get(key)
    if m is None:
        m = _MODEL_CACHE[key] = build_model(job.model_name, dict(job.params))
    return m


def _reference_block(job: _Job, model: ModelSpec, dW: np.ndarray, record_stride: int = 0):
    dt = job.T / job.n_fine
    if job.ref_kind == "exact-gle":
        p = model.params
        W = np.concatenate([np.zeros((dW.shape[0], 1)), np.cumsum(dW, axis=1)], axis=1)
        if record_stride:
            x = gle_exact_paths(W, dt, p["lambda"], p["sigma"], p["x0"], terminal_only=False)[:, ::record_stride]
        else:
            x = gle_exact_paths(W, dt, p["lambda"], p["sigma"], p["x0"])
        return x, np.zeros(dW.shape[0], dtype=bool), np.zeros(dW.shape[0], dtype=bool)
    kind = "sre" if job.ref_kind == "sre" else job.scheme
    res = run_batch(kind, model, dW, dt, job.truncation, job.theta_cfg,
                    record=bool(record_stride), record_stride=max(record_stride, 1))
    return (res.paths if record_stride else res.terminal), res.aborted, res.violated


def _error_block(job: _Job, indices: Sequence[int]):
    model = _model_for(job)
    dW = generate_batch(job.T, job.n_fine, job.seed, indices)
    B = len(indices)
    n_coarse = job.sparse
    ref_stride = job.n_fine // n_coarse if n_coarse else 0
    ref, ref_ab, ref_viol = _reference_block(job, model, dW, ref_stride)
    out_vals = []
    out_ab = np.zeros((B, len(job.levels)), dtype=bool)
    viol = np.zeros(B, dtype=bool)
    for j, n in enumerate(job.levels):
        inc = coarsen_array(dW, job.n_fine // n)
        stride = n // n_coarse if n_coarse else 1
        res = run_batch(job.scheme, model, inc, job.T / n, job.truncation, job.theta_cfg,
                        record=bool(n_coarse), record_stride=stride)
        vals = res.paths if n_coarse else res.terminal
        if n_coarse:
            err = np.max(np.abs(vals - ref), axis=1)
        else:
            err = np.abs(vals - ref)
        out_vals.append(err)
        out_ab[:, j] = res.aborted | ref_ab
        viol |= res.violated
    return np.column_stack(out_vals), out_ab, viol, ref_viol


def _blocks(M0: int, size: int = PATH_BLOCK):
    return [range(i, min(i + size, M0)) for i in range(0, M0, size)]


def _run_blocks(job: _Job, M0: int, workers: int):
    blocks = _blocks(M0)
    if workers == 1 or len(blocks) == 1:
        parts = [_error_block(job, b) for b in blocks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_error_block, [job] * len(blocks), blocks))
    err = np.concatenate([p[0] for p in parts])
    ab = np.concatenate([p[1] for p in parts])
    viol = np.concatenate([p[2] for p in parts])
    ref_viol = np.concatenate([p[3] for p in parts])
    return err, ab, viol, ref_viol


def _job(cfg: ExperimentConfig, sparse: int = 0) -> _Job:
    return _Job(
        model_name=cfg.model.name,
        params=tuple(sorted(cfg.model.params.items())),
        scheme=cfg.scheme,
        ref_kind=cfg.reference.kind,
        T=cfg.T,
        n_fine=cfg.n_fine,
        levels=tuple(_steps_count(cfg.T, d, "step size") for d in cfg.step_sizes),
        seed=cfg.master_seed,
        truncation=cfg.resolved_truncation(),
        theta_cfg=cfg.theta_cfg,
        sparse=sparse,
    )


def strong_error(cfg: ExperimentConfig) -> ErrorReport:
    """Coupled ``L^p`` terminal errors per step size, with jackknife errors and a log-log slope.

    Paths that abort at any step size (or in the reference) are excluded from
    every average; more than 1% aborted paths marks the report invalid.
    """
    job = _job(cfg)
    err, ab, viol, ref_viol = _run_blocks(job, cfg.M0, cfg.workers)
    keep = ~ab.any(axis=1)
    n_abort = int((~keep).sum())
    p = cfg.p_norm
    rows = []
    for j, dt in enumerate(cfg.step_sizes):
        e, se = jackknife_lp(err[keep, j] ** p, p)
        rows.append((dt, e, se))
    per = np.array(rows, dtype=float)
    notes = []
    if n_abort:
        notes.append(f"{n_abort} of {cfg.M0} paths aborted and were excluded")
    valid = n_abort <= ABORT_LIMIT * cfg.M0
    if not valid:
        notes.append("more than 1% of paths aborted: report invalid")
    if cfg.reference.kind == "self":
        notes.append(f"reference: {cfg.scheme} on the fine grid (step {cfg.reference.step!r})")
    pos = per[:, 1] > 0
    if pos.sum() >= 2:
        slope, icpt = fit_rate(per[pos, 0], per[pos, 1])
    else:
        slope = icpt = float("nan")
    if cfg.reference.kind == "self":
        viol = viol | ref_viol  # the reference runs the same scheme
    violations = {cfg.scheme: int(viol.sum())}
    if cfg.reference.kind == "sre":
        violations["sre"] = int(ref_viol.sum())
    return ErrorReport(per, slope, icpt, violations, ab.sum(axis=0), cfg.M0, valid, cfg.reference.describe(), notes)


def pathwise_error(cfg: ExperimentConfig) -> PathwiseReport:
    """Per-path sup error over the coarsest grid's points, and a per-path rate ``gamma``."""
    job = _job(cfg)
    n_coarse = min(job.levels)
    job = _job(cfg, sparse=n_coarse)
    err, ab, _, _ = _run_blocks(job, cfg.M0, cfg.workers)
    d = np.log(np.asarray(cfg.step_sizes))
    gamma = np.full(cfg.M0, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        le = np.log(err)
    ok = np.all(np.isfinite(le), axis=1) & ~ab.any(axis=1)
    if ok.any() and len(d) >= 2:
        dc = d - d.mean()
        gamma[ok] = (le[ok] - le[ok].mean(axis=1, keepdims=True)) @ dc / (dc @ dc)
    med = float(np.median(gamma[ok])) if ok.any() else float("nan")
    return PathwiseReport(np.asarray(cfg.step_sizes), err, gamma, med, ab.any(axis=1))


def positivity_stats(model: ModelSpec, schemes: Sequence[str], dt: float, M0: int, seed: int,
                     T: float = 1.0, truncation: Optional[Mapping[str, TruncationConfig]] = None,
                     theta_cfg: Optional[ThetaSolveConfig] = None) -> Dict[str, Tuple[int, int]]:
    """Per scheme, ``(paths with any state outside the open domain, paths)``; aborts count as violations."""
    n = _steps_count(T, dt, "step size")
    truncation = dict(truncation or {})
    out = {}
    for s in schemes:
        tc = truncation.get(s)
        if tc is None and s == "log-te":
            tc = model.default_truncation()
        elif tc is None and s == "te":
            tc = model.default_x_truncation()
        count = 0
        for b in _blocks(M0):
            dW = generate_batch(T, n, seed, b)
            count += int(run_batch(s, model, dW, dt, tc, theta_cfg).violated.sum())
        out[s] = (count, M0)
    return out


def trajectories(model: ModelSpec, schemes: Sequence[str], dt: float, seed: int, path_index: int = 0,
                 T: float = 1.0, n_fine: Optional[int] = None,
                 truncation: Optional[Mapping[str, TruncationConfig]] = None,
                 theta_cfg: Optional[ThetaSolveConfig] = None):
    """Rows ``(t, value, scheme)`` for each scheme on one shared Brownian path."""
    n = _steps_count(T, dt, "step size")
    n_fine = n if n_fine is None else n_fine
    grid = generate(T, n_fine, seed, path_index)
    truncation = dict(truncation or {})
    rows = []
    for s in schemes:
        tc = truncation.get(s)
        if tc is None and s == "log-te":
            tc = model.default_truncation()
        elif tc is None and s == "te":
            tc = model.default_x_truncation()
        tr = simulate(s, model, grid, n_fine // n, tc, theta_cfg)
        rows.extend((float(t), float(v), s) for t, v in zip(tr.times, tr.values))
    return rows


def monotone_trend(report: ErrorReport, n_se: float = 2.0, max_inversions: int = 1) -> bool:
    """Errors decrease as the step shrinks, allowing ``max_inversions`` rises within ``n_se`` jackknife errors."""
    e, se = report.errors, report.stderr
    inversions = 0
    for i in range(len(e) - 1):
        if e[i + 1] < e[i]:
            continue
        inversions += 1
        if e[i + 1] - e[i] > n_se * math.hypot(se[i], se[i + 1]):
            return False
    return inversions <= max_inversions


def write_csv(path: str, header: Sequence[str], rows, comment: Optional[str] = None) -> None:
    """Write a CSV atomically (temporary file in the same directory, then rename).

    Floats are written with ``repr`` so values round-trip exactly.
    """
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)

    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append(",".join(header))
    lines.extend(",".join(fmt(v) for v in r) for r in rows)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
