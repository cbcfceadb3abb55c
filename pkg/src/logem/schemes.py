"""One-step maps and path drivers.

Explicit Euler-Maruyama (``em``), truncated EM (``te``), their log-wrapped
versions (``log-em``, ``log-te``), the stochastic theta method in log space
(``log-theta``) and three closed-form CIR schemes (``sre``, ``lord-ft``,
``sym``).

The truncated schemes clamp the state before evaluating the coefficients at
radius ``l = psi^{-1}(h(dt))`` with ``psi(u) = H exp((beta+1) u)`` and
``h(dt) = H1 dt^{-epsilon}``, so both coefficients are bounded by ``h(dt)``.

Theta convention: weight ``theta`` sits on the *explicit* drift,
``y1 = y0 + theta dt f(y0) + (1 - theta) dt f(y1) + g(y0) dW``; ``theta = 1`` is
explicit EM.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DomainError, ScalarSde, TransformedSde
from .noise import BrownianGrid, coarsen

__all__ = [
    "SCHEMES",
    "LOG_SCHEMES",
    "CIR_SCHEMES",
    "TruncationConfig",
    "ThetaSolveConfig",
    "Trajectory",
    "EnvelopeError",
    "SimulationAbort",
    "psi",
    "psi_inv",
    "h_of",
    "l_delta",
    "truncate_state",
    "truncated_coeffs",
    "default_truncation",
    "step_em",
    "step_truncated_em",
    "step_theta",
    "sre_cir_step",
    "lord_ft_step",
    "symmetrized_step",
    "BatchResult",
    "run_batch",
    "simulate",
]

SCHEMES = ("em", "te", "log-em", "log-te", "log-theta", "sre", "lord-ft", "sym")
LOG_SCHEMES = ("log-em", "log-te", "log-theta")
CIR_SCHEMES = ("sre", "lord-ft", "sym")


class EnvelopeError(ValueError):
    """``psi`` fails to dominate ``max(|f|, |g|)`` on the verification grid."""

    def __init__(self, y: float, value: float, bound: float):
        self.y = y
        super().__init__(
            f"growth envelope violated at y={y:.6g}: max(|f|,|g|)={value:.6g} > psi={bound:.6g}"
        )


class SimulationAbort(RuntimeError):
    def __init__(self, message: str, path_index: Optional[int] = None, step_index: Optional[int] = None):
        self.path_index = path_index
        self.step_index = step_index
        super().__init__(f"{message} (path {path_index}, step {step_index})")


# --------------------------------------------------------------------------
# truncation machinery


@dataclass(frozen=True)
class TruncationConfig:
    H: float
    beta: float
    H1: float
    epsilon: float = 0.05
    c0: float = 1.0

    def __post_init__(self):
        if not self.H > 0:
            raise ValueError(f"H must be positive, got {self.H}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if not 0 < self.epsilon < 0.25:
            raise ValueError(f"epsilon must lie in (0, 1/4), got {self.epsilon}")
        psi1 = self.psi1
        if self.H1 < psi1 * (1 - 1e-12):
            raise ValueError(f"H1={self.H1} < psi(1)={psi1}: h(dt) would drop below psi(1)")
        # sup over dt in (0,1] of dt^{1/4} h(dt) is H1, reached at dt = 1
        if self.c0 < max(1.0, psi1, self.H1) * (1 - 1e-12):
            raise ValueError(
                f"c0={self.c0} must be >= max(1, psi(1), H1) = {max(1.0, psi1, self.H1)}"
            )

    @property
    def psi1(self) -> float:
        return self.H * math.exp(self.beta + 1.0)


@dataclass(frozen=True)
class ThetaSolveConfig:
    theta: float = 0.5
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    bisection_bracket_width: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be >= 1")
        if not self.bisection_bracket_width > 0:
            raise ValueError("bisection_bracket_width must be positive")


def psi(u, cfg: TruncationConfig):
    u = np.asarray(u, dtype=float)
    if np.any(u < 1):
        raise ValueError("psi is defined on [1, inf)")
    out = cfg.H * np.exp((cfg.beta + 1.0) * u)
    return float(out) if out.ndim == 0 else out


def psi_inv(v, cfg: TruncationConfig):
    v = np.asarray(v, dtype=float)
    if np.any(v < cfg.psi1 * (1 - 1e-12)):
        raise ValueError(f"psi_inv needs v >= psi(1) = {cfg.psi1}; truncation radius would be < 1")
    out = np.maximum(np.log(v / cfg.H) / (cfg.beta + 1.0), 1.0)
    return float(out) if out.ndim == 0 else out


def h_of(dt: float, cfg: TruncationConfig) -> float:
    if not 0 < dt <= 1:
        raise ValueError(f"step size must lie in (0, 1], got {dt}")
    return cfg.H1 * dt ** (-cfg.epsilon)


def l_delta(dt: float, cfg: TruncationConfig) -> float:
    return psi_inv(h_of(dt, cfg), cfg)


def truncate_state(y, l):
    """``(|y| ^ l) y/|y|``, with 0 mapped to 0."""
    out = np.clip(np.asarray(y, dtype=float), -l, l)
    return float(out) if out.ndim == 0 else out


def _envelope_max(f, g, y):
    with np.errstate(over="ignore", invalid="ignore"):
        a = np.maximum(np.abs(np.asarray(f(y), dtype=float)), np.abs(np.asarray(g(y), dtype=float)))
    return a


def verify_envelope(f, g, cfg: TruncationConfig, radius: float, n: int = 4001) -> None:
    """Check ``sup_{|y|<=R} max(|f|,|g|) <= psi(R)`` for ``R`` up to ``radius`` on a grid."""
    r = np.linspace(0.0, radius, n)
    a = np.maximum(_envelope_max(f, g, r), _envelope_max(f, g, -r))
    if not np.all(np.isfinite(a)):
        k = int(np.argmin(np.isfinite(a)))
        raise EnvelopeError(float(r[k]), float("inf"), float(psi(max(r[k], 1.0), cfg)))
    running = np.maximum.accumulate(a)
    bound = cfg.H * np.exp((cfg.beta + 1.0) * np.maximum(r, 1.0))
    bad = running > bound * (1 + 1e-12)
    if np.any(bad):
        k = int(np.argmax(bad))
        # report the actual offending point, not just the radius
        j = int(np.argmax(a[: k + 1]))
        y_bad = r[j] if _envelope_max(f, g, r[j : j + 1])[0] >= a[j] else -r[j]
        raise EnvelopeError(float(y_bad), float(running[k]), float(bound[k]))


def truncated_coeffs(tsde: TransformedSde, cfg: TruncationConfig, dt: float, verify: bool = True):
    """``(f_dt, g_dt)``: coefficients evaluated at the state clamped to radius ``l_delta(dt)``."""
    l = l_delta(dt, cfg)
    f, g = tsde.f, tsde.g
    if verify:
        verify_envelope(f, g, cfg, l)

    def f_dt(y):
        return f(truncate_state(y, l))

    def g_dt(y):
        return g(truncate_state(y, l))

    f_dt.radius = g_dt.radius = l
    return f_dt, g_dt


def _round_up(x: float, digits: int = 6) -> float:
    if x <= 0:
        return x
    e = math.floor(math.log10(x)) - (digits - 1)
    q = 10.0**e
    return math.ceil(x / q) * q


def default_truncation(f, g, beta: float, epsilon: float = 0.05, base_radius: float = 1.0) -> TruncationConfig:
    """Truncation parameters for coefficients ``f, g`` and growth exponent ``beta``.

    ``H`` makes ``psi(1)`` the supremum of ``max(|f|, |g|)`` on ``[-1, 1]``
    (rounded up); ``H1 = psi(base_radius)`` so the radius at ``dt = 1`` is
    ``base_radius``; ``c0`` is the smallest admissible constant.
    """
    if base_radius < 1:
        raise ValueError("base_radius must be >= 1")
    y = np.linspace(-1.0, 1.0, 20001)
    sup = float(np.max(_envelope_max(f, g, y)))
    if not np.isfinite(sup):
        raise ValueError("coefficients are not finite on [-1, 1]")
    sup = max(sup, 1e-300) * (1 + 1e-6)
    H = _round_up(sup / math.exp(beta + 1.0))
    psi1 = H * math.exp(beta + 1.0)
    H1 = H * math.exp((beta + 1.0) * base_radius)
    return TruncationConfig(H=H, beta=float(beta), H1=H1, epsilon=epsilon, c0=max(1.0, psi1, H1))


# --------------------------------------------------------------------------
# one-step maps; all accept scalars or arrays of paths


def step_em(y, f, g, dt, dW):
    return y + dt * f(y) + g(y) * dW


def step_truncated_em(y, f_dt, g_dt, dt, dW):
    return y + dt * f_dt(y) + g_dt(y) * dW


def _fd_derivative(f, z):
    h = 1e-6 * np.maximum(1.0, np.abs(z))
    return (f(z + h) - f(z - h)) / (2 * h)


def _theta_solve(rhs, a, f, df, z0, cfg: ThetaSolveConfig):
    """Solve ``z - a f(z) = rhs`` elementwise; returns ``(z, failed)``.

    Damped Newton from ``z0``; entries where Newton stalls or runs out of
    iterations fall back to bracketed bisection.
    """
    rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
    z0 = np.broadcast_to(np.atleast_1d(np.asarray(z0, dtype=float)), rhs.shape).copy()
    tol = cfg.newton_tol * np.maximum(1.0, np.abs(rhs))

    def resid(zz, r):
        return zz - a * f(zz) - r

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        z = z0.copy()
        F = resid(z, rhs)
        active = ~(np.abs(F) <= tol) & np.isfinite(F)
        for _ in range(cfg.newton_max_iter):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            za, Fa, ra = z[idx], F[idx], rhs[idx]
            J = 1.0 - a * (df(za) if df is not None else _fd_derivative(f, za))
            step = Fa / J
            lam = np.ones_like(za)
            trial = za - step
            Ft = resid(trial, ra)
            for _ in range(30):
                worse = ~(np.abs(Ft) < np.abs(Fa))
                if not worse.any():
                    break
                lam[worse] *= 0.5
                trial[worse] = za[worse] - lam[worse] * step[worse]
                Ft[worse] = resid(trial[worse], ra[worse])
            improved = np.abs(Ft) < np.abs(Fa)
            z[idx[improved]] = trial[improved]
            F[idx[improved]] = Ft[improved]
            active[idx[~improved]] = False
            active &= ~(np.abs(F) <= tol)

        failed = ~(np.abs(F) <= tol)
        if failed.any():
            zb, ok = _bisect(rhs[failed], a, f, z0[failed], tol[failed], cfg)
            fidx = np.flatnonzero(failed)
            z[fidx] = zb
            failed[fidx[ok]] = False
    return z, failed


def _bisect(rhs, a, f, z0, tol, cfg: ThetaSolveConfig):
    """Bracketed bisection for the increasing map ``z - a f(z)``, bracket grown geometrically."""
    width = np.full_like(z0, cfg.bisection_bracket_width)
    lo, hi = z0 - width, z0 + width
    Flo = lo - a * f(lo) - rhs
    Fhi = hi - a * f(hi) - rhs
    for _ in range(60):
        bad = ~((Flo <= 0) & (Fhi >= 0))
        if not bad.any():
            break
        width = np.where(bad, width * 2.0, width)
        lo = np.where(bad & (Flo > 0), z0 - width, lo)
        hi = np.where(bad & (Fhi < 0), z0 + width, hi)
        Flo = lo - a * f(lo) - rhs
        Fhi = hi - a * f(hi) - rhs
    ok = (Flo <= 0) & (Fhi >= 0)
    z = 0.5 * (lo + hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        Fm = mid - a * f(mid) - rhs
        z = mid
        conv = (np.abs(Fm) <= tol) | (mid == lo) | (mid == hi)
        if np.all(conv | ~ok):
            break
        left = Fm < 0
        lo = np.where(left & ~conv, mid, lo)
        hi = np.where(~left & ~conv, mid, hi)
    z = np.where(ok, z, np.nan)
    return z, ok


def step_theta(y, f, g, dt, dW, cfg: ThetaSolveConfig, df=None):
    """Stochastic theta step; nan marks entries whose implicit solve failed."""
    if cfg.theta == 1.0:
        return step_em(y, f, g, dt, dW)
    scalar = np.ndim(y) == 0 and np.ndim(dW) == 0
    fy = f(y)
    rhs = y + cfg.theta * dt * fy + g(y) * dW
    z0 = y + dt * fy + g(y) * dW
    z, failed = _theta_solve(rhs, (1.0 - cfg.theta) * dt, f, df, z0, cfg)
    z = np.where(failed, np.nan, z)
    return float(z[0]) if scalar else z.reshape(np.shape(rhs))


def sre_cir_step(x, kappa, lam, theta, dt, dW):
    """Drift-implicit square-root Euler step for CIR (needs ``4 kappa lam >= theta^2``).

    Evaluated as ``(a + r)^2`` with ``a = s/(2d)``, ``r = sqrt(a^2 + c)``,
    rearranged to avoid cancellation and so that a zero step returns ``x``
    exactly.
    """
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if np.any(x < 0):
        raise DomainError("SRE needs x >= 0")
    d = 1.0 + 0.5 * kappa * dt
    c = (4.0 * kappa * lam - theta * theta) * dt / (8.0 * d)
    rx = np.sqrt(x)
    s = rx + 0.5 * theta * dW
    a = s / (2.0 * d)
    rad = a * a + c
    if np.any(rad < 0):
        raise FloatingPointError("negative radicand in SRE step")
    r = np.sqrt(rad)
    with np.errstate(invalid="ignore", divide="ignore"):
        den = a + r
        delta = np.where(den > 0, c / np.where(den > 0, den, 1.0), 0.0)
        s2 = x + theta * rx * dW + 0.25 * theta * theta * dW * dW
        pos = s2 / (d * d) + 4.0 * a * delta + delta * delta
        neg = (c / (r - a)) ** 2
    out = np.where(a >= 0, pos, neg)
    return float(out) if out.ndim == 0 else out


def lord_ft_step(xt, kappa, lam, theta, dt, dW):
    """Full-truncation Euler: returns ``(x_tilde_next, max(x_tilde_next, 0))``."""
    xp = np.maximum(xt, 0.0)
    nxt = xt + kappa * dt * (lam - xp) + theta * np.sqrt(xp) * dW
    return nxt, np.maximum(nxt, 0.0)


def symmetrized_step(x, kappa, lam, theta, dt, dW):
    if np.any(np.asarray(x) < 0):
        raise DomainError("symmetrized Euler needs x >= 0")
    return np.abs(x + kappa * dt * (lam - x) + theta * np.sqrt(x) * dW)


# --------------------------------------------------------------------------
# path drivers


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    scheme_tag: str

    def __post_init__(self):
        if len(self.times) != len(self.values):
            raise ValueError("times and values differ in length")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "value"])
        for t, v in zip(self.times, self.values):
            w.writerow([repr(float(t)), repr(float(v))])
        return buf.getvalue()


@dataclass
class BatchResult:
    terminal: np.ndarray
    aborted: np.ndarray
    violated: np.ndarray
    abort_step: np.ndarray
    paths: Optional[np.ndarray] = None
    reason: dict = field(default_factory=dict)


def _resolve(target):
    """Split a model, transformed SDE or plain SDE into (sde, tsde, params, name)."""
    if isinstance(target, TransformedSde):
        return target.source, target, {}, getattr(target.source, "name", "sde")
    if isinstance(target, ScalarSde):
        return target, None, {}, target.name
    # ModelSpec (duck-typed to keep this module free of the model zoo)
    return target.sde, target.transformed, dict(target.params), target.name


def _cir_params(params, name):
    if name != "CIR":
        raise ValueError(f"this scheme is specific to the CIR model, got {name}")
    return params["kappa"], params["lambda"], params["theta"]


def run_batch(
    kind: str,
    target,
    dW: np.ndarray,
    dt: float,
    trunc: Optional[TruncationConfig] = None,
    theta_cfg: Optional[ThetaSolveConfig] = None,
    record: bool = False,
    check_domain: bool = True,
    record_stride: int = 1,
) -> BatchResult:
    """Iterate one scheme over a ``(paths, steps)`` array of increments.

    Log-wrapped schemes evolve ``y`` and report ``x = inverse(y)``; x-space
    schemes evolve ``x`` directly.  A path aborts (and is frozen at nan) once
    its state is non-finite or an implicit solve fails; it is marked violated
    once any reported value leaves the open model domain.  With ``record``,
    values at every ``record_stride``-th grid point are kept in ``paths``.
    """
    if kind not in SCHEMES:
        raise ValueError(f"unknown scheme {kind!r}; expected one of {SCHEMES}")
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    B, n = dW.shape
    sde, tsde, params, name = _resolve(target)
    log_kind = kind in LOG_SCHEMES
    if log_kind and tsde is None:
        raise ValueError(f"{kind} needs a transformed SDE")
    domain = (tsde.source.domain if (tsde is not None and tsde.source is not None) else None) if log_kind \
        else (sde.domain if sde is not None else None)

    if log_kind:
        to_x = tsde.transform.inverse
        state = np.full(B, tsde.y0)
    elif kind in CIR_SCHEMES:
        kappa, lam, theta = _cir_params(params, name)
        to_x = None
        state = np.full(B, sde.initial_value)
    else:
        if sde is None:
            raise ValueError(f"{kind} needs the original SDE")
        to_x = None
        state = np.full(B, sde.initial_value)

    if kind in ("te", "log-te"):
        if trunc is None:
            raise ValueError(f"{kind} needs a TruncationConfig")
        f, g = (tsde.f, tsde.g) if kind == "log-te" else (sde.drift, sde.diffusion)
        radius = l_delta(dt, trunc)
        verify_envelope(f, g, trunc, radius)
    if kind == "log-theta" and theta_cfg is None:
        theta_cfg = ThetaSolveConfig()

    def step(s, dw):
        if kind == "em":
            return step_em(s, sde.drift, sde.diffusion, dt, dw)
        if kind == "log-em":
            return step_em(s, tsde.f, tsde.g, dt, dw)
        if kind in ("te", "log-te"):
            c = np.clip(s, -radius, radius)
            return s + dt * f(c) + g(c) * dw
        if kind == "log-theta":
            return step_theta(s, tsde.f, tsde.g, dt, dw, theta_cfg, df=tsde.df)
        if kind == "sre":
            return sre_cir_step(s, kappa, lam, theta, dt, dw)
        if kind == "lord-ft":
            return lord_ft_step(s, kappa, lam, theta, dt, dw)[0]
        return symmetrized_step(s, kappa, lam, theta, dt, dw)

    def report(s):
        if log_kind:
            return to_x(s)
        if kind == "lord-ft":
            return np.maximum(s, 0.0)
        return s

    aborted = np.zeros(B, dtype=bool)
    violated = np.zeros(B, dtype=bool)
    abort_step = np.full(B, -1, dtype=np.int64)
    if n % record_stride:
        raise ValueError(f"record_stride {record_stride} does not divide {n} steps")
    paths = np.empty((B, n // record_stride + 1)) if record else None
    x = report(state)
    if record:
        paths[:, 0] = x

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(n):
            alive = ~aborted
            if alive.all():
                state = step(state, dW[:, k])
            else:
                nxt = np.full(B, np.nan)
                if alive.any():
                    nxt[alive] = step(state[alive], dW[alive, k])
                state = nxt
            bad = ~np.isfinite(state) & alive
            if bad.any():
                aborted |= bad
                abort_step[bad] = k
                state = np.where(bad, np.nan, state)
            if check_domain or record:
                x = report(state)
                if check_domain and domain is not None:
                    violated |= ~domain.contains(x) & ~aborted
                if record and (k + 1) % record_stride == 0:
                    paths[:, (k + 1) // record_stride] = x
        x = report(state)
    violated |= aborted
    return BatchResult(x, aborted, violated, abort_step, paths)


def simulate(
    scheme_kind: str,
    model_or_tsde,
    grid: BrownianGrid,
    coarsen_factor: int = 1,
    cfg: Optional[TruncationConfig] = None,
    theta_cfg: Optional[ThetaSolveConfig] = None,
) -> Trajectory:
    """Run one scheme on one path at step ``grid.dt * coarsen_factor``; values are in x-space."""
    inc = coarsen(grid, coarsen_factor)
    dt = grid.dt * coarsen_factor
    res = run_batch(scheme_kind, model_or_tsde, inc[None, :], dt, cfg, theta_cfg, record=True)
    if res.aborted[0]:
        raise SimulationAbort(f"{scheme_kind} produced a non-finite state", grid.path_index, int(res.abort_step[0]))
    times = np.arange(len(inc) + 1) * dt
    return Trajectory(times, res.paths[0], scheme_kind)
