"""Model zoo: CIR, CEV, GLE (Ginzburg-Landau), generalised Ait-Sahalia and SIS.

Each model carries its original coefficients, the hand-coded transformed
coefficients, the growth exponent used by the truncation envelope and, where
the moment condition ``y f(y) + (p-1)/2 g(y)^2 <= K p^m`` holds with ``m < 2``,
the exponent ``m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np

from .core import Domain, ScalarSde, TransformedSde, log_map, logit_map
from .schemes import TruncationConfig, default_truncation

__all__ = [
    "MODEL_PARAMS",
    "ParameterError",
    "ModelSpec",
    "build_model",
    "raw_sde",
    "gle_exact_terminal",
    "gle_exact_paths",
    "ProbeResult",
    "assumption_probe",
]

MODEL_PARAMS = {
    "CIR": ("kappa", "lambda", "theta", "x0"),
    "CEV": ("kappa", "lambda", "theta", "alpha", "x0"),
    "GLE": ("lambda", "sigma", "x0"),
    "AitSahalia": ("a_m1", "a0", "a1", "a2", "r", "rho", "sigma", "x0"),
    "SIS": ("beta", "M", "mu", "gamma", "sigma", "I0"),
}

# radius at dt = 1 for the default truncation; see default_truncation()
_BASE_RADIUS = {"CIR": 5.0, "CEV": 4.0, "GLE": 3.0, "AitSahalia": 3.0, "SIS": 5.0}


class ParameterError(ValueError):
    """Model parameters violate a validity condition."""


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    params: Mapping[str, float]
    sde: ScalarSde
    transformed: TransformedSde
    beta_growth: float
    m_exponent: Optional[float] = None
    base_radius: float = 1.0

    @property
    def domain(self) -> Domain:
        return self.sde.domain

    @property
    def x0(self) -> float:
        return self.sde.initial_value

    def default_truncation(self, epsilon: float = 0.05, base_radius: Optional[float] = None) -> TruncationConfig:
        """Truncation for the transformed coefficients (log-te)."""
        r = self.base_radius if base_radius is None else base_radius
        t = self.transformed
        return default_truncation(t.f, t.g, self.beta_growth, epsilon, r)

    def default_x_truncation(self, epsilon: float = 0.05, base_radius: Optional[float] = None) -> TruncationConfig:
        """Truncation for the original coefficients (te in x-space)."""
        r = self.base_radius if base_radius is None else base_radius
        return default_truncation(self.sde.drift, self.sde.diffusion, self.beta_growth, epsilon, r)


def _need(name, params):
    keys = MODEL_PARAMS.get(name)
    if keys is None:
        raise ParameterError(f"unknown model {name!r}; expected one of {sorted(MODEL_PARAMS)}")
    missing = [k for k in keys if k not in params]
    if missing:
        raise ParameterError(f"{name}: missing parameter(s) {', '.join(missing)}")
    extra = [k for k in params if k not in keys]
    if extra:
        raise ParameterError(f"{name}: unknown parameter(s) {', '.join(extra)}")
    return {k: float(params[k]) for k in keys}


def _positive(name, p, *keys):
    for k in keys:
        if not p[k] > 0:
            raise ParameterError(f"{name}: {k} > 0 required, got {p[k]}")


def _cir(p):
    k, l, th = p["kappa"], p["lambda"], p["theta"]
    b = lambda x: k * (l - x)
    s = lambda x: th * np.sqrt(x)  # nan for x < 0: x-space EM aborts there
    c = k * l - 0.5 * th * th
    f = lambda y: c * np.exp(-y) - k
    g = lambda y: th * np.exp(-0.5 * y)
    df = lambda y: -c * np.exp(-y)
    return b, s, f, g, df


def _cev(p):
    k, l, th, a = p["kappa"], p["lambda"], p["theta"], p["alpha"]
    q = 1.0 - a
    b = lambda x: k * (l - x)
    s = lambda x: th * np.power(x, a)
    f = lambda y: k * l * np.exp(-y) - 0.5 * th * th * np.exp(-2 * q * y) - k
    g = lambda y: th * np.exp(-q * y)
    df = lambda y: -k * l * np.exp(-y) + th * th * q * np.exp(-2 * q * y)
    return b, s, f, g, df


def _gle(p):
    l, sg = p["lambda"], p["sigma"]
    b = lambda x: -x**3 + (l + 0.5 * sg * sg) * x
    s = lambda x: sg * x
    f = lambda y: -np.exp(2 * y) + l
    g = lambda y: np.full_like(np.asarray(y, dtype=float), sg)
    df = lambda y: -2 * np.exp(2 * y)
    return b, s, f, g, df


def _ait_sahalia(p):
    am1, a0, a1, a2, r, rho, sg = (p[k] for k in ("a_m1", "a0", "a1", "a2", "r", "rho", "sigma"))
    b = lambda x: am1 / x - a0 + a1 * x - a2 * np.power(x, r)
    s = lambda x: sg * np.power(x, rho)

    def f(y):
        return (
            am1 * np.exp(-2 * y)
            - a0 * np.exp(-y)
            + a1
            - a2 * np.exp((r - 1) * y)
            - 0.5 * sg * sg * np.exp(2 * (rho - 1) * y)
        )

    g = lambda y: sg * np.exp((rho - 1) * y)

    def df(y):
        return (
            -2 * am1 * np.exp(-2 * y)
            + a0 * np.exp(-y)
            - (r - 1) * a2 * np.exp((r - 1) * y)
            - sg * sg * (rho - 1) * np.exp(2 * (rho - 1) * y)
        )

    return b, s, f, g, df


def _sis(p):
    be, M, mu, ga, sg = p["beta"], p["M"], p["mu"], p["gamma"], p["sigma"]
    vs = be * M - mu - ga
    s2 = sg * sg * M * M
    b = lambda x: vs * x - be * x * x
    s = lambda x: sg * x * (M - x)

    def f(y):
        # sigma^2 M^2 / (1 + e^y) via the logistic of -y, overflow-free
        e = np.exp(-np.abs(y))
        inv1p = np.where(y >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
        return vs - (mu + ga) * np.exp(y) + 0.5 * s2 - s2 * inv1p

    g = lambda y: np.full_like(np.asarray(y, dtype=float), sg * M)

    def df(y):
        e = np.exp(-np.abs(y))
        w = e / (1.0 + e) ** 2
        return -(mu + ga) * np.exp(y) + s2 * w

    return b, s, f, g, df


_BUILDERS = {"CIR": _cir, "CEV": _cev, "GLE": _gle, "AitSahalia": _ait_sahalia, "SIS": _sis}


def _check(name, p):
    if name == "CIR":
        _positive(name, p, "kappa", "lambda", "theta", "x0")
        if 2 * p["kappa"] * p["lambda"] < p["theta"] ** 2:
            raise ParameterError(
                f"CIR: 2*kappa*lambda < theta^2 ({2 * p['kappa'] * p['lambda']:g} < "
                f"{p['theta'] ** 2:g}): boundary 0 attainable"
            )
    elif name == "CEV":
        _positive(name, p, "kappa", "lambda", "theta", "x0")
        if not 0.5 < p["alpha"] < 1:
            raise ParameterError(f"CEV: alpha in (1/2, 1) required, got {p['alpha']}")
    elif name == "GLE":
        _positive(name, p, "lambda", "sigma", "x0")
    elif name == "AitSahalia":
        _positive(name, p, "a_m1", "a0", "a1", "a2", "sigma", "x0")
        if not p["r"] > 1:
            raise ParameterError(f"AitSahalia: r > 1 required, got {p['r']}")
        if not p["rho"] > 1:
            raise ParameterError(f"AitSahalia: rho > 1 required, got {p['rho']}")
        if not p["r"] > 2 * p["rho"] - 1:
            raise ParameterError(
                f"AitSahalia: r > 2*rho - 1 required ({p['r']:g} <= {2 * p['rho'] - 1:g})"
            )
    elif name == "SIS":
        _positive(name, p, "beta", "M", "mu", "gamma", "sigma")
        if not 0 < p["I0"] < p["M"]:
            raise ParameterError(f"SIS: I0 in (0, M) required, got I0={p['I0']}, M={p['M']}")


def _m_exponent(name, p) -> Optional[float]:
    if name == "CEV":
        a = p["alpha"]
        return 1 + 2 * (1 - a) / (2 * a - 1) if a > 0.75 else None
    if name == "AitSahalia":
        r, rho = p["r"], p["rho"]
        return 1 + 2 * (rho - 1) / (r - 2 * rho + 1) if r > 4 * rho - 3 else None
    if name in ("GLE", "SIS"):
        return 1.0
    return None


def _beta_growth(name, p) -> float:
    if name == "AitSahalia":
        return max(2.0, p["r"] - 1, 2 * (p["rho"] - 1))
    return {"CIR": 1.0, "CEV": 1.0, "GLE": 2.0, "SIS": 1.0}[name]


def raw_sde(name: str, params: Mapping[str, float]) -> ScalarSde:
    """The original SDE without the parameter-validity checks (e.g. CIR with ``2 kappa lambda < theta^2``)."""
    p = _need(name, params)
    b, s, *_ = _BUILDERS[name](p)
    if name == "SIS":
        return ScalarSde(b, s, Domain.bounded(p["M"]), p["I0"], name)
    return ScalarSde(b, s, Domain.positive(), p["x0"], name)


def build_model(name: str, params: Mapping[str, float]) -> ModelSpec:
    """Validate parameters and assemble a model with its closed-form transformed coefficients."""
    p = _need(name, params)
    _check(name, p)
    b, s, f, g, df = _BUILDERS[name](p)
    if name == "SIS":
        sde = ScalarSde(b, s, Domain.bounded(p["M"]), p["I0"], name)
        tr = logit_map(p["M"])
    else:
        sde = ScalarSde(b, s, Domain.positive(), p["x0"], name)
        tr = log_map()
    y0 = float(tr.forward(sde.initial_value))
    tsde = TransformedSde(f, g, tr, y0, source=sde, df=df, closed_form=True)
    return ModelSpec(
        name=name,
        params=MappingProxyType(dict(p)),
        sde=sde,
        transformed=tsde,
        beta_growth=_beta_growth(name, p),
        m_exponent=_m_exponent(name, p),
        base_radius=_BASE_RADIUS[name],
    )


# --------------------------------------------------------------------------
# GLE exact solution


def gle_exact_paths(W: np.ndarray, dt: float, lam: float, sigma: float, x0: float, terminal_only: bool = True):
    """Exact GLE solution driven by Brownian values ``W`` on a uniform grid (rows are paths).

    The time integral is the left-point Riemann sum on the same grid,
    accumulated in log space.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    n = W.shape[1] - 1
    t = np.arange(n + 1) * dt
    expo = 2 * lam * t[None, :] + 2 * sigma * W
    log2x0sq = math.log(2 * x0 * x0)
    if terminal_only:
        m = expo[:, :n].max(axis=1, keepdims=True)
        logR = (m[:, 0] + np.log(np.exp(expo[:, :n] - m).sum(axis=1))) + math.log(dt) if n else np.full(W.shape[0], -np.inf)
        logx = math.log(x0) + lam * t[-1] + sigma * W[:, -1] - 0.5 * np.logaddexp(0.0, log2x0sq + logR)
        return np.exp(logx)
    logR = np.full(W.shape, -np.inf)
    if n:
        logR[:, 1:] = np.logaddexp.accumulate(expo[:, :n], axis=1) + math.log(dt)
    logx = math.log(x0) + lam * t[None, :] + sigma * W - 0.5 * np.logaddexp(0.0, log2x0sq + logR)
    return np.exp(logx)


def gle_exact_terminal(path, lam: float, sigma: float, x0: float, T: float) -> float:
    """Exact GLE value at ``T`` along a BrownianGrid, Riemann sum at the grid's own resolution."""
    if not math.isclose(path.T, T, rel_tol=1e-12):
        raise ValueError(f"path horizon {path.T} differs from T={T}")
    if path.dt > 2.0**-12 * T * (1 + 1e-12):
        raise ValueError(f"path too coarse: dt={path.dt} > 2^-12 T")
    return float(gle_exact_paths(path.path()[None, :], path.dt, lam, sigma, x0)[0])


# --------------------------------------------------------------------------
# moment-condition probe


@dataclass
class ProbeResult:
    p: np.ndarray
    S: np.ndarray
    argmax_y: np.ndarray
    censored: np.ndarray
    m_hat: Optional[float]
    K_hat: Optional[float]
    exponential: bool
    rss_power: float = float("nan")
    rss_exp: float = float("nan")
    note: str = ""
    fitted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def ok(self) -> bool:
        return self.m_hat is not None and not self.exponential


def _linfit(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    rss = float(np.sum((A @ coef - y) ** 2))
    return float(coef[0]), float(coef[1]), rss


def assumption_probe(tsde: TransformedSde, y_grid=None, p_grid=None) -> ProbeResult:
    """Grid estimate of ``S(p) = sup_y y f(y) + (p-1)/2 g(y)^2`` and its growth in ``p``.

    A power law ``S = K p^m`` is fitted by least squares of ``log S`` on
    ``log p``.  The exponential flag is raised when ``log S`` is better
    explained as linear in ``p``.  Values of ``p`` whose maximiser sits on
    the edge of the y-grid are censored (the true supremum lies outside the
    grid) and excluded from both fits when at least three uncensored values
    remain.
    """
    y = np.linspace(-30.0, 30.0, 2001) if y_grid is None else np.asarray(y_grid, dtype=float)
    p = np.array([2.0**k for k in range(2, 11)]) if p_grid is None else np.asarray(p_grid, dtype=float)
    if np.any(p <= 2):
        raise ValueError("p values must exceed 2")
    fy, gy = tsde.coefficients(y)
    base = y * fy
    g2 = gy * gy
    S = np.empty_like(p)
    arg = np.empty_like(p)
    for i, pi in enumerate(p):
        v = base + 0.5 * (pi - 1.0) * g2
        j = int(np.argmax(v))
        S[i], arg[i] = v[j], y[j]
    censored = (arg == y.min()) | (arg == y.max())
    use = ~censored
    note = ""
    if use.sum() < 3:
        use = np.ones_like(censored)
        if censored.any():
            note = "supremum on the grid edge; fit uses all points"
    if np.any(S[use] <= 0):
        return ProbeResult(p, S, arg, censored, None, None, False, note="S(p) <= 0 for some p; no power fit", fitted=use)
    lp, lS = np.log(p[use]), np.log(S[use])
    m, c, rss_pow = _linfit(lp, lS)
    _, _, rss_exp = _linfit(p[use], lS)
    exponential = bool(use.sum() >= 3 and rss_exp < rss_pow)
    return ProbeResult(p, S, arg, censored, m, math.exp(c), exponential, rss_pow, rss_exp, note, use)
