"""Numerical Feller test for the boundaries of a scalar diffusion.

With ``L(x) = int_c^x b/sigma^2``, the scale density is ``p'(x) = exp(-2 L(x))``
and

    v(x) = int_c^x p'(y) int_c^y 2 / (p'(z) sigma(z)^2) dz dy.

A boundary is unattainable when ``v`` diverges towards it.  ``v`` is sampled
at 12 points approaching the boundary geometrically and the divergence is
decided by a ratio test on the last samples.

Integrals are accumulated segment by segment between the sample points, with
``L`` and the inner integral cached at segment ends, so each quadrature only
spans one segment.  The outer integrand ``p'(y) * inner(y)`` is evaluated as
``sign * exp(-2 L(y) + log|inner(y)|)`` so the two factors may over- and
underflow separately without spoiling the product.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import IntegrationWarning, quad

from .core import ScalarSde

__all__ = [
    "QuadratureError",
    "FellerReport",
    "scale_density",
    "v_function",
    "classify_boundary",
    "N_SAMPLES",
    "RATIO_DELTA",
]

N_SAMPLES = 12
RATIO_DELTA = 0.05
INNER_RTOL = 1e-10
OUTER_RTOL = 1e-8
_HUGE = 1e300


class QuadratureError(ArithmeticError):
    """Adaptive quadrature failed to converge, or an integrand left the double range."""

    def __init__(self, message: str, achieved: float = float("nan"), overflow: bool = False):
        self.achieved = achieved
        self.overflow = overflow
        super().__init__(message)


class _Overflow(QuadratureError):
    def __init__(self, where: float):
        super().__init__(f"integrand overflows at x={where!r}", overflow=True)


def _quad(fun, a: float, b: float, rtol: float) -> float:
    if a == b:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", IntegrationWarning)
        try:
            val, err = quad(fun, a, b, epsabs=0.0, epsrel=rtol, limit=200)
        except IntegrationWarning as exc:
            val, err = quad(fun, a, b, epsabs=0.0, epsrel=rtol, limit=200, full_output=1)[:2]
            achieved = abs(err / val) if val else float("inf")
            raise QuadratureError(
                f"quadrature on [{a!r}, {b!r}] did not reach rtol {rtol:g} "
                f"(achieved {achieved:.3g}): {str(exc).splitlines()[0]}",
                achieved,
            ) from None
    if not math.isfinite(val):
        raise _Overflow(b)
    return val


class _ScaleIntegrals:
    """``L``, the inner integral ``G`` and ``v`` for one SDE and anchor, with anchor caching."""

    def __init__(self, sde: ScalarSde, c: float):
        if not bool(sde.domain.contains(c)):
            raise ValueError(f"anchor c={c} not inside {sde.domain}")
        self.sde = sde
        self.c = float(c)
        # (x, L(x), G(x)) at cached anchors, nearest one used as the start point
        self._anchors = [(self.c, 0.0, 0.0)]

    def _ratio(self, u: float) -> float:
        s = float(self.sde.diffusion(u))
        if s == 0.0 or not math.isfinite(s):
            raise ValueError(f"diffusion vanishes or is non-finite at x={u!r}")
        return float(self.sde.drift(u)) / (s * s)

    def _nearest(self, x: float):
        return min(self._anchors, key=lambda a: abs(a[0] - x))

    def L(self, x: float, start=None) -> float:
        x0, L0, _ = start or self._nearest(x)
        return L0 + _quad(self._ratio, x0, x, INNER_RTOL)

    def _g_integrand(self, z: float, start) -> float:
        s = float(self.sde.diffusion(z))
        e = 2.0 * self.L(z, start)
        if e > 700:
            raise _Overflow(z)
        return 2.0 * math.exp(e) / (s * s)

    def G(self, y: float, start=None) -> float:
        start = start or self._nearest(y)
        return start[2] + _quad(lambda z: self._g_integrand(z, start), start[0], y, INNER_RTOL)

    def _v_integrand(self, y: float, start) -> float:
        g = self.G(y, start)
        if g == 0.0:
            return 0.0
        e = -2.0 * self.L(y, start) + math.log(abs(g))
        if e > 700:
            raise _Overflow(y)
        return math.copysign(math.exp(e), g)

    def advance(self, x_from: float, x_to: float, v_from: float) -> float:
        """``v(x_to)`` from ``v(x_from)``; caches ``L`` and ``G`` at ``x_to``."""
        start = next(a for a in self._anchors if a[0] == x_from)
        dv = _quad(lambda y: self._v_integrand(y, start), x_from, x_to, OUTER_RTOL)
        self._anchors.append((x_to, self.L(x_to, start), self.G(x_to, start)))
        v = v_from + dv
        if not math.isfinite(v) or abs(v) > _HUGE:
            raise _Overflow(x_to)
        return v


def scale_density(sde: ScalarSde, c: float, x: float) -> float:
    """``exp(-2 int_c^x b/sigma^2)`` by adaptive quadrature (relative tolerance 1e-10)."""
    if not bool(sde.domain.contains(x)):
        raise ValueError(f"x={x} not inside {sde.domain}")
    if x == c:
        return 1.0
    e = -2.0 * _ScaleIntegrals(sde, c).L(float(x))
    if e > 709:
        raise _Overflow(x)
    return math.exp(e)


def v_function(sde: ScalarSde, c: float, x: float) -> float:
    """Nested Feller integral ``v(x)``; 0 at ``x = c``, nonnegative on both sides."""
    if not bool(sde.domain.contains(x)):
        raise ValueError(f"x={x} not inside {sde.domain}")
    if x == c:
        return 0.0
    return _ScaleIntegrals(sde, c).advance(float(c), float(x), 0.0)


@dataclass
class FellerReport:
    boundary: str
    v_samples: np.ndarray
    divergent: bool
    growth_estimate: float
    ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))
    warning: Optional[str] = None
    anchor: float = float("nan")

    @property
    def attainable(self) -> bool:
        return not self.divergent

    def verdict(self) -> str:
        return f"{self.boundary} boundary: {'attainable' if self.attainable else 'unattainable'}"


def _sample_points(sde: ScalarSde, boundary: str, c: float, n: int) -> np.ndarray:
    k = np.arange(1, n + 1, dtype=float)
    if boundary == "lower":
        return c * 2.0**-k
    if sde.domain.is_bounded:
        M = sde.domain.upper
        return M - (M - c) * 2.0**-k
    return c * 2.0**k


def _boundary_coordinate(sde: ScalarSde, boundary: str, x: np.ndarray) -> np.ndarray:
    """``-ln(distance to the boundary)``, with distance ``1/x`` for an infinite boundary."""
    if boundary == "lower":
        return -np.log(x)
    if sde.domain.is_bounded:
        return -np.log(sde.domain.upper - x)
    return np.log(x)


def classify_boundary(sde: ScalarSde, boundary: str, c: Optional[float] = None,
                      n_points: int = N_SAMPLES, delta: float = RATIO_DELTA) -> FellerReport:
    """Attainability of ``boundary`` ("lower" or "upper") by sampling ``v`` towards it.

    ``divergent`` is true when the last three ratios ``v_{k+1}/v_k`` are all
    at least ``1 + delta``.  If an integral overflows the double range the
    report is truncated to the points reached, flagged with a warning, and
    counted as divergent (``v`` exceeds 1e300).  Any other quadrature
    failure truncates the report and the ratio test runs on what remains.
    """
    if boundary not in ("lower", "upper"):
        raise ValueError(f"boundary must be 'lower' or 'upper', got {boundary!r}")
    dom = sde.domain
    if dom.lower == -math.inf:
        raise ValueError("the real line has no finite-distance boundary to classify")
    c = sde.initial_value if c is None else float(c)
    pts = _sample_points(sde, boundary, c, n_points)
    integ = _ScaleIntegrals(sde, c)
    xs, vs = [], []
    warn = None
    overflowed = False
    x_prev, v_prev = c, 0.0
    for x in map(float, pts):
        try:
            v = integ.advance(x_prev, x, v_prev)
        except QuadratureError as exc:
            overflowed = exc.overflow
            warn = f"stopped before x={x!r} after {len(xs)} point(s): {exc}"
            break
        xs.append(x)
        vs.append(v)
        x_prev, v_prev = x, v
    xs_a, vs_a = np.array(xs), np.array(vs)
    ratios = vs_a[1:] / vs_a[:-1] if len(vs_a) > 1 else np.zeros(0)
    divergent = bool(len(ratios) >= 3 and np.all(ratios[-3:] >= 1.0 + delta))
    if overflowed:
        divergent = True
    elif len(ratios) < 3 and warn is not None:
        warn += "; too few points for the ratio test"
    growth = float("nan")
    ok = vs_a > 0
    if ok.sum() >= 2:
        s = _boundary_coordinate(sde, boundary, xs_a[ok])
        growth = float(np.polyfit(s, np.log(vs_a[ok]), 1)[0])
    return FellerReport(
        boundary=boundary,
        v_samples=np.column_stack([xs_a, vs_a]) if len(xs) else np.zeros((0, 2)),
        divergent=divergent,
        growth_estimate=growth,
        ratios=ratios,
        warning=warn,
        anchor=c,
    )
