"""Scalar SDEs on open intervals and the transforms that map them onto the real line.

An SDE ``dx = b(x) dt + sigma(x) dW`` living on ``(0, inf)`` or ``(0, M)`` is
pushed through ``y = ln x`` (or the logit ``y = ln x - ln(M - x)``) by the Ito
formula.  The transformed equation ``dy = f(y) dt + g(y) dW`` lives on the
whole line, so any finite numerical approximation of ``y`` maps back to a
point strictly inside the original domain.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

Coefficient = Callable[[np.ndarray], np.ndarray]

__all__ = [
    "Domain",
    "DomainError",
    "NonFiniteCoefficientError",
    "ScalarSde",
    "TransformKind",
    "DomainTransform",
    "TransformedSde",
    "identity_transform",
    "log_map",
    "logit_map",
    "ito_compose",
    "log_transform",
    "logit_transform",
    "map_trajectory",
]


class DomainError(ValueError):
    """An SDE, transform or value does not match the required domain."""


class NonFiniteCoefficientError(FloatingPointError):
    """A drift or diffusion evaluation returned inf or nan."""

    def __init__(self, what: str, y):
        self.y = y
        super().__init__(f"non-finite {what} coefficient at y={y!r}")


@dataclass(frozen=True)
class Domain:
    """Open interval ``(lower, upper)``.

    Only ``(0, inf)``, ``(0, M)`` with finite ``M > 0`` and ``(-inf, inf)``
    are representable.
    """

    lower: float = 0.0
    upper: float = math.inf

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        ok = (lo == 0.0 and (hi == math.inf or (math.isfinite(hi) and hi > 0))) or (
            lo == -math.inf and hi == math.inf
        )
        if not ok:
            raise DomainError(
                f"unsupported domain ({lo}, {hi}); expected (0, inf), (0, M) or (-inf, inf)"
            )
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def positive(cls) -> "Domain":
        return cls(0.0, math.inf)

    @classmethod
    def bounded(cls, upper: float) -> "Domain":
        return cls(0.0, upper)

    @classmethod
    def real_line(cls) -> "Domain":
        return cls(-math.inf, math.inf)

    @property
    def is_positive_half_line(self) -> bool:
        return self.lower == 0.0 and self.upper == math.inf

    @property
    def is_bounded(self) -> bool:
        return self.lower == 0.0 and math.isfinite(self.upper)

    def contains(self, x) -> np.ndarray:
        """Elementwise strict membership; nan is never inside."""
        x = np.asarray(x, dtype=float)
        return (x > self.lower) & (x < self.upper)

    def __str__(self) -> str:
        return f"({self.lower:g}, {self.upper:g})"


@dataclass(frozen=True)
class ScalarSde:
    """``dx = drift(x) dt + diffusion(x) dW`` on an open domain, started at ``initial_value``.

    Coefficients must accept numpy arrays (they are evaluated across paths).
    """

    drift: Coefficient
    diffusion: Coefficient
    domain: Domain
    initial_value: float
    name: str = "sde"

    def __post_init__(self):
        if not bool(self.domain.contains(self.initial_value)):
            raise DomainError(
                f"initial value {self.initial_value} not strictly inside {self.domain}"
            )


class TransformKind(enum.Enum):
    LOG = "log"
    LOGIT = "logit"
    IDENTITY = "identity"


@dataclass(frozen=True)
class DomainTransform:
    """Smooth bijection ``forward: domain -> R`` with its inverse.

    ``d1`` and ``d2`` are the first and second derivatives of ``forward`` (used
    by the Ito formula); ``inverse_d1`` is the derivative of ``inverse`` (used
    for changes of variable in quadrature).
    """

    kind: TransformKind
    forward: Callable
    inverse: Callable
    d1: Callable
    d2: Callable
    inverse_d1: Callable
    M: Optional[float] = None

    @property
    def domain(self) -> Domain:
        if self.kind is TransformKind.LOG:
            return Domain.positive()
        if self.kind is TransformKind.LOGIT:
            return Domain.bounded(self.M)
        return Domain.real_line()


def identity_transform() -> DomainTransform:
    one = lambda x: np.ones_like(np.asarray(x, dtype=float))
    zero = lambda x: np.zeros_like(np.asarray(x, dtype=float))
    ident = lambda x: np.asarray(x, dtype=float) * 1.0
    return DomainTransform(TransformKind.IDENTITY, ident, ident, one, zero, one)


_TINY = np.nextafter(0.0, 1.0)
_HUGE = np.finfo(float).max


def _exp_inside(y):
    # exp saturated to the positive doubles, so every finite y maps strictly inside (0, inf)
    with np.errstate(over="ignore", under="ignore"):
        return np.clip(np.exp(y), _TINY, _HUGE)


def log_map() -> DomainTransform:
    return DomainTransform(
        TransformKind.LOG,
        forward=np.log,
        inverse=_exp_inside,
        d1=lambda x: 1.0 / x,
        d2=lambda x: -1.0 / (x * x),
        inverse_d1=np.exp,
    )


def logit_map(M: float) -> DomainTransform:
    M = float(M)
    if not (M > 0 and math.isfinite(M)):
        raise DomainError(f"logit transform needs finite M > 0, got {M}")

    def forward(x):
        x = np.asarray(x, dtype=float)
        return np.log(x) - np.log(M - x)

    upper = np.nextafter(M, 0.0)

    def inverse(y):
        # M - M/(1+e^y) written so neither branch overflows, then kept off both endpoints
        y = np.asarray(y, dtype=float)
        return np.clip(M * _expit(y), _TINY, upper)

    def inverse_d1(y):
        s = _expit(np.asarray(y, dtype=float))
        return M * s * (1.0 - s)

    return DomainTransform(
        TransformKind.LOGIT,
        forward=forward,
        inverse=inverse,
        d1=lambda x: M / (x * (M - x)),
        d2=lambda x: -1.0 / (x * x) + 1.0 / ((M - x) * (M - x)),
        inverse_d1=inverse_d1,
        M=M,
    )


def _expit(y: np.ndarray) -> np.ndarray:
    with np.errstate(under="ignore"):
        e = np.exp(-np.abs(y))
    out = np.where(y >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class TransformedSde:
    """``dy = f(y) dt + g(y) dW`` on the real line, obtained from a source SDE.

    ``df`` is the derivative of ``f`` when known in closed form (the implicit
    theta solver uses it; otherwise a finite difference is taken).
    ``closed_form`` records whether ``f``/``g`` are hand-coded formulas or a
    generic numeric composition.
    """

    f: Coefficient
    g: Coefficient
    transform: DomainTransform
    y0: float
    source: Optional[ScalarSde] = None
    df: Optional[Coefficient] = None
    closed_form: bool = False

    def coefficients(self, y):
        """Evaluate ``(f(y), g(y))``, raising on any non-finite output."""
        y = np.asarray(y, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            fy = np.asarray(self.f(y), dtype=float)
            gy = np.asarray(self.g(y), dtype=float)
        for name, val in (("drift", fy), ("diffusion", gy)):
            bad = ~np.isfinite(val)
            if np.any(bad):
                where = y[bad].flat[0] if y.ndim else float(y)
                raise NonFiniteCoefficientError(name, float(where))
        return fy, gy

    def with_coefficients(self, f, g, df=None, closed_form=True) -> "TransformedSde":
        return replace(self, f=f, g=g, df=df, closed_form=closed_form)


def ito_compose(sde: ScalarSde, transform: DomainTransform):
    """Generic coefficients of ``y = forward(x)`` by the Ito chain rule.

    ``f(y) = phi'(x) b(x) + phi''(x) sigma(x)^2 / 2`` and ``g(y) = phi'(x) sigma(x)``
    with ``x = inverse(y)``.
    """
    b, s = sde.drift, sde.diffusion
    inv, d1, d2 = transform.inverse, transform.d1, transform.d2

    def f(y):
        x = inv(y)
        sx = s(x)
        return d1(x) * b(x) + 0.5 * d2(x) * sx * sx

    def g(y):
        x = inv(y)
        return d1(x) * s(x)

    return f, g


def log_transform(sde: ScalarSde) -> TransformedSde:
    """Push an SDE on ``(0, inf)`` through ``y = ln x``.

    ``f(y) = e^{-y} b(e^y) - e^{-2y} sigma(e^y)^2 / 2`` and ``g(y) = e^{-y} sigma(e^y)``.
    """
    if not sde.domain.is_positive_half_line:
        raise DomainError(f"log transform needs domain (0, inf), got {sde.domain}")
    b, s = sde.drift, sde.diffusion

    def f(y):
        x = np.exp(y)
        ex = np.exp(-y)
        sx = s(x)
        return ex * b(x) - 0.5 * ex * ex * sx * sx

    def g(y):
        return np.exp(-y) * s(np.exp(y))

    return TransformedSde(f, g, log_map(), math.log(sde.initial_value), source=sde)


def logit_transform(sde: ScalarSde, M: float) -> TransformedSde:
    """Push an SDE on ``(0, M)`` through ``y = ln x - ln(M - x)``."""
    M = float(M)
    if not M > 0:
        raise DomainError(f"logit transform needs M > 0, got {M}")
    if not (sde.domain.is_bounded and sde.domain.upper == M):
        raise DomainError(f"logit transform with M={M} needs domain (0, {M}), got {sde.domain}")
    tr = logit_map(M)
    f, g = ito_compose(sde, tr)
    x0 = sde.initial_value
    return TransformedSde(f, g, tr, float(tr.forward(x0)), source=sde)


def map_trajectory(values, transform: DomainTransform) -> np.ndarray:
    """Map y-space values back to the source domain, pointwise."""
    return np.asarray(transform.inverse(np.asarray(values, dtype=float)), dtype=float)
