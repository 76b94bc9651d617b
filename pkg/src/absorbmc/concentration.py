"""Concentration under instantaneous and constant continuous emission."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .model_fit import FitParams, model_eval

__all__ = [
    "EmissionMode",
    "EmissionSpec",
    "SteadyStateValidity",
    "DivergentRegimeError",
    "upper_incomplete_gamma",
    "steady_state_validity",
    "conc_instant",
    "conc_continuous",
    "conc_steady",
]

_EPS = 1e-16
_TINY = 1e-300
_MAX_TERMS = 10_000


class EmissionMode(str, enum.Enum):
    INSTANTANEOUS = "instantaneous"
    CONTINUOUS = "continuous-constant"


@dataclass(frozen=True)
class EmissionSpec:
    """``amount`` is N molecules (instantaneous) or Q molecules per unit time."""

    mode: EmissionMode
    amount: float

    def __post_init__(self):
        object.__setattr__(self, "mode", EmissionMode(self.mode))
        if self.amount < 0:
            raise ValueError(f"emission amount must be >= 0, got {self.amount}")


@dataclass(frozen=True)
class SteadyStateValidity:
    shape: float
    valid: bool


class DivergentRegimeError(ValueError):
    """Continuous emission has no finite steady state for these parameters."""

    def __init__(self, validity: SteadyStateValidity, dimension: int):
        self.validity = validity
        threshold = (2 - dimension) / 2
        super().__init__(
            f"steady state diverges: need gamma > {threshold:g} in {dimension}-D "
            f"(shape gamma - (2-d)/2 = {validity.shape:.6g} <= 0)"
        )


def _lower_series(s: float, x: float) -> float:
    # gamma(s, x) = x^s e^-x sum_k x^k / (s (s+1) ... (s+k))
    term = 1.0 / s
    total = term
    a = s
    for _ in range(_MAX_TERMS):
        a += 1.0
        term *= x / a
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    else:
        raise ArithmeticError(f"incomplete gamma series did not converge for s={s}, x={x}")
    return total * math.exp(s * math.log(x) - x)


def _upper_fraction(s: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Gamma(s, x)
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_TERMS):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    else:
        raise ArithmeticError(f"incomplete gamma fraction did not converge for s={s}, x={x}")
    return math.exp(s * math.log(x) - x) * h


def upper_incomplete_gamma(s: float, x: float) -> float:
    """Upper incomplete gamma ``Gamma(s, x)`` for ``s > 0`` and ``x >= 0``."""
    if not s > 0:
        raise ValueError(f"upper incomplete gamma needs s > 0, got s={s}")
    if x < 0:
        raise ValueError(f"upper incomplete gamma needs x >= 0, got x={x}")
    if x == 0:
        return math.gamma(s)
    if x < s + 1.0:
        return math.gamma(s) - _lower_series(s, x)
    return _upper_fraction(s, x)


def steady_state_validity(params: FitParams, d: int) -> SteadyStateValidity:
    shape = params.gamma - (2 - d) / 2
    return SteadyStateValidity(shape, shape > 0)


def conc_instant(params: FitParams, N: float, r: float, t, D: float, d: int):
    """Concentration after releasing ``N`` molecules at the origin at t = 0."""
    return N * model_eval(params, r, t, D, d)


def _prefactor(params: FitParams, Q: float, r: float, D: float, d: int, shape: float) -> float:
    return params.alpha * Q / ((4 * math.pi) ** (d / 2) * D) * r ** (2 - d) * (4 * params.beta) ** shape


def _checked_shape(params: FitParams, d: int) -> float:
    v = steady_state_validity(params, d)
    if not v.valid:
        raise DivergentRegimeError(v, d)
    return v.shape


def conc_continuous(params: FitParams, Q: float, r: float, t: float, D: float, d: int) -> float:
    """Concentration at time ``t`` under a constant release rate ``Q`` started at t = 0."""
    if not t > 0:
        raise ValueError("t must be positive")
    if params.alpha == 0.0 or Q == 0.0:
        return 0.0
    shape = _checked_shape(params, d)
    arg = r * r / (4 * D * params.beta * t)
    return _prefactor(params, Q, r, D, d, shape) * upper_incomplete_gamma(shape, arg)


def conc_steady(params: FitParams, Q: float, r: float, D: float, d: int) -> float:
    """Long-time limit of :func:`conc_continuous`."""
    if params.alpha == 0.0 or Q == 0.0:
        return 0.0
    shape = _checked_shape(params, d)
    return _prefactor(params, Q, r, D, d, shape) * math.gamma(shape)

