"""Exact 1-D location probabilities with a probabilistic absorber.

All path counts are Python integers and the step/survival probabilities are
converted to exact rationals (every float is a dyadic rational), so the only
rounding happens in the final ``numerator / denominator`` division, which
Python performs with correct rounding. Pass ``exact=True`` to get the
``Fraction`` itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb
from typing import Sequence, Union

Real = Union[float, int, Fraction]

__all__ = [
    "PathCountContext",
    "CrossingCoefficients",
    "p_free",
    "b_coeff",
    "c_coeff",
    "h_coeff",
    "b_coefficients",
    "c_coefficients",
    "p_inside",
    "p_boundary",
    "p_outside",
    "p_any",
    "placement",
]


@dataclass(frozen=True)
class PathCountContext:
    """Geometry of an ``n``-step query for destination ``x`` with absorber ``m``."""

    x: int
    n: int
    half_gap: int
    eta: int | None

    @classmethod
    def from_query(cls, x: int, n: int, m: int | None = None) -> "PathCountContext":
        if x < 1:
            raise ValueError(f"destination must be positive, got x={x}")
        gap = n - x
        if gap < 0 or gap % 2:
            raise ValueError(f"n - x must be even and non-negative, got n={n}, x={x}")
        eta = None
        if m is not None:
            if m > x:
                eta = m - x
            elif m < 0:
                eta = -m
        return cls(x=x, n=n, half_gap=gap // 2, eta=eta)


@dataclass(frozen=True)
class CrossingCoefficients:
    """Path counts grouped by the number of visits to the absorber site."""

    kind: str  # "b", "c" or "h"
    values: tuple[int, ...]

    def total(self) -> int:
        return sum(self.values)


def _ratio(num: int, den: int) -> int:
    q, rem = divmod(num, den)
    if rem:
        raise ArithmeticError(f"path count {num}/{den} is not an integer")
    return q


def b_coeff(x: int, half_gap: int, i: int) -> int:
    """Number of paths ``0 -> x`` visiting an interior site ``half_gap + 1 - i`` times."""
    if x < 1 or not 0 <= i <= half_gap:
        raise ValueError(f"need x >= 1 and 0 <= i <= half_gap, got x={x}, i={i}, half_gap={half_gap}")
    k = x + half_gap
    return _ratio(2 ** (half_gap - i) * comb(k + i, k) * (k - i), k + i)


def c_coeff(x: int, half_gap: int, eta: int, i: int) -> int:
    """Paths visiting an outside absorber at distance ``eta`` exactly ``half_gap - eta + 1 - i`` times."""
    if eta < 1 or not 0 <= i <= half_gap - eta:
        raise ValueError(
            f"need eta >= 1 and 0 <= i <= half_gap - eta, got eta={eta}, i={i}, half_gap={half_gap}"
        )
    k = x + half_gap + eta
    return _ratio(2 ** (half_gap - eta - i) * comb(k + i, k) * (k - i), k + i)


def h_coeff(x: int, n: int, eta: int) -> int:
    """Paths ``0 -> x`` in ``n`` steps that never touch the outside absorber."""
    if eta < 1:
        raise ValueError(f"eta must be >= 1, got {eta}")
    half_gap = PathCountContext.from_query(x, n).half_gap
    if eta <= half_gap:
        return comb(n, half_gap) - comb(n, half_gap - eta)
    return comb(n, half_gap)


def b_coefficients(x: int, half_gap: int) -> CrossingCoefficients:
    return CrossingCoefficients("b", tuple(b_coeff(x, half_gap, i) for i in range(half_gap + 1)))


def c_coefficients(x: int, half_gap: int, eta: int) -> CrossingCoefficients:
    return CrossingCoefficients(
        "c", tuple(c_coeff(x, half_gap, eta, i) for i in range(half_gap - eta + 1))
    )


def _frac(v: Real, name: str) -> Fraction:
    f = Fraction(v)
    if not 0 <= f <= 1:
        raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return f


def _finish(value: Fraction, exact: bool):
    return value if exact else value.numerator / value.denominator


def _polynomial(weights: Sequence[int], exponents: Sequence[int], survive: Fraction) -> Fraction:
    # sum_i w_i * s^k_i over a common power-of-two denominator; 0**0 == 1 by construction
    if not weights:
        return Fraction(0)
    top = max(exponents)
    a, b = survive.numerator, survive.denominator
    total = 0
    for w, k in zip(weights, exponents):
        total += w * a**k * b ** (top - k)
    return Fraction(total, b**top)


def _step_weight(x: int, n: int, p: Fraction) -> Fraction:
    right = (n + x) // 2
    return p**right * (1 - p) ** (n - right)


def p_free(x: int, n: int, p: Real = 0.5, *, exact: bool = False):
    """Binomial probability of sitting at ``x`` after ``n`` unobstructed steps."""
    if abs(x) > n or (n + x) % 2:
        return _finish(Fraction(0), exact)
    pf = _frac(p, "p")
    return _finish(comb(n, (n + x) // 2) * _step_weight(x, n, pf), exact)


def _reachable(x: int, n: int) -> bool:
    return n >= x and (n - x) % 2 == 0


def p_inside(x: int, n: int, p: Real, q: Real, *, exact: bool = False):
    """Absorber strictly between origin and ``x``; the result does not depend on where."""
    if not _reachable(x, n):
        return _finish(Fraction(0), exact)
    ctx = PathCountContext.from_query(x, n)
    h = ctx.half_gap
    coeffs = b_coefficients(x, h).values
    poly = _polynomial(coeffs, [h + 1 - i for i in range(h + 1)], 1 - _frac(q, "q"))
    return _finish(_step_weight(x, n, _frac(p, "p")) * poly, exact)


def p_boundary(x: int, n: int, p: Real, q: Real, *, exact: bool = False):
    """Absorber on the origin or on ``x``; start and final arrival are not absorbed."""
    if not _reachable(x, n):
        return _finish(Fraction(0), exact)
    ctx = PathCountContext.from_query(x, n)
    h = ctx.half_gap
    coeffs = b_coefficients(x, h).values
    poly = _polynomial(coeffs, [h - i for i in range(h + 1)], 1 - _frac(q, "q"))
    return _finish(_step_weight(x, n, _frac(p, "p")) * poly, exact)


def p_outside(x: int, n: int, p: Real, q: Real, m: int, *, exact: bool = False):
    """Absorber beyond ``x`` (``m > x``) or behind the origin (``m < 0``)."""
    if not (m > x or m < 0):
        raise ValueError(f"absorber m={m} is not outside [0, {x}]")
    if not _reachable(x, n):
        return _finish(Fraction(0), exact)
    if n < abs(2 * m - x):
        return p_free(x, n, p, exact=exact)
    ctx = PathCountContext.from_query(x, n, m)
    h, eta = ctx.half_gap, ctx.eta
    coeffs = c_coefficients(x, h, eta).values
    exps = [h - eta + 1 - i for i in range(h - eta + 1)]
    poly = h_coeff(x, n, eta) + _polynomial(coeffs, exps, 1 - _frac(q, "q"))
    return _finish(_step_weight(x, n, _frac(p, "p")) * poly, exact)


def placement(x: int, m: int) -> str:
    """Classify the absorber relative to the interval ``[0, x]`` for ``x >= 1``."""
    if 0 < m < x:
        return "inside"
    if m in (0, x):
        return "boundary"
    return "outside"


def p_any(x: int, n: int, p: Real, q: Real, m: int, *, exact: bool = False, charge_arrival: bool = False):
    """Dispatch to the closed form matching the absorber placement.

    Negative destinations are mirrored (``x -> -x``, ``p -> 1 - p``,
    ``m -> -m``). ``x = 0`` is only defined for ``n = 0``, where the initial
    placement is never absorbed. With ``charge_arrival`` the final arrival
    onto an absorber at ``x`` is charged too, which multiplies the boundary
    form by ``1 - q``.
    """
    if x < 0:
        return p_any(-x, n, 1 - Fraction(p), q, -m, exact=exact, charge_arrival=charge_arrival)
    if x == 0:
        if n == 0:
            return _finish(Fraction(1), exact)
        raise ValueError("closed forms cover x != 0 only (x = 0 is defined for n = 0)")
    kind = placement(x, m)
    if kind == "inside":
        return p_inside(x, n, p, q, exact=exact)
    if kind == "boundary":
        if charge_arrival and m == x and n > 0:
            value = (1 - _frac(q, "q")) * p_boundary(x, n, p, q, exact=True)
            return _finish(value, exact)
        return p_boundary(x, n, p, q, exact=exact)
    return p_outside(x, n, p, q, m, exact=exact)
