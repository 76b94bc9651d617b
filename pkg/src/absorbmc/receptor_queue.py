"""Single receptor as an M/M/1/1 loss queue coupled to the channel.

A busy receptor cannot capture, so the effective absorption probability is
the probability the receptor is free, ``q = mu / (lambda_in + mu)``. The
arrival rate itself depends on ``q`` through the fitted channel parameters,
which makes the steady state a fixed point in ``q``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from ._parallel import max_workers
from .concentration import conc_steady
from .model_fit import ParamTable, interp_params

log = logging.getLogger(__name__)

__all__ = [
    "ReceptorSpec",
    "QueueSolution",
    "TableDomainError",
    "blocking_q",
    "arrival_rate",
    "solve_fixed_point",
    "sweep_queue",
]

OSCILLATION_WINDOW = 10


class TableDomainError(ValueError):
    """The fixed-point iteration left the q range covered by the parameter table."""


@dataclass(frozen=True)
class ReceptorSpec:
    T_trafficking: float
    site: tuple[int, ...]
    kappa: float = 1.0

    def __post_init__(self):
        if not self.T_trafficking > 0:
            raise ValueError(f"T_trafficking must be positive, got {self.T_trafficking}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        object.__setattr__(self, "site", tuple(int(c) for c in self.site))

    @property
    def mu(self) -> float:
        return 1.0 / self.T_trafficking


@dataclass(frozen=True)
class QueueSolution:
    Q: float
    T_trafficking: float
    q: float
    lambda_in: float
    lambda_a: float
    p_b: float
    iterations: int
    residual: float
    converged: bool
    method: str = "damped"
    trace: tuple[float, ...] = ()


def blocking_q(lambda_in: float, mu: float) -> float:
    """Probability the receptor is free: ``mu / (lambda_in + mu)``."""
    if lambda_in < 0:
        raise ValueError(f"lambda_in must be >= 0, got {lambda_in}")
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    return mu / (lambda_in + mu)


def arrival_rate(Q: float, spec: ReceptorSpec, table: ParamTable, q: float, D: float, d: int) -> float:
    """``kappa`` times the steady-state concentration at the receptor site."""
    if not table.q[0] <= q <= table.q[-1]:
        raise TableDomainError(f"q={q:.10g} outside the parameter table range [{table.q[0]}, {table.q[-1]}]")
    r = math.sqrt(sum(c * c for c in spec.site)) * table.cfg.delta
    return spec.kappa * conc_steady(interp_params(table, q), Q, r, D, d)


def _check_table(spec: ReceptorSpec, table: ParamTable):
    if tuple(table.site) != spec.site or tuple(table.absorber) != spec.site:
        raise ValueError(
            f"parameter table is for x={table.site}, m={table.absorber}; receptor sits at {spec.site}"
        )
    if table.q[-1] != 1.0:
        raise TableDomainError("parameter table must include q = 1 (the free-receptor start)")


def solve_fixed_point(
    Q: float,
    spec: ReceptorSpec,
    table: ParamTable,
    D: float,
    d: int,
    tol: float = 1e-8,
    max_iter: int = 500,
    omega: float = 0.5,
) -> QueueSolution:
    """Solve ``q = mu / (lambda_in(q) + mu)`` by damped iteration from ``q = 1``.

    Convergence is declared when ``|q - F(q)| <= tol * min(1, q)``, which
    keeps ``lambda_a = q lambda_in`` within rounding of ``mu`` deep in
    saturation. If the sign of ``F(q) - q`` alternates over the last
    iterations the solver switches to bisection on the bracketing pair.
    """
    if not 0 < omega <= 1:
        raise ValueError(f"damping must lie in (0, 1], got {omega}")
    if Q < 0:
        raise ValueError(f"Q must be >= 0, got {Q}")
    _check_table(spec, table)
    mu = spec.mu
    q_min = table.q[0]

    def F(q):
        lam = arrival_rate(Q, spec, table, q, D, d)
        return blocking_q(lam, mu), lam

    def done(q, res):
        return res <= tol * min(1.0, q)

    q = 1.0
    trace = [q]
    signs = []
    best = (math.inf, q)
    lo = hi = None  # g(lo) > 0 > g(hi)
    method = "damped"
    it = 0
    while it < max_iter:
        it += 1
        f, lam = F(q)
        g = f - q
        res = abs(g)
        if res < best[0]:
            best = (res, q)
        if done(q, res):
            return _solution(Q, spec, q, lam, it, res, True, method, trace)
        if g > 0:
            lo = q if lo is None or q > lo else lo
        else:
            hi = q if hi is None or q < hi else hi
        signs.append(g > 0)
        flips = sum(a != b for a, b in zip(signs[-OSCILLATION_WINDOW:], signs[-OSCILLATION_WINDOW + 1 :]))
        if method == "damped" and flips >= OSCILLATION_WINDOW // 2 and lo is not None and hi is not None:
            method = "bisection"
            log.info("damped iteration oscillates at Q=%g; switching to bisection", Q)
        if method == "bisection":
            q = 0.5 * (lo + hi)
        else:
            q = (1.0 - omega) * q + omega * f
        if q < q_min:
            raise TableDomainError(
                f"fixed-point iterate q={q:.6g} fell below the table minimum {q_min} at Q={Q:g}; "
                "extend the parameter table toward smaller q"
            )
        trace.append(q)
    res, q = best
    _, lam = F(q)
    log.warning("fixed point did not converge at Q=%g (best residual %.3g)", Q, res)
    return _solution(Q, spec, q, lam, it, res, False, method, trace)


def _solution(Q, spec, q, lam, it, res, ok, method, trace) -> QueueSolution:
    return QueueSolution(
        Q=Q,
        T_trafficking=spec.T_trafficking,
        q=q,
        lambda_in=lam,
        lambda_a=q * lam,
        p_b=1.0 - q,
        iterations=it,
        residual=res,
        converged=ok,
        method=method,
        trace=tuple(trace),
    )


def sweep_queue(
    Q_list: Sequence[float],
    spec_list: Sequence[ReceptorSpec],
    table: ParamTable | dict,
    D: float,
    d: int,
    **kwargs,
) -> list[QueueSolution | Exception]:
    """Solve every ``(spec, Q)`` pair, ordered spec-major.

    ``table`` is one table shared by all specs or a mapping from receptor
    site to table. Failures are returned in place of the solution so a sweep
    can report them row by row.
    """
    jobs = [(s, float(Q)) for s in spec_list for Q in Q_list]

    def one(job):
        s, Q = job
        tab = table[s.site] if isinstance(table, dict) else table
        try:
            return solve_fixed_point(Q, s, tab, D, d, **kwargs)
        except ValueError as exc:
            return exc

    with ThreadPoolExecutor(max_workers()) as pool:
        return list(pool.map(one, jobs))
