"""Three-parameter continuous channel model and its least-squares fit.

The model modifies the free-diffusion occupancy law with an amplitude
``alpha``, a scale ``beta`` and a tail decrement ``gamma``::

    P(r, t) = alpha / (4 pi D t)^(d/2) * exp(-r^2 / (4 D beta t)) * (r^2 / (D t))^gamma

``(alpha, beta, gamma) = (2, 1, 0)`` is free diffusion (the factor 2
accounts for the parity thinning of the lattice walk).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from ._parallel import max_workers
from .lattice_walk import (
    AbsorberSpec,
    Convention,
    OccupancySeries,
    WalkConfig,
    build_chain,
    occupancy_at,
    reachable_steps,
)

log = logging.getLogger(__name__)

__all__ = [
    "FitParams",
    "FitDataset",
    "ParamTable",
    "FREE_DIFFUSION",
    "model_eval",
    "fit",
    "levenberg_marquardt",
    "trim_window",
    "normalized_rmse",
    "build_param_table",
    "interp_params",
    "load_tables",
    "dump_tables",
]

TABLE_SCHEMA = "absorbmc.param_table"
TABLE_VERSION = 1
WINDOW_FLOOR = 1e-4
WINDOW_STEPS_PER_SITE = 40
GAMMA_START_FLOOR = 1e-3


@dataclass(frozen=True)
class FitParams:
    """Fitted ``(alpha, beta, gamma)`` for a destination at lattice distance ``distance``.

    ``alpha == 0`` marks an identically vanishing response (e.g. a fully
    absorbing site on every path in 1-D).
    """

    alpha: float
    beta: float
    gamma: float
    distance: float = 1.0
    sse: float = float("nan")
    iterations: int = 0
    converged: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0 or self.gamma < 0:
            raise ValueError(f"invalid parameters alpha={self.alpha}, beta={self.beta}, gamma={self.gamma}")

    @property
    def beta_prime(self) -> float:
        return self.beta * self.distance ** (self.gamma - 1.0)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


FREE_DIFFUSION = FitParams(2.0, 1.0, 0.0)


def model_eval(params: FitParams | Sequence[float], r: float, t, D: float, d: int):
    """Channel model at distance ``r`` and time(s) ``t``."""
    if isinstance(params, FitParams):
        alpha, beta, gamma = params.as_tuple()
    else:
        alpha, beta, gamma = params
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("model is defined for t > 0 only")
    if r <= 0:
        raise ValueError("model is defined for r > 0 only")
    r2 = r * r
    out = alpha / (4 * math.pi * D * t) ** (d / 2) * np.exp(-r2 / (4 * D * beta * t))
    if gamma != 0.0:
        out = out * (r2 / (D * t)) ** gamma
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FitDataset:
    """Occupancy targets at reachable step counts, with their continuous times."""

    site: tuple[int, ...]
    n: np.ndarray
    target: np.ndarray
    cfg: WalkConfig = field(default_factory=WalkConfig)

    def __post_init__(self):
        if len(self.n) != len(self.target):
            raise ValueError("n and target must have equal length")
        if len(self.n) < 6:
            raise ValueError(f"need at least 6 observations, got {len(self.n)}")
        dist = sum(abs(c) for c in self.site)
        bad = [int(k) for k in self.n if k < dist or (k - dist) % 2]
        if bad:
            raise ValueError(f"step counts {bad[:5]} cannot reach site {self.site}")

    @classmethod
    def from_series(cls, series: OccupancySeries, cfg: WalkConfig) -> "FitDataset":
        return cls(series.site, np.asarray(series.n), np.asarray(series.probability, dtype=float), cfg)

    @property
    def r(self) -> float:
        return math.sqrt(sum(c * c for c in self.site)) * self.cfg.delta

    @property
    def t(self) -> np.ndarray:
        return self.n * self.cfg.tau

    @property
    def K(self) -> int:
        return len(self.n)


def trim_window(n: np.ndarray, y: np.ndarray, floor: float = WINDOW_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Keep samples up to the first post-peak value below ``floor * peak``."""
    n = np.asarray(n)
    y = np.asarray(y, dtype=float)
    if len(y) == 0 or y.max() <= 0:
        return n, y
    peak = int(np.argmax(y))
    below = np.nonzero(y[peak:] < floor * y[peak])[0]
    end = peak + int(below[0]) if below.size else len(y)
    return n[:end], y[:end]


# unconstrained coordinates: log alpha, log beta, inverse softplus of gamma


def _to_internal(alpha: float, beta: float, gamma: float) -> np.ndarray:
    g = max(gamma, GAMMA_START_FLOOR)
    c = g + math.log(-math.expm1(-g))
    return np.array([math.log(alpha), math.log(beta), c])


def _from_internal(theta: np.ndarray) -> tuple[float, float, float]:
    a, b, c = np.clip(theta, -700.0, 700.0)
    return (math.exp(a), math.exp(b), float(np.logaddexp(0.0, c)))


def levenberg_marquardt(
    residual: Callable[[np.ndarray], np.ndarray],
    theta0: np.ndarray,
    *,
    lam0: float = 1e-3,
    max_iter: int = 1000,
    rtol: float = 1e-12,
) -> tuple[np.ndarray, float, int, bool]:
    """Damped Gauss-Newton with a forward-difference Jacobian.

    Damping starts at ``lam0``, is multiplied by 10 on a rejected step and
    divided by 10 on an accepted one. Stops when an accepted step changes the
    SSE by less than ``rtol`` relatively, when the damping overflows (no
    descent direction left at working precision), or after ``max_iter``
    trials. Returns ``(theta, sse, iterations, converged)``.
    """
    theta = np.array(theta0, dtype=float)
    r = residual(theta)
    sse = float(r @ r)
    if not math.isfinite(sse):
        return theta, sse, 0, False
    lam = lam0
    eps = math.sqrt(np.finfo(float).eps)
    it = 0
    J = None
    while it < max_iter:
        if sse == 0.0:
            return theta, sse, it, True
        if J is None:
            J = np.empty((len(r), len(theta)))
            for j in range(len(theta)):
                h = eps * max(1.0, abs(theta[j]))
                tp = theta.copy()
                tp[j] += h
                J[:, j] = (residual(tp) - r) / h
            A = J.T @ J
            g = J.T @ r
            diag = np.maximum(np.diag(A), 1e-30 * max(np.max(np.diag(A)), 1e-300))
        it += 1
        try:
            step = np.linalg.solve(A + lam * np.diag(diag), -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        trial = theta + step
        rt = residual(trial)
        with np.errstate(over="ignore"):
            sse_t = float(rt @ rt)
        if math.isfinite(sse_t) and sse_t < sse:
            rel = (sse - sse_t) / sse
            theta, r, sse = trial, rt, sse_t
            J = None
            lam = max(lam / 10.0, 1e-300)
            if rel < rtol:
                return theta, sse, it, True
        else:
            lam *= 10.0
            if lam > 1e16:
                return theta, sse, it, True
    return theta, sse, it, False


def _residual_fn(data: FitDataset):
    r, t, D, d, y = data.r, data.t.astype(float), data.cfg.D, data.cfg.dimension, data.target

    def res(theta):
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            out = model_eval(_from_internal(theta), r, t, D, d) - y
        return np.where(np.isfinite(out), out, 1e300)

    return res


def _sse(params, data: FitDataset) -> float:
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        e = model_eval(params, data.r, data.t.astype(float), data.cfg.D, data.cfg.dimension) - data.target
    s = float(e @ e)
    return s if math.isfinite(s) else math.inf


def start_points(init: FitParams, restarts: int, seed: int) -> list[tuple[float, float, float]]:
    """``init`` followed by ``restarts`` log-uniform perturbations in [1/3, 3].

    ``gamma`` is perturbed through ``gamma + 0.5`` so a zero start still moves.
    """
    rng = np.random.default_rng(seed)
    pts = [init.as_tuple()]
    for f in np.exp(rng.uniform(-math.log(3), math.log(3), size=(restarts, 3))):
        pts.append((init.alpha * f[0], init.beta * f[1], max((init.gamma + 0.5) * f[2] - 0.5, 0.0)))
    return pts


def fit(
    data: FitDataset,
    init: FitParams | None = None,
    *,
    restarts: int = 8,
    seed: int = 0,
    max_iter: int = 1000,
) -> FitParams:
    """Least-squares fit of the channel model to ``data``.

    Runs Levenberg-Marquardt from ``init`` (default: free diffusion) and
    from ``restarts`` perturbed copies, and returns the lowest-SSE result.
    The SSE returned is never above the SSE of any start point.
    """
    init = init or FREE_DIFFUSION
    dist = data.r / data.cfg.delta
    if not np.any(data.target > 0):
        return FitParams(0.0, 1.0, 0.0, dist, 0.0, 0, True)
    res = _residual_fn(data)
    best = None
    any_converged = False
    total_iter = 0
    for a, b, g in start_points(init, restarts, seed):
        start_sse = _sse((a, b, g), data)
        theta, sse, it, ok = levenberg_marquardt(res, _to_internal(a, b, g), max_iter=max_iter)
        total_iter += it
        any_converged |= ok
        cand = (sse, _from_internal(theta), it)
        if start_sse < sse:
            cand = (start_sse, (a, b, g), 0)
        if best is None or cand[0] < best[0]:
            best = cand
    sse, (a, b, g), it = best
    return FitParams(a, b, g, dist, sse, it, any_converged)


def normalized_rmse(params: FitParams, data: FitDataset) -> float:
    """Root-mean-square misfit divided by the peak target."""
    peak = float(np.max(data.target))
    s = _sse(params.as_tuple(), data)
    if peak == 0.0:
        return 0.0 if s == 0.0 else math.inf
    return math.sqrt(s / data.K) / peak


@dataclass(frozen=True)
class ParamTable:
    """Fitted parameters over an absorption-probability grid for one ``(x, m)``."""

    dimension: int
    site: tuple[int, ...]
    absorber: tuple[int, ...]
    q: tuple[float, ...]
    params: tuple[FitParams, ...]
    convention: str = Convention.APPLY_ON_ENTRY.value
    cfg: WalkConfig = field(default_factory=WalkConfig)

    @property
    def distance(self) -> float:
        return math.sqrt(sum(c * c for c in self.site))

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.params])

    def diagnostics(self) -> dict[str, str]:
        """Monotonicity of each parameter along ``q`` (reported, never enforced)."""
        out = {}
        for name in ("alpha", "beta", "gamma", "beta_prime"):
            dv = np.diff(self.column(name))
            if np.all(dv >= 0):
                out[name] = "nondecreasing"
            elif np.all(dv <= 0):
                out[name] = "nonincreasing"
            else:
                out[name] = "mixed"
        return out

    def to_dict(self) -> dict:
        return {
            "schema": TABLE_SCHEMA,
            "version": TABLE_VERSION,
            "dimension": self.dimension,
            "x": list(self.site),
            "m": list(self.absorber),
            "convention": self.convention,
            "p": self.cfg.p,
            "delta": self.cfg.delta,
            "tau": self.cfg.tau,
            "q": list(self.q),
            "alpha": [p.alpha for p in self.params],
            "beta": [p.beta for p in self.params],
            "gamma": [p.gamma for p in self.params],
            "beta_prime": [p.beta_prime for p in self.params],
            "sse": [p.sse for p in self.params],
            "iterations": [p.iterations for p in self.params],
            "converged": [p.converged for p in self.params],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParamTable":
        if doc.get("schema", TABLE_SCHEMA) != TABLE_SCHEMA:
            raise ValueError(f"not a parameter table: schema={doc.get('schema')!r}")
        if doc.get("version", TABLE_VERSION) > TABLE_VERSION:
            raise ValueError(f"unsupported table version {doc['version']}")
        for key in ("dimension", "x", "m", "q", "alpha", "beta", "gamma"):
            if key not in doc:
                raise ValueError(f"parameter table is missing {key!r}")
        site = tuple(int(c) for c in doc["x"])
        dist = math.sqrt(sum(c * c for c in site))
        k = len(doc["q"])
        sse = doc.get("sse", [float("nan")] * k)
        iters = doc.get("iterations", [0] * k)
        conv = doc.get("converged", [True] * k)
        params = tuple(
            FitParams(doc["alpha"][i], doc["beta"][i], doc["gamma"][i], dist, sse[i], iters[i], conv[i])
            for i in range(k)
        )
        cfg = WalkConfig(doc["dimension"], doc.get("p", 0.5), doc.get("delta", 1.0), doc.get("tau", 1.0))
        return cls(
            doc["dimension"],
            site,
            tuple(int(c) for c in doc["m"]),
            tuple(float(v) for v in doc["q"]),
            params,
            doc.get("convention", Convention.APPLY_ON_ENTRY.value),
            cfg,
        )


def dump_tables(tables: Sequence[ParamTable]) -> str:
    """Serialize tables to a deterministic JSON document."""
    doc = {"schema": TABLE_SCHEMA, "version": TABLE_VERSION, "tables": [t.to_dict() for t in tables]}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def load_tables(text: str) -> list[ParamTable]:
    """Parse a document holding either one table or a ``tables`` list."""
    doc = json.loads(text)
    if "tables" in doc:
        return [ParamTable.from_dict(t) for t in doc["tables"]]
    return [ParamTable.from_dict(doc)]


def occupancy_dataset(
    cfg: WalkConfig,
    x: Sequence[int],
    m: Sequence[int],
    q: float,
    n_window: Sequence[int] | None = None,
    convention: Convention | str = Convention.APPLY_ON_ENTRY,
) -> FitDataset:
    """Markov occupancy of ``x`` over the fitting window, ready for :func:`fit`."""
    x = tuple(int(c) for c in np.atleast_1d(x))
    m = tuple(int(c) for c in np.atleast_1d(m))
    if n_window is None:
        cap = WINDOW_STEPS_PER_SITE * max(sum(abs(c) for c in x), 1)
        n_list = reachable_steps(x, cap, 1)
    else:
        n_list = np.asarray(sorted(int(n) for n in n_window), dtype=np.int64)
    chain = build_chain(cfg, AbsorberSpec(m, q), None, convention, n_max=int(n_list.max()), observe=x)
    series = occupancy_at(chain, x, n_list)
    n, y = series.n, series.probability
    if n_window is None:
        n, y = trim_window(n, y)
    return FitDataset(x, n, y, cfg)


def build_param_table(
    cfg: WalkConfig,
    x: Sequence[int],
    m: Sequence[int],
    q_grid: Sequence[float],
    n_window: Sequence[int] | None = None,
    *,
    convention: Convention | str = Convention.APPLY_ON_ENTRY,
    restarts: int = 8,
    seed: int = 0,
    return_data: bool = False,
):
    """Run the chain and the fit for every ``q`` in ``q_grid``.

    With ``return_data`` the fitted datasets are returned alongside the table.
    """
    q_grid = [float(q) for q in q_grid]
    if any(b < a for a, b in zip(q_grid, q_grid[1:])):
        raise ValueError("q_grid must be sorted")
    if any(not 0.0 <= q <= 1.0 for q in q_grid):
        raise ValueError("q_grid must lie in [0, 1]")
    x = tuple(int(c) for c in np.atleast_1d(x))
    m = tuple(int(c) for c in np.atleast_1d(m))
    convention = Convention(convention)

    def one(q):
        data = occupancy_dataset(cfg, x, m, q, n_window, convention)
        return data, fit(data, restarts=restarts, seed=seed)

    with ThreadPoolExecutor(max_workers()) as pool:
        done = list(pool.map(one, q_grid))
    params = tuple(p for _, p in done)
    for q, p in zip(q_grid, params):
        if not p.converged:
            log.warning("fit did not converge for x=%s m=%s q=%g", x, m, q)
    table = ParamTable(cfg.dimension, x, m, tuple(q_grid), params, convention.value, cfg)
    log.info("parameter table x=%s m=%s monotonicity %s", x, m, table.diagnostics())
    if return_data:
        return table, [data for data, _ in done]
    return table


def interp_params(table: ParamTable, q: float) -> FitParams:
    """Monotone piecewise-cubic interpolation of each parameter in ``q``."""
    qs = np.asarray(table.q, dtype=float)
    lo, hi = float(qs.min()), float(qs.max())
    if not lo <= q <= hi:
        raise ValueError(f"q={q} outside the table range [{lo}, {hi}]")
    keep = np.concatenate(([True], np.diff(qs) > 0))
    qs = qs[keep]
    idx = np.nonzero(keep)[0]
    hit = np.nonzero(qs == q)[0]
    if hit.size:
        p = table.params[idx[hit[0]]]
        return FitParams(p.alpha, p.beta, p.gamma, table.distance, p.sse, p.iterations, p.converged)
    vals = []
    for name in ("alpha", "beta", "gamma"):
        col = table.column(name)[keep]
        if len(qs) == 1:
            vals.append(float(col[0]))
        else:
            vals.append(float(PchipInterpolator(qs, col, extrapolate=False)(q)))
    a, b, g = vals
    return FitParams(max(a, 0.0), b, max(g, 0.0), table.distance, float("nan"), 0, True)
