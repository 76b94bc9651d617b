"""Markov-chain evolution of a lattice walker with one probabilistic absorber.

The chain lives on the box ``{x : |x|_inf <= R}`` plus a sink. Mass that
steps off the box goes to the sink too, but is booked separately as
*leakage*, which certifies the truncation error of every reported
probability. The one-step update is matrix free.

Axes along which both the start and the absorber sit at coordinate 0 and
the step law is symmetric are folded onto ``0..R``: the state then stores
the probability of one representative site and the orbit weights
(1 or 2 per folded axis) are only needed for mass bookkeeping.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from ._parallel import max_workers

__all__ = [
    "Convention",
    "WalkConfig",
    "AbsorberSpec",
    "TruncatedChain",
    "ChainState",
    "OccupancySeries",
    "TruncationError",
    "build_chain",
    "certified_radius",
    "evolve",
    "occupancy_at",
    "monte_carlo",
    "reachable_steps",
]

FLUSH = 1e-300
LEAKAGE_LIMIT = 1e-10


class Convention(str, enum.Enum):
    APPLY_ON_ENTRY = "apply-on-entry"
    EXEMPT_FINAL_ARRIVAL = "exempt-final-arrival"


class TruncationError(ValueError):
    """The truncation box is too small for the requested query."""

    def __init__(self, message: str, required_radius: int):
        super().__init__(message)
        self.required_radius = required_radius


def _as_site(v, d: int, name: str) -> tuple[int, ...]:
    if np.isscalar(v):
        v = (v,)
    site = tuple(int(c) for c in v)
    if len(site) != d:
        raise ValueError(f"{name} must have {d} component(s), got {site}")
    return site


@dataclass(frozen=True)
class WalkConfig:
    """Nearest-neighbour walk on Z^d.

    In 1-D ``p`` is the right-step probability. For ``d > 1`` the 2d moves
    are equally likely and ``p`` must be left at 1/2.
    """

    dimension: int = 1
    p: float = 0.5
    delta: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if self.dimension not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.dimension}")
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if self.dimension > 1 and self.p != 0.5:
            raise ValueError("p is only configurable for d = 1")
        if not self.delta > 0 or not self.tau > 0:
            raise ValueError("delta and tau must be positive")

    @property
    def D(self) -> float:
        return self.delta**2 / (2 * self.dimension * self.tau)

    @property
    def symmetric(self) -> bool:
        return self.p == 0.5

    def time(self, n):
        """Continuous time of step count ``n``."""
        return np.asarray(n) * self.tau

    def distance(self, site) -> float:
        """Euclidean distance of a lattice site from the origin, in length units."""
        return math.sqrt(sum(int(c) ** 2 for c in np.atleast_1d(site))) * self.delta


@dataclass(frozen=True)
class AbsorberSpec:
    site: tuple[int, ...]
    q: float

    def __post_init__(self):
        object.__setattr__(self, "site", tuple(int(c) for c in np.atleast_1d(self.site)))
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"absorption probability q must lie in [0, 1], got {self.q}")


def certified_radius(n_steps: int, dimension: int, eps: float = 1e-12, offset: int = 0) -> int:
    """Box radius whose exit probability within ``n_steps`` is below ``eps``.

    Freedman/Bernstein bound on the running maximum of each coordinate
    (increments in [-1, 1], variance 1/d per step), union-bounded over the
    2d faces.
    """
    if n_steps <= 0:
        return offset + 1
    L = math.log(2 * dimension / eps)
    v = n_steps / dimension
    r = L / 3 + math.sqrt(L * L / 9 + 2 * v * L)
    return offset + int(math.ceil(r))


@dataclass(frozen=True)
class TruncatedChain:
    cfg: WalkConfig
    absorber: AbsorberSpec
    radius: int
    convention: Convention = Convention.APPLY_ON_ENTRY
    start: tuple[int, ...] = ()
    folded: tuple[bool, ...] = ()
    _weights: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def shape(self) -> tuple[int, ...]:
        R = self.radius
        return tuple(R + 1 if f else 2 * R + 1 for f in self.folded)

    def index(self, site: Sequence[int]) -> tuple[int, ...]:
        """Storage index of a lattice site (folded axes use ``|coord|``)."""
        site = _as_site(site, self.cfg.dimension, "site")
        if max(abs(c) for c in site) > self.radius:
            raise TruncationError(
                f"site {site} lies outside the truncation radius {self.radius}",
                max(abs(c) for c in site) + 1,
            )
        R = self.radius
        return tuple(abs(c) if f else c + R for c, f in zip(site, self.folded))

    @property
    def weights(self) -> np.ndarray:
        return self._weights


def build_chain(
    cfg: WalkConfig,
    absorber: AbsorberSpec,
    radius: int | None = None,
    convention: Convention | str = Convention.APPLY_ON_ENTRY,
    *,
    n_max: int | None = None,
    observe: Sequence[int] | None = None,
    start: Sequence[int] | None = None,
) -> TruncatedChain:
    """Truncated chain for ``cfg`` with ``absorber``.

    Without ``radius`` the box is sized from ``n_max``: exactly
    ``max(|x|, |m|) + n_max`` in 1-D (no leakage possible), and the
    certified radius for ``d > 1`` where the exact box is too large to
    store.
    """
    d = cfg.dimension
    convention = Convention(convention)
    m = _as_site(absorber.site, d, "absorber site")
    start = _as_site(start if start is not None else (0,) * d, d, "start")
    x = _as_site(observe, d, "observation site") if observe is not None else (0,) * d
    reach = max(max(abs(c) for c in m), max(abs(c) for c in x), max(abs(c) for c in start))
    if radius is None:
        if n_max is None:
            raise ValueError("either radius or n_max is required")
        exact = reach + n_max
        radius = exact if d == 1 else min(exact, max(certified_radius(n_max, d), reach + 1))
    if radius < reach + 1:
        raise TruncationError(
            f"radius {radius} too small: need at least max(|m|, |x|) + 1 = {reach + 1}", reach + 1
        )
    folded = tuple(cfg.symmetric and s == 0 and mc == 0 for s, mc in zip(start, m))
    per_axis = []
    for f in folded:
        w = np.ones(radius + 1 if f else 2 * radius + 1)
        if f:
            w[1:] = 2.0
        per_axis.append(w)
    weights = per_axis[0]
    for w in per_axis[1:]:
        weights = np.multiply.outer(weights, w)
    return TruncatedChain(cfg, AbsorberSpec(m, absorber.q), int(radius), convention, start, folded, weights)


@dataclass(frozen=True)
class ChainState:
    """Distribution after ``n`` steps: lattice values plus sink bookkeeping."""

    chain: TruncatedChain = field(repr=False)
    n: int
    values: np.ndarray = field(repr=False)
    absorbed: float
    leaked: float

    def at(self, site: Sequence[int]) -> float:
        return float(self.values[self.chain.index(site)])

    @property
    def sink(self) -> float:
        return self.absorbed + self.leaked

    def lattice_mass(self) -> float:
        return float(np.sum(self.values * self.chain.weights))

    def total_mass(self) -> float:
        return self.lattice_mass() + self.sink


def _face(ndim: int, axis: int, idx) -> tuple:
    sl = [slice(None)] * ndim
    sl[axis] = idx
    return tuple(sl)


def _step(cfg: WalkConfig, folded, old: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, float]:
    """Move every walker one step; returns the new values and the leaked mass."""
    nd = old.ndim
    new = np.zeros_like(old)
    leak = 0.0
    if nd == 1 and not folded[0]:
        p = cfg.p
        new[1:] += p * old[:-1]
        new[:-1] += (1 - p) * old[1:]
        leak = p * old[-1] + (1 - p) * old[0]
        return new, float(leak)
    w = 1.0 / (2 * cfg.dimension)
    for ax, f in enumerate(folded):
        hi = _face(nd, ax, slice(1, None))
        lo = _face(nd, ax, slice(None, -1))
        np.add(new[hi], old[lo], out=new[hi])
        np.add(new[lo], old[hi], out=new[lo])
        last = _face(nd, ax, slice(-1, None))
        leak += float(np.sum(old[last] * W[last]))
        if f:
            # site -1 mirrors site 1 and feeds the centre plane
            c0, c1 = _face(nd, ax, slice(0, 1)), _face(nd, ax, slice(1, 2))
            np.add(new[c0], old[c1], out=new[c0])
        else:
            first = _face(nd, ax, slice(0, 1))
            leak += float(np.sum(old[first] * W[first]))
    new *= w
    return new, leak * w


def _live_box(chain: TruncatedChain, extent: int) -> tuple:
    # sub-box holding every site within `extent` of the origin, clipped to the chain
    R = chain.radius
    e = min(extent, R)
    return tuple(slice(0, e + 1) if f else slice(R - e, R + e + 1) for f in chain.folded)


def _advance(chain: TruncatedChain, old: np.ndarray, extent: int) -> tuple[np.ndarray, float]:
    if extent + 1 >= chain.radius:
        return _step(chain.cfg, chain.folded, old, chain.weights)
    # the margin of the live box is empty, so nothing can leak from it
    box = _live_box(chain, extent + 1)
    sub, _ = _step(chain.cfg, chain.folded, old[box], chain.weights[box])
    new = np.zeros_like(old)
    new[box] = sub
    return new, 0.0


def _departure_targets(chain: TruncatedChain) -> list[tuple[tuple[int, ...], float]]:
    # storage cells fed by the absorber cell in one step, with their weights
    cfg = chain.cfg
    mi = chain.index(chain.absorber.site)
    out = []
    for ax, f in enumerate(chain.folded):
        up = list(mi)
        up[ax] += 1
        if cfg.dimension == 1 and not f:
            down = list(mi)
            down[ax] -= 1
            out += [(tuple(up), cfg.p), (tuple(down), 1 - cfg.p)]
            continue
        w = 1.0 / (2 * cfg.dimension)
        out.append((tuple(up), w))
        if not f:
            down = list(mi)
            down[ax] -= 1
            out.append((tuple(down), w))
    return out


def evolve(chain: TruncatedChain, n_max: int, start: Sequence[int] | None = None) -> Iterator[ChainState]:
    """Yield the states after 0, 1, ..., ``n_max`` steps.

    States are produced lazily; each carries its own read-only array. With
    the exempt-final-arrival convention the absorber cell holds the mass that
    has just arrived, and its absorption is booked when it departs.
    """
    if n_max < 0:
        raise ValueError("n_max must be non-negative")
    start = chain.start if start is None else _as_site(start, chain.cfg.dimension, "start")
    if start != chain.start:
        raise ValueError("start must match the start the chain was folded for")
    q = chain.absorber.q
    mi = chain.index(chain.absorber.site)
    on_entry = chain.convention is Convention.APPLY_ON_ENTRY
    targets = _departure_targets(chain)
    vals = np.zeros(chain.shape)
    vals[chain.index(start)] = 1.0
    absorbed = leaked = 0.0
    pending = 0.0
    reach = max(abs(c) for c in start)
    vals.flags.writeable = False
    yield ChainState(chain, 0, vals, 0.0, 0.0)
    for n in range(1, n_max + 1):
        new, lk = _advance(chain, vals, reach + n - 1)
        leaked += lk
        if pending:
            for idx, w in targets:
                new[idx] = max(new[idx] - w * pending, 0.0)
            absorbed += pending
            pending = 0.0
        if q > 0.0:
            charge = q * new[mi]
            if on_entry:
                absorbed += charge
                new[mi] -= charge
            else:
                pending = charge
        if n % 16 == 0:
            new[new < FLUSH] = 0.0
        new.flags.writeable = False
        vals = new
        yield ChainState(chain, n, vals, absorbed, leaked)


def reachable_steps(site: Sequence[int], n_max: int, n_min: int = 0) -> np.ndarray:
    """Step counts in ``[n_min, n_max]`` at which ``site`` can be occupied."""
    dist = int(sum(abs(int(c)) for c in np.atleast_1d(site)))
    lo = max(n_min, dist)
    if (lo - dist) % 2:
        lo += 1
    return np.arange(lo, n_max + 1, 2, dtype=np.int64)


@dataclass(frozen=True)
class OccupancySeries:
    """Occupation probabilities of ``site`` at the step counts ``n``."""

    site: tuple[int, ...]
    n: np.ndarray
    probability: np.ndarray
    leakage: float = 0.0
    stderr: np.ndarray | None = None

    @property
    def parity(self) -> np.ndarray:
        return (self.n + sum(abs(c) for c in self.site)) % 2

    def __len__(self) -> int:
        return len(self.n)


def occupancy_at(
    chain: TruncatedChain,
    x: Sequence[int],
    n_list: Sequence[int],
    start: Sequence[int] | None = None,
) -> OccupancySeries:
    """Probabilities of being at ``x`` after each ``n`` in ``n_list``."""
    x = _as_site(x, chain.cfg.dimension, "observation site")
    n_arr = np.asarray(n_list, dtype=np.int64)
    if n_arr.size == 0:
        return OccupancySeries(x, n_arr, np.zeros(0), 0.0)
    if n_arr.min() < 0:
        raise ValueError("step counts must be non-negative")
    if max(abs(c) for c in x) >= chain.radius:
        need = max(abs(c) for c in x) + 1
        raise TruncationError(f"observation site {x} needs radius >= {need}", need)
    idx = chain.index(x)
    n_max = int(n_arr.max())
    wanted = {int(n) for n in n_arr}
    found: dict[int, float] = {}
    leak = 0.0
    for state in evolve(chain, n_max, start):
        if state.n in wanted:
            found[state.n] = float(state.values[idx])
        leak = state.leaked
    if leak > LEAKAGE_LIMIT:
        need = certified_radius(n_max, chain.cfg.dimension, LEAKAGE_LIMIT / 10, max(abs(c) for c in x))
        raise TruncationError(
            f"truncation leakage {leak:.3e} exceeds {LEAKAGE_LIMIT:g} at n={n_max}; "
            f"use radius >= {need}",
            need,
        )
    probs = np.array([found[int(n)] for n in n_arr])
    return OccupancySeries(x, n_arr, probs, leak)


def _mc_batch(cfg, m, q, x, steps, start, convention, seed, batch, size):
    d = cfg.dimension
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(batch,))))
    pos = np.tile(np.asarray(start, dtype=np.int64), (size, 1))
    alive = np.ones(size, dtype=bool)
    m = np.asarray(m)
    x = np.asarray(x)
    on_entry = convention is Convention.APPLY_ON_ENTRY
    counts = {}
    targets = set(steps)
    rows = np.arange(size)
    for n in range(1, max(steps) + 1):
        if d == 1:
            move = rng.random(size)
        else:
            move = rng.integers(0, 2 * d, size)
        u = rng.random(size)
        if not on_entry and n > 1:
            hit = alive & np.all(pos == m, axis=1)
            alive &= ~(hit & (u < q))
        if d == 1:
            pos[:, 0] += np.where(move < cfg.p, 1, -1)
        else:
            pos[rows, move // 2] += 1 - 2 * (move % 2)
        if on_entry:
            hit = alive & np.all(pos == m, axis=1)
            alive &= ~(hit & (u < q))
        if n in targets:
            counts[n] = int(np.count_nonzero(alive & np.all(pos == x, axis=1)))
    return counts


def monte_carlo(
    cfg: WalkConfig,
    absorber: AbsorberSpec,
    x: Sequence[int],
    n_list: Sequence[int],
    walkers: int,
    seed: int,
    convention: Convention | str = Convention.APPLY_ON_ENTRY,
    start: Sequence[int] | None = None,
    batch_size: int = 8192,
) -> OccupancySeries:
    """Empirical occupancy of ``x`` from independent simulated walkers.

    Walker ``i`` draws from the stream keyed by ``(seed, i // batch_size)`` at
    offset ``i % batch_size``, so results do not depend on how batches are
    scheduled over threads.
    """
    if walkers < 1:
        raise ValueError("walkers must be >= 1")
    d = cfg.dimension
    convention = Convention(convention)
    x = _as_site(x, d, "observation site")
    m = _as_site(absorber.site, d, "absorber site")
    start = _as_site(start if start is not None else (0,) * d, d, "start")
    n_arr = np.asarray(n_list, dtype=np.int64)
    steps = sorted({int(n) for n in n_arr if n > 0})
    total = {n: 0 for n in steps}
    if steps:
        sizes = [min(batch_size, walkers - b * batch_size) for b in range(-(-walkers // batch_size))]
        args = [(cfg, m, absorber.q, x, steps, start, convention, seed, b, s) for b, s in enumerate(sizes)]
        with ThreadPoolExecutor(max_workers()) as pool:
            for counts in pool.map(lambda a: _mc_batch(*a), args):
                for n, c in counts.items():
                    total[n] += c
    at_start = float(x == start)
    probs = np.array([total[int(n)] / walkers if n > 0 else at_start for n in n_arr])
    stderr = np.sqrt(probs * (1 - probs) / walkers)
    return OccupancySeries(x, n_arr, probs, 0.0, stderr)
