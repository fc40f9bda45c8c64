"""Time grids, laglad paths and the two integral conventions.

A laglad path is stored node-wise as a triple ``(pre, at, post)``: the left
limit, the value and the right limit at every grid node.  Between two nodes
a path may change continuously (``post[k-1] -> pre[k]``); at a node it may
jump from the left (``at - pre``) and from the right (``post - at``).

All arrays carry the node axis last, so a batch of paths is simply a path
whose arrays have leading dimensions ``(n_paths, n_nodes)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

PREDICTABLE = "predictable"
OPTIONAL = "optional"


class GridMismatchError(ValueError):
    """Two paths live on different grids."""


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing nodes ``0 = t_0 < ... < t_K = T``.

    ``marked`` lists node indices flagged as deterministic right-jump times of
    a driver.  Per-path random jump times are carried by the driver instead.
    """

    nodes: np.ndarray
    marked: tuple[int, ...] = ()

    def __post_init__(self):
        nodes = _readonly(self.nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise ValueError("grid must start at 0")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        marked = tuple(sorted(int(i) for i in self.marked))
        if any(i < 0 or i >= nodes.size for i in marked):
            raise ValueError("marked index outside the grid")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "marked", marked)

    @classmethod
    def uniform(cls, horizon: float, steps: int, marked: Sequence[int] = ()) -> "TimeGrid":
        if steps < 1 or horizon <= 0:
            raise ValueError("need steps >= 1 and a positive horizon")
        return cls(np.linspace(0.0, float(horizon), int(steps) + 1), tuple(marked))

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> int:
        return self.nodes.size - 1

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def beyond(self) -> int:
        """Index used as the 'never / beyond the horizon' placeholder."""
        return self.nodes.size

    @property
    def increments(self) -> np.ndarray:
        """``dt[k] = t_k - t_{k-1}`` with ``dt[0] = 0``."""
        return np.concatenate([[0.0], np.diff(self.nodes)])

    def same_as(self, other: "TimeGrid") -> bool:
        return self is other or (
            self.nodes.shape == other.nodes.shape and np.array_equal(self.nodes, other.nodes)
        )

    def refine(self, factor: int = 2) -> "TimeGrid":
        """Split every interval into ``factor`` equal pieces."""
        pieces = [
            np.linspace(a, b, factor + 1)[:-1] for a, b in zip(self.nodes[:-1], self.nodes[1:])
        ]
        nodes = np.concatenate(pieces + [self.nodes[-1:]])
        return TimeGrid(nodes, tuple(i * factor for i in self.marked))

    def insert(self, times: Sequence[float], mark: bool = False) -> "TimeGrid":
        """Add ``times`` as exact nodes so that no jump straddles an interval."""
        extra = np.asarray(times, dtype=float)
        if np.any(extra < 0) or np.any(extra > self.horizon):
            raise ValueError("inserted times must lie in [0, T]")
        old_marked = self.nodes[list(self.marked)]
        nodes = np.unique(np.concatenate([self.nodes, extra]))
        marked = set(np.searchsorted(nodes, old_marked).tolist())
        if mark:
            marked |= set(np.searchsorted(nodes, extra).tolist())
        return TimeGrid(nodes, tuple(sorted(marked)))

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        i = int(np.searchsorted(self.nodes, t - atol))
        if i >= self.size or abs(self.nodes[i] - t) > atol:
            raise ValueError(f"time {t} is not a grid node")
        return i

    def snap(self, times) -> np.ndarray:
        """Index of the right endpoint of the interval containing each time.

        Times beyond the horizon (or infinite) map to ``beyond``.
        """
        t = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.nodes, t - 1e-12, side="left")
        return np.where(t > self.horizon + 1e-12, self.beyond, idx).astype(int)

    def to_dict(self) -> dict:
        return {"nodes": self.nodes.tolist(), "marked": list(self.marked)}


@dataclass(frozen=True, eq=False)
class LagladPath:
    """Node-wise (left limit, value, right limit) storage of a laglad path.

    ``measurability`` decides which value an integrand contributes: the left
    limit for predictable integrands, the value itself for optional ones.
    """

    grid: TimeGrid
    pre: np.ndarray
    at: np.ndarray
    post: np.ndarray
    measurability: str = OPTIONAL
    increasing: bool = False

    __array_ufunc__ = None  # let numpy arrays defer to the path operators

    def __post_init__(self):
        pre, at, post = (_readonly(a) for a in (self.pre, self.at, self.post))
        if not (pre.shape == at.shape == post.shape):
            raise ValueError("pre/at/post must share a shape")
        if at.shape[-1:] != (self.grid.size,):
            raise ValueError("last axis must run over the grid nodes")
        if self.measurability not in (PREDICTABLE, OPTIONAL):
            raise ValueError("measurability is 'predictable' or 'optional'")
        object.__setattr__(self, "pre", pre)
        object.__setattr__(self, "at", at)
        object.__setattr__(self, "post", post)
        if self.increasing and not self.is_increasing():
            raise ValueError("path declared increasing is not")

    # constructors ---------------------------------------------------------
    @classmethod
    def cadlag(cls, grid: TimeGrid, values, **kw) -> "LagladPath":
        """Piecewise-constant cadlag embedding: all change happens as left jumps."""
        at = np.asarray(values, dtype=float)
        pre = np.concatenate([at[..., :1], at[..., :-1]], axis=-1)
        return cls(grid, pre, at, at, **kw)

    @classmethod
    def continuous(cls, grid: TimeGrid, values, **kw) -> "LagladPath":
        v = np.asarray(values, dtype=float)
        return cls(grid, v, v, v, **kw)

    @classmethod
    def constant(cls, grid: TimeGrid, value, shape=(), **kw) -> "LagladPath":
        v = np.full(tuple(shape) + (grid.size,), float(value))
        return cls(grid, v, v, v, **kw)

    @classmethod
    def from_parts(cls, grid: TimeGrid, continuous=None, left_jumps=None, right_jumps=None,
                   **kw) -> "LagladPath":
        """Assemble ``C^c + C^d + C^g`` from node values of the continuous part and
        node-wise left and right jump sizes."""
        parts = [np.asarray(p, dtype=float) for p in (continuous, left_jumps, right_jumps) if p is not None]
        shape = np.broadcast_shapes(*(p.shape for p in parts)) if parts else (grid.size,)
        c = np.zeros(shape) if continuous is None else np.broadcast_to(continuous, shape)
        d = np.zeros(shape) if left_jumps is None else np.broadcast_to(left_jumps, shape)
        g = np.zeros(shape) if right_jumps is None else np.broadcast_to(right_jumps, shape)
        g_before = np.cumsum(g, axis=-1) - g
        at = c + np.cumsum(d, axis=-1) + g_before
        return cls(grid, at - d, at, at + g, **kw)

    # views -----------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.at.shape[:-1]

    @property
    def left_jump(self) -> np.ndarray:
        return self.at - self.pre

    @property
    def right_jump(self) -> np.ndarray:
        return self.post - self.at

    @property
    def regular_increment(self) -> np.ndarray:
        """``at[k] - post[k-1]``: continuous change plus left jump on ``(t_{k-1}, t_k]``."""
        inc = np.zeros_like(self.at)
        inc[..., 1:] = self.at[..., 1:] - self.post[..., :-1]
        return inc

    @property
    def continuous_increment(self) -> np.ndarray:
        inc = np.zeros_like(self.at)
        inc[..., 1:] = self.pre[..., 1:] - self.post[..., :-1]
        return inc

    def integrand_values(self, measurability: str | None = None) -> np.ndarray:
        mode = measurability or self.measurability
        return self.pre if mode == PREDICTABLE else self.at

    def with_measurability(self, measurability: str) -> "LagladPath":
        return LagladPath(self.grid, self.pre, self.at, self.post, measurability, self.increasing)

    def __getitem__(self, item) -> "LagladPath":
        if not isinstance(item, tuple):
            item = (item,)
        item = item if any(x is Ellipsis for x in item) else item + (Ellipsis,)
        sel = lambda a: a[item]
        return LagladPath(self.grid, sel(self.pre), sel(self.at), sel(self.post),
                          self.measurability, self.increasing)

    def map(self, fn) -> "LagladPath":
        """Apply a node-wise function to all three values."""
        return LagladPath(self.grid, fn(self.pre), fn(self.at), fn(self.post), self.measurability)

    def __add__(self, other):
        if isinstance(other, LagladPath):
            _check_grid(self, other)
            return LagladPath(self.grid, self.pre + other.pre, self.at + other.at,
                              self.post + other.post, self.measurability)
        return self.map(lambda a: a + other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, LagladPath):
            return self + (-1.0) * other
        return self.map(lambda a: a - other)

    def __mul__(self, other):
        if isinstance(other, LagladPath):
            _check_grid(self, other)
            return LagladPath(self.grid, self.pre * other.pre, self.at * other.at,
                              self.post * other.post, self.measurability)
        return self.map(lambda a: a * np.asarray(other)[..., None] if np.ndim(other) else a * other)

    __rmul__ = __mul__

    def is_increasing(self, tol: float = 1e-12) -> bool:
        ok = np.all(self.pre <= self.at + tol) and np.all(self.at <= self.post + tol)
        return bool(ok and np.all(self.pre[..., 1:] >= self.post[..., :-1] - tol))

    def stopped(self, index) -> "LagladPath":
        """Path stopped at node ``index`` (per path); nodes beyond keep the stopped value."""
        idx = np.broadcast_to(np.asarray(index), self.shape)
        k = np.arange(self.grid.size)
        stop = np.minimum(idx, self.grid.size - 1)[..., None]
        frozen = np.take_along_axis(self.at, stop, axis=-1)
        after = k > idx[..., None]
        at_stop = k == idx[..., None]
        pre = np.where(after, frozen, self.pre)
        at = np.where(after, frozen, self.at)
        post = np.where(after | at_stop, frozen, self.post)
        return LagladPath(self.grid, pre, at, post, self.measurability)


def _check_grid(*paths: LagladPath) -> None:
    first = paths[0].grid
    for p in paths[1:]:
        if not first.same_as(p.grid):
            raise GridMismatchError("paths live on different grids")


def indicator_from(grid: TimeGrid, index, *, strict: bool = False) -> LagladPath:
    """``1_{[t_i, inf)}`` (a left jump at ``t_i``) or, with ``strict``, ``1_{(t_i, inf)}``
    (a right jump at ``t_i``).  Indices equal to ``grid.beyond`` never jump."""
    idx = np.asarray(index)[..., None]
    k = np.arange(grid.size)
    if strict:
        at = (k > idx).astype(float)
        return LagladPath(grid, at, at, (k >= idx).astype(float), increasing=True)
    at = (k >= idx).astype(float)
    return LagladPath(grid, (k > idx).astype(float), at, at, increasing=True)


class LagladParts(NamedTuple):
    continuous: LagladPath
    cadlag_jumps: LagladPath
    caglad_jumps: LagladPath

    @property
    def regular(self) -> LagladPath:
        """``C^r = C^c + C^d``."""
        return self.continuous + self.cadlag_jumps


def decompose_laglad(path: LagladPath) -> LagladParts:
    """Split a finite-variation path into continuous, left-jump and right-jump parts.

    ``C^d_t`` sums the left jumps up to and including ``t``; ``C^g_t`` sums the
    right jumps strictly before ``t``.  The three parts add back to the input.
    """
    d = path.left_jump
    g = path.right_jump
    cd = np.cumsum(d, axis=-1)
    cg = np.cumsum(g, axis=-1) - g
    cc = path.at - cd - cg
    grid = path.grid
    cadlag = LagladPath(grid, cd - d, cd, cd)
    caglad = LagladPath(grid, cg, cg, cg + g)
    return LagladParts(LagladPath.continuous(grid, cc), cadlag, caglad)


def dot_path(integrand: LagladPath, integrator: LagladPath,
             measurability: str | None = None) -> LagladPath:
    """Running integral ``(X . Y)_t`` over ``(0, t]`` against the regular part of ``Y``.

    Right jumps of the integrator are not seen; integrate those with
    :func:`star_path`.
    """
    _check_grid(integrand, integrator)
    x = integrand.integrand_values(measurability)
    inc = x * integrator.regular_increment
    at = np.cumsum(inc, axis=-1)
    jump = x * integrator.left_jump
    jump[..., 0] = 0.0
    return LagladPath(integrator.grid, at - jump, at, at)


def star_path(integrand: LagladPath, integrator: LagladPath) -> LagladPath:
    """Running integral ``(X * Y)_t`` over ``[0, t)`` against the jumps of ``Y``.

    The integrand contributes its value at each node; the integrator
    contributes its full jump ``post - pre`` there.  Pass the right-jump part
    ``Y^g`` (or its cadlag version) as integrator.  The window is closed on
    the left, so a right jump of ``Y`` at node 0 is counted.
    """
    _check_grid(integrand, integrator)
    inc = integrand.at * (integrator.post - integrator.pre)
    before = np.cumsum(inc, axis=-1) - inc
    return LagladPath(integrator.grid, before, before, before + inc)


def integral_dot(integrand: LagladPath, integrator: LagladPath, start: int = 0,
                 stop: int | None = None, measurability: str | None = None) -> np.ndarray:
    """``sum_{u in (start, stop]} X(u) * (Y_at(u) - Y_post(u-1))``.

    ``X(u)`` is the left limit for predictable integrands and the value for
    optional ones (override with ``measurability``).
    """
    if stop is None:
        stop = integrator.grid.size - 1
    if start > stop:
        raise ValueError("start must not exceed stop")
    _check_grid(integrand, integrator)
    x = integrand.integrand_values(measurability)
    inc = x[..., start + 1: stop + 1] * integrator.regular_increment[..., start + 1: stop + 1]
    return inc.sum(axis=-1)


def integral_star(integrand: LagladPath, integrator: LagladPath, start: int = 0,
                  stop: int | None = None) -> np.ndarray:
    """``sum_{u in [start, stop)} X_at(u) * (Y_post(u) - Y_pre(u))``."""
    if stop is None:
        stop = integrator.grid.size - 1
    if start > stop:
        raise ValueError("start must not exceed stop")
    _check_grid(integrand, integrator)
    jumps = integrator.post - integrator.pre
    return (integrand.at[..., start:stop] * jumps[..., start:stop]).sum(axis=-1)


def quadratic_covariation(x: LagladPath, y: LagladPath) -> LagladPath:
    """``[X,Y]_t = sum_{0<s<=t} dX dY + sum_{0<=s<t} d+X d+Y``.

    For a Brownian path sampled on the grid every increment is a left jump,
    so the first sum is the realised quadratic variation.
    """
    _check_grid(x, y)
    left = x.left_jump * y.left_jump
    left[..., 0] = 0.0
    right = x.right_jump * y.right_jump
    right_before = np.cumsum(right, axis=-1) - right
    at = np.cumsum(left, axis=-1) + right_before
    return LagladPath(x.grid, at - left, at, at + right)


def safe_divide(num, den, fill: float = 0.0):
    num, den = np.broadcast_arrays(np.asarray(num, float), np.asarray(den, float))
    out = np.full(num.shape, fill)
    np.divide(num, den, out=out, where=den != 0)
    return out


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """A batch of paths on one grid with per-path seed lineage and weights.

    ``paths`` is a single :class:`LagladPath` whose leading axis runs over
    scenarios.  ``weights`` are scenario probabilities (uniform for Monte Carlo).
    """

    paths: LagladPath
    seeds: tuple[str, ...] = ()
    weights: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if len(self.paths.shape) < 1 or self.paths.shape[0] < 1:
            raise ValueError("an ensemble needs at least one path")
        n = self.paths.shape[0]
        w = np.full(n, 1.0 / n) if self.weights is None else _readonly(self.weights)
        if w.shape != (n,):
            raise ValueError("one weight per path")
        object.__setattr__(self, "weights", w)
        if self.seeds and len(self.seeds) != n:
            raise ValueError("one seed identifier per path")

    @property
    def grid(self) -> TimeGrid:
        return self.paths.grid

    def __len__(self) -> int:
        return self.paths.shape[0]

    def __iter__(self) -> Iterator[LagladPath]:
        for i in range(len(self)):
            yield self.paths[i]

    def __getitem__(self, i) -> LagladPath:
        return self.paths[i]

    def mean(self) -> np.ndarray:
        return np.tensordot(self.weights, self.paths.at, axes=(0, 0))
