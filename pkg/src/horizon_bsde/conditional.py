"""Conditional-expectation estimators used by the backward solvers.

An estimator is called as ``ce(k, values, fit_mask=None)`` and returns an
estimate of ``E[values | F_k]`` for every path.  With ``fit_mask`` only the
flagged paths are used for the estimate, which then reads as the conditional
expectation given ``F_k`` and the event behind the mask; paths whose cell or
regime holds no flagged path receive NaN.  ``values`` may be ``(n,)`` or
``(n, r)``; several columns are projected in one go.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Protocol

import numpy as np


class DegenerateDesignError(RuntimeError):
    """The regression basis has no usable rows or rank."""


class ConditionalExpectation(Protocol):
    def __call__(self, k: int, values: np.ndarray, fit_mask: np.ndarray | None = None) -> np.ndarray: ...


def _as_columns(values: np.ndarray) -> tuple[np.ndarray, bool]:
    v = np.asarray(values, dtype=float)
    return (v[:, None], True) if v.ndim == 1 else (v, False)


@dataclass(frozen=True, eq=False)
class PartitionCE:
    """Exact conditional expectation on a finite scenario space.

    ``labels[k, i]`` is the cell of scenario ``i`` in the partition generating
    ``F_k``; ``weights`` are scenario probabilities.
    """

    labels: np.ndarray
    weights: np.ndarray

    def __call__(self, k, values, fit_mask=None):
        v, flat = _as_columns(values)
        w = self.weights if fit_mask is None else self.weights * fit_mask
        lab = self.labels[k]
        m = int(lab.max()) + 1
        mass = np.bincount(lab, weights=w, minlength=m)
        empty = np.nan if fit_mask is not None else 0.0
        out = np.empty_like(v)
        for j in range(v.shape[1]):
            num = np.bincount(lab, weights=w * v[:, j], minlength=m)
            cell = np.divide(num, mass, out=np.full(m, empty), where=mass > 0)
            out[:, j] = cell[lab]
        return out[:, 0] if flat else out


def polynomial_features(x: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree <= ``degree`` in the columns of ``x``."""
    cols = [np.ones(x.shape[0])]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(x.shape[1]), d):
            cols.append(np.prod(x[:, combo], axis=1))
    return np.column_stack(cols)


@dataclass(frozen=True, eq=False)
class RegressionCE:
    """Least-squares projection on polynomials of the state at node ``k``.

    ``state`` has shape ``(n, K+1, s)``.  The degree drops automatically when
    fewer than ``min_rows_per_basis`` rows per basis function are available.
    ``regimes`` (n, K+1) integer labels, adapted, split the fit: each regime
    at node ``k`` gets its own regression (e.g. "a jump has occurred").
    With ``folds > 1`` every path is predicted from a fit on the other folds
    (cross-fitting), which keeps ensemble averages of products such as
    ``z dM`` free of the in-sample overfitting bias.
    """

    state: np.ndarray
    degree: int = 2
    min_rows_per_basis: int = 10
    regimes: np.ndarray | None = None
    folds: int = 1

    def __post_init__(self):
        s = np.asarray(self.state, dtype=float)
        if s.ndim == 2:
            s = s[:, :, None]
        object.__setattr__(self, "state", s)
        if self.regimes is not None:
            object.__setattr__(self, "regimes", np.asarray(self.regimes, int))
        if self.folds < 1:
            raise ValueError("folds must be >= 1")

    def _fit(self, k: int, fit_rows: np.ndarray, values: np.ndarray, out_rows: np.ndarray) -> np.ndarray:
        x = self.state[fit_rows, k, :]
        scale = x.std(axis=0)
        keep = scale > 1e-12 * (1.0 + np.abs(x).max(axis=0))
        centre = x[:, keep].mean(axis=0)
        degree = self.degree
        while degree > 0:
            nbasis = polynomial_features(np.zeros((1, int(keep.sum()))), degree).shape[1]
            if fit_rows.size >= self.min_rows_per_basis * nbasis:
                break
            degree -= 1

        def design(rows):
            if not keep.any():
                return np.ones((rows.size, 1))
            u = (self.state[rows, k, :][:, keep] - centre) / scale[keep]
            return polynomial_features(u, degree)

        coef, _, rank, _ = np.linalg.lstsq(design(fit_rows), values[fit_rows], rcond=None)
        if rank < 1:
            raise DegenerateDesignError(f"regression basis has rank 0 at node {k}")
        return design(out_rows) @ coef

    def __call__(self, k, values, fit_mask=None):
        v, flat = _as_columns(values)
        n = v.shape[0]
        use = np.ones(n, bool) if fit_mask is None else np.asarray(fit_mask, bool)
        out = np.zeros_like(v)
        rows = np.arange(n)
        groups = [rows] if self.regimes is None else [
            rows[self.regimes[:, k] == r] for r in np.unique(self.regimes[:, k])]
        for grp in groups:
            fit = grp[use[grp]]
            if not fit.size:
                out[grp] = np.nan
            elif self.folds == 1 or fit.size < 2 * self.folds:
                out[grp] = self._fit(k, fit, v, grp)
            else:
                fold_fit = fit % self.folds
                fold_out = grp % self.folds
                for f in range(self.folds):
                    others = fit[fold_fit != f]
                    out[grp[fold_out == f]] = self._fit(k, others if others.size else fit, v,
                                                        grp[fold_out == f])
        return out[:, 0] if flat else out


@dataclass(frozen=True, eq=False)
class MeanCE:
    """Ensemble mean: exact when the filtration is trivial."""

    def __call__(self, k, values, fit_mask=None):
        v, flat = _as_columns(values)
        rows = np.ones(v.shape[0], bool) if fit_mask is None else np.asarray(fit_mask, bool)
        out = np.full_like(v, v[rows].mean(axis=0) if rows.any() else np.nan)
        return out[:, 0] if flat else out
