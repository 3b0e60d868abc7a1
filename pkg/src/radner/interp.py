"""Multilinear interpolation on the solver's time-space lattices.

Queries outside the lattice are clamped to the boundary value; callers that
care (path simulation) ask for the clamp mask and count it in diagnostics.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError


def _bracket(knots: np.ndarray, v: np.ndarray):
    """Left index, weight in [0,1], and out-of-range mask for query points."""
    idx = np.searchsorted(knots, v, side="right") - 1
    idx = np.clip(idx, 0, knots.size - 2)
    span = knots[idx + 1] - knots[idx]
    w = (v - knots[idx]) / span
    out = (v < knots[0]) | (v > knots[-1])
    return idx, np.clip(w, 0.0, 1.0), out


class LatticeInterp:
    """Piecewise-multilinear interpolant of lattice values.

    values has shape (n_t, n_1[, n_2], *trailing); queries take a scalar t
    and an (n, d) array of points and return (n, *trailing).
    """

    def __init__(self, times, axes, values):
        self.times = np.asarray(times, dtype=float)
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        values = np.asarray(values, dtype=float)
        self.dim = len(self.axes)
        if self.dim not in (1, 2):
            raise InputError("lattice interpolation supports dim 1 or 2")
        shape = (self.times.size,) + tuple(a.size for a in self.axes)
        if values.shape[:1 + self.dim] != shape:
            raise InputError(f"values shape {values.shape} does not match lattice "
                             f"{shape}")
        self.trailing = values.shape[1 + self.dim:]
        self.values = values.reshape(shape + (-1,))

    def at(self, t: float, x, return_clamped: bool = False):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != self.dim:
            raise InputError(f"query points must be (n, {self.dim})")
        it, wt, out_t = _bracket(self.times, np.asarray([t], dtype=float))
        it, wt = int(it[0]), float(wt[0])
        brackets = [_bracket(self.axes[k], x[:, k]) for k in range(self.dim)]
        clamped = np.zeros(x.shape[0], dtype=bool)
        for _, _, out in brackets:
            clamped |= out
        if bool(out_t[0]):
            clamped |= True

        def spatial(slice_vals):
            if self.dim == 1:
                i, w, _ = brackets[0]
                lo = slice_vals[i]
                hi = slice_vals[i + 1]
                return lo + w[:, None] * (hi - lo)
            i, wi, _ = brackets[0]
            j, wj, _ = brackets[1]
            v00 = slice_vals[i, j]
            v01 = slice_vals[i, j + 1]
            v10 = slice_vals[i + 1, j]
            v11 = slice_vals[i + 1, j + 1]
            wi = wi[:, None]
            wj = wj[:, None]
            return ((1 - wi) * ((1 - wj) * v00 + wj * v01)
                    + wi * ((1 - wj) * v10 + wj * v11))

        lo = spatial(self.values[it])
        hi = spatial(self.values[it + 1])
        out = lo + wt * (hi - lo)
        out = out.reshape((x.shape[0],) + self.trailing)
        if return_clamped:
            return out, clamped
        return out
