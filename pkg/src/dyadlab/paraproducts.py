"""Dyadic paraproducts in one, two, and three acting parameters.

The defining sums share one shape: the symbol is analyzed against
cancellative Haar functions in every acting parameter; the input takes
cancellative slots except a noncancellative one in the last acting parameter;
the output swaps those roles; each acting cube contributes |U|^(-1/2). The
adjoint exchanges the input and output slot patterns. Parameters outside the
acting set are untouched, so composing with partial pairings builds the
partial-parameter shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from dyadlab.bmo import bmo_dyadic_1p, carleson_rect
from dyadlab.grid import GridShift
from dyadlab.haar import (
    MultiFunction,
    _axis_forward,
    _axis_inverse,
    _axis_pyramid,
    _axis_pyramid_adjoint,
    _over_axis,
    haar_forward,
    pyramid_offsets,
    slot_table,
)

__all__ = [
    "ParaproductSpec",
    "EstimatorInconsistencyError",
    "para_apply",
    "para_adjoint_apply",
    "para_norm",
    "para_norm_vs_bmo",
]


class EstimatorInconsistencyError(RuntimeError):
    """Zero symbol estimate against a visibly nonzero operator norm."""


@dataclass
class ParaproductSpec:
    """Symbol on the acting subspace plus the acting axes of the full space.

    grid is the shift restricted to the acting axes (ambient.subgrid(acting));
    the slot pattern is fixed by the arity per the defining formulas.
    """

    b: MultiFunction
    acting: tuple[int, ...]
    grid: GridShift

    def __post_init__(self):
        self.acting = tuple(sorted(self.acting))
        if len(self.acting) not in (1, 2, 3):
            raise ValueError("acting arity must be 1, 2, or 3")
        if self.b.space.n != len(self.acting):
            raise ValueError("symbol must live on the acting subspace")
        if self.grid.space.dims != self.b.space.dims or \
                self.grid.space.L != self.b.space.L:
            raise ValueError("grid does not match the symbol space")


@lru_cache(maxsize=None)
def _slot_maps(L: int, d: int):
    """Per-slot pyramid index (levels 0..L-1), cancellative mask, |U|^(-1/2)."""
    levels, pos, _ = slot_table(L, d)
    offs = pyramid_offsets(L, d)
    canc = levels >= 0
    pyr = np.zeros(levels.shape[0], dtype=np.int64)
    pyr[canc] = np.array(offs)[levels[canc]] + pos[canc]
    norm = np.where(canc, 2.0 ** (0.5 * d * np.maximum(levels, 0)), 0.0)
    pyr.setflags(write=False)
    norm.setflags(write=False)
    return pyr, canc, norm


def _gather_pyramid_to_slots(pyr_arr: np.ndarray, L: int, d: int) -> np.ndarray:
    """(P, rest) pyramid -> (N, rest) aligned on cancellative slots."""
    pyr_idx, canc, _ = _slot_maps(L, d)
    out = pyr_arr[pyr_idx]
    out[~canc] = 0.0
    return out


def _reduce_slots_to_pyramid(slot_arr: np.ndarray, L: int, d: int
                             ) -> np.ndarray:
    """(N, rest) on cancellative slots -> (P, rest), summing patterns."""
    pyr_idx, canc, _ = _slot_maps(L, d)
    offs = pyramid_offsets(L, d)
    out = np.zeros((offs[-1],) + slot_arr.shape[1:], dtype=np.float64)
    np.add.at(out, pyr_idx[canc], slot_arr[canc])
    return out


def _expand(b_arr: np.ndarray, acting: tuple[int, ...], n: int) -> np.ndarray:
    shape = [1] * n
    for axis, size in zip(acting, b_arr.shape):
        shape[axis] = size
    return b_arr.reshape(shape)


def _para_engine(spec: ParaproductSpec, f: MultiFunction, dual: bool
                 ) -> MultiFunction:
    space = f.space
    acting = spec.acting
    sub = spec.grid
    m = len(acting)
    # symbol coefficients, cancellative slots only, with the normalizations
    B = haar_forward(spec.b, sub).values.copy()
    for j, axis in enumerate(acting):
        L, d = space.L, space.dims[axis]
        _, canc, norm = _slot_maps(L, d)
        shape = [1] * m
        shape[j] = canc.shape[0]
        B = B * np.where(canc, norm, 0.0).reshape(shape)
    B = _expand(B, acting, space.n)

    # input analysis: pyramid role on the last acting axis (first axes when
    # dual), Haar coefficients on the other acting axes
    pyr_in = set(acting[:-1]) if dual else {acting[-1]}
    vals = f.values
    for j, axis in enumerate(acting):
        L, d = space.L, space.dims[axis]
        w = sub.omega[j]
        if axis in pyr_in:
            vals = _over_axis(
                vals, axis,
                lambda a, w=w, L=L, d=d: _gather_pyramid_to_slots(
                    _axis_pyramid(a, w, L, d), L, d))
        else:
            vals = _over_axis(vals, axis,
                              lambda a, w=w, L=L, d=d: _axis_forward(a, w, L, d))
    vals = B * vals

    # output synthesis: pyramid role on the complementary acting axes
    pyr_out = {acting[-1]} if dual else set(acting[:-1])
    for j, axis in enumerate(acting):
        L, d = space.L, space.dims[axis]
        w = sub.omega[j]
        if axis in pyr_out:
            vals = _over_axis(
                vals, axis,
                lambda a, w=w, L=L, d=d: _axis_pyramid_adjoint(
                    _reduce_slots_to_pyramid(a, L, d), w, L, d))
        else:
            vals = _over_axis(vals, axis,
                              lambda a, w=w, L=L, d=d: _axis_inverse(a, w, L, d))
    return MultiFunction(space, vals)


def para_apply(spec: ParaproductSpec, f: MultiFunction) -> MultiFunction:
    """The defining sum over all acting cubes at all levels of the grid."""
    _check_compat(spec, f)
    return _para_engine(spec, f, dual=False)


def para_adjoint_apply(spec: ParaproductSpec, f: MultiFunction
                       ) -> MultiFunction:
    """Adjoint paraproduct: <para_apply(b, f), g> = <f, para_adjoint(b, g)>."""
    _check_compat(spec, f)
    return _para_engine(spec, f, dual=True)


def _check_compat(spec: ParaproductSpec, f: MultiFunction) -> None:
    for j, axis in enumerate(spec.acting):
        if axis >= f.space.n or \
                f.space.dims[axis] != spec.b.space.dims[j]:
            raise ValueError("acting axes do not match the function space")
    if f.space.L != spec.b.space.L:
        raise ValueError("depth mismatch between symbol and function")


def para_norm(spec: ParaproductSpec, iters: int = 40, seed: int = 0) -> float:
    """Power iteration on the acting subspace (identity elsewhere)."""
    subspace = spec.b.space
    subspec = ParaproductSpec(spec.b, tuple(range(subspace.n)), spec.grid)
    v = MultiFunction.random(subspace, seed)
    est = 0.0
    for _ in range(iters):
        w = para_apply(subspec, v)
        nv = v.norm()
        est = w.norm() / nv if nv > 0 else 0.0
        if est == 0.0:
            break
        v = para_adjoint_apply(subspec, w)
        nrm = v.norm()
        if nrm == 0.0:
            break
        v = (1.0 / nrm) * v
    return float(est)


def para_norm_vs_bmo(spec: ParaproductSpec, iters: int = 40, seed: int = 0
                     ) -> dict:
    """Operator norm against the symbol's BMO surrogate estimate."""
    norm = para_norm(spec, iters, seed)
    if spec.b.space.n == 1:
        bmo = bmo_dyadic_1p(spec.b, spec.grid)
    else:
        bmo = carleson_rect(spec.b, spec.grid).value
    scale = max(spec.b.norm(), 1.0)
    if bmo <= 1e-13 * scale:
        if norm > 1e-10 * scale:
            raise EstimatorInconsistencyError(
                f"zero BMO estimate but operator norm {norm:g}")
        ratio = 0.0
    else:
        ratio = norm / bmo
    return {"norm": norm, "bmo": bmo, "ratio": ratio}
