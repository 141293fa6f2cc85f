"""Discrete multi-parameter functions and fast Haar calculus.

A MultiFunction stores cell values on the product of finest grids, one array
axis per parameter (axis i has 2^(L*d_i) cells, row-major over coordinates).
The Haar transform runs one butterfly cascade per axis; shifted grids only add
a one-slot cyclic roll per level, because the shifted tree relinks standard
position labels by the omega bits.

Coefficient layout per axis (level-major, total = cell count):
  slot 0                        <f, 1>, the global average
  slots [2^(k*d), 2^((k+1)*d))  level k, pattern-major: for each cancellative
                                pattern eps = 1..2^d-1, all 2^(k*d) cubes in
                                row-major position order
A slot is decoded by slot_table(L, d). Noncancellative values <f, h^1_(k,p)>
live in a separate per-level pyramid with the same position order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from dyadlab.grid import DyadicCube, GridShift, TorusSpace, realize_cube

__all__ = [
    "MultiFunction",
    "HaarFunction",
    "HaarCoeffs",
    "haar_forward",
    "haar_inverse",
    "level_project",
    "partial_pair",
    "partial_pair_values",
    "scaling_pyramid",
    "haar_vector",
    "indicator_vector",
    "synthesis_matrix",
    "slot_table",
    "pyramid_offsets",
    "save_function",
    "load_function",
]


# ---------------------------------------------------------------------------
# functions on the product torus


@dataclass
class MultiFunction:
    """Real function on the n-parameter torus, constant on finest cells."""

    space: TorusSpace
    values: np.ndarray

    def __post_init__(self):
        expect = self.space.shape
        if self.values.shape != expect:
            raise ValueError(f"values shape {self.values.shape} != {expect}")
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def cell_volume(self) -> float:
        vol = 1.0
        for i in range(self.space.n):
            vol *= self.space.cell_volume(i)
        return vol

    def inner(self, other: "MultiFunction") -> float:
        return float(np.vdot(self.values, other.values) * self.cell_volume)

    def norm(self) -> float:
        return float(np.sqrt(np.vdot(self.values, self.values).real
                             * self.cell_volume))

    def copy(self) -> "MultiFunction":
        return MultiFunction(self.space, self.values.copy())

    def __add__(self, other):
        return MultiFunction(self.space, self.values + other.values)

    def __sub__(self, other):
        return MultiFunction(self.space, self.values - other.values)

    def __mul__(self, scalar: float):
        return MultiFunction(self.space, self.values * float(scalar))

    __rmul__ = __mul__

    @classmethod
    def constant(cls, space: TorusSpace, value: float = 1.0) -> "MultiFunction":
        return cls(space, np.full(space.shape, float(value)))

    @classmethod
    def random(cls, space: TorusSpace, seed: int, normalize: bool = True
               ) -> "MultiFunction":
        rng = np.random.default_rng(seed)
        f = cls(space, rng.standard_normal(space.shape))
        if normalize:
            nrm = f.norm()
            if nrm > 0:
                f.values /= nrm
        return f

    @classmethod
    def outer(cls, space: TorusSpace, factors: Sequence[np.ndarray]
              ) -> "MultiFunction":
        """Tensor product of per-parameter cell-value vectors."""
        if len(factors) != space.n:
            raise ValueError("one factor per parameter required")
        vals = np.array(1.0)
        for v in factors:
            vals = np.multiply.outer(vals, np.asarray(v, dtype=np.float64))
        return cls(space, vals.reshape(space.shape))


def save_function(f: MultiFunction, path: str | Path) -> None:
    """Flat little-endian float64 payload plus a JSON sidecar."""
    path = Path(path)
    f.values.astype("<f8").reshape(-1).tofile(path)
    sidecar = {"n": f.space.n, "dims": list(f.space.dims), "L": f.space.L,
               "order": "parameter-major"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_function(path: str | Path, space: TorusSpace) -> MultiFunction:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if (sidecar["n"], tuple(sidecar["dims"]), sidecar["L"]) != \
            (space.n, space.dims, space.L):
        raise ValueError("sidecar does not match the space")
    raw = np.fromfile(path, dtype="<f8")
    return MultiFunction(space, raw.reshape(space.shape))


# ---------------------------------------------------------------------------
# slot bookkeeping


@lru_cache(maxsize=None)
def slot_table(L: int, d: int):
    """Per-slot (level, position, pattern) arrays; level -1 marks the constant."""
    n = 1 << (L * d)
    levels = np.full(n, -1, dtype=np.int64)
    pos = np.zeros(n, dtype=np.int64)
    pat = np.zeros(n, dtype=np.int64)
    for k in range(L):
        start = 1 << (k * d)
        ncubes = 1 << (k * d)
        npat = (1 << d) - 1
        block = np.arange(ncubes * npat)
        levels[start:start + ncubes * npat] = k
        pat[start:start + ncubes * npat] = block // ncubes + 1
        pos[start:start + ncubes * npat] = block % ncubes
    for arr in (levels, pos, pat):
        arr.setflags(write=False)
    return levels, pos, pat


def slot_index(L: int, d: int, level: int, pos_flat: int, pattern: int) -> int:
    """Inverse of slot_table for a single cancellative slot."""
    if not (0 <= level < L) or not (1 <= pattern < (1 << d)):
        raise ValueError("cancellative slots need 0 <= level < L, pattern >= 1")
    return (1 << (level * d)) + (pattern - 1) * (1 << (level * d)) + pos_flat


@lru_cache(maxsize=None)
def pyramid_offsets(L: int, d: int) -> tuple[int, ...]:
    """Start offset of each level block in the scaling pyramid (levels 0..L)."""
    offs, acc = [], 0
    for k in range(L + 1):
        offs.append(acc)
        acc += 1 << (k * d)
    offs.append(acc)
    return tuple(offs)


@lru_cache(maxsize=None)
def _wmat(d: int) -> np.ndarray:
    """Orthonormal 2^d-point butterfly: rows = patterns, cols = child offsets."""
    m = 1 << d
    a = np.arange(m)
    signs = (-1.0) ** np.array([[bin(i & j).count("1") for j in a] for i in a])
    return signs / np.sqrt(m)


def _flat_offsets(e_axes_first: bool, d: int):
    # child-block transpose helper: coordinate t owns bit (d-1-t) of both the
    # child offset integer and the pattern integer
    perm = [2 * t for t in range(d)] + [2 * t + 1 for t in range(d)] + [2 * d]
    return perm


# ---------------------------------------------------------------------------
# single-axis transforms (values laid out as (cells, rest))


def _axis_forward(vals: np.ndarray, omega: np.ndarray, L: int, d: int
                  ) -> np.ndarray:
    rest = vals.shape[1]
    out = np.empty_like(vals)
    v = vals * 2.0 ** (-L * d / 2.0)  # level-L scaling coefficients
    W = _wmat(d)
    for k in range(L - 1, -1, -1):
        m = 1 << (k + 1)
        v = v.reshape((m,) * d + (rest,))
        bits = omega[k]
        for t in range(d):
            if bits[t]:
                v = np.roll(v, -1, axis=t)
        v = v.reshape(sum(((1 << k, 2) for _ in range(d)), ()) + (rest,))
        v = v.transpose(_flat_offsets(True, d))
        v = v.reshape((1 << (k * d), 1 << d, rest))
        w = np.einsum("eb,xbr->xer", W, v)
        start = 1 << (k * d)
        ncubes = 1 << (k * d)
        details = np.moveaxis(w[:, 1:, :], 1, 0)  # (pattern, cube, rest)
        out[start:start + ncubes * ((1 << d) - 1)] = \
            details.reshape(ncubes * ((1 << d) - 1), rest)
        v = w[:, 0, :]
    out[0] = v[0]
    return out


def _axis_inverse(coeffs: np.ndarray, omega: np.ndarray, L: int, d: int
                  ) -> np.ndarray:
    rest = coeffs.shape[1]
    W = _wmat(d)
    v = coeffs[0:1, :].copy()  # level-0 scaling (the constant slot)
    for k in range(L):
        start = 1 << (k * d)
        ncubes = 1 << (k * d)
        npat = (1 << d) - 1
        details = coeffs[start:start + ncubes * npat].reshape(npat, ncubes, rest)
        w = np.empty((ncubes, 1 << d, rest), dtype=np.float64)
        w[:, 0, :] = v
        w[:, 1:, :] = np.moveaxis(details, 0, 1)
        v = np.einsum("eb,xer->xbr", W, w)  # W is symmetric orthogonal
        v = v.reshape((1 << k,) * d + (2,) * d + (rest,))
        inv = np.argsort(_flat_offsets(True, d))
        v = v.transpose(inv)
        m = 1 << (k + 1)
        v = v.reshape((m,) * d + (rest,))
        bits = omega[k]
        for t in range(d):
            if bits[t]:
                v = np.roll(v, 1, axis=t)
        v = v.reshape(m ** d, rest)
    return v * 2.0 ** (L * d / 2.0)


def _axis_pyramid(vals: np.ndarray, omega: np.ndarray, L: int, d: int
                  ) -> np.ndarray:
    """All noncancellative values <f, h^1_(k,p)> for one axis, level blocks
    concatenated coarse-to-fine; shape (sum_k 2^(k*d), rest)."""
    rest = vals.shape[1]
    offs = pyramid_offsets(L, d)
    out = np.empty((offs[-1], rest), dtype=np.float64)
    v = vals * 2.0 ** (-L * d / 2.0)
    out[offs[L]:offs[L + 1]] = v
    W = _wmat(d)
    for k in range(L - 1, -1, -1):
        m = 1 << (k + 1)
        v = v.reshape((m,) * d + (rest,))
        bits = omega[k]
        for t in range(d):
            if bits[t]:
                v = np.roll(v, -1, axis=t)
        v = v.reshape(sum(((1 << k, 2) for _ in range(d)), ()) + (rest,))
        v = v.transpose(_flat_offsets(True, d))
        v = v.reshape((1 << (k * d), 1 << d, rest))
        v = np.einsum("b,xbr->xr", W[0], v)
        out[offs[k]:offs[k + 1]] = v
    return out


def _axis_pyramid_adjoint(pyr: np.ndarray, omega: np.ndarray, L: int, d: int
                          ) -> np.ndarray:
    """Adjoint of _axis_pyramid: cell values of sum_(k,p) c_(k,p) h^1_(k,p)."""
    rest = pyr.shape[1]
    offs = pyramid_offsets(L, d)
    W = _wmat(d)
    v = pyr[offs[0]:offs[1]].copy()
    for k in range(L):
        w = np.einsum("b,xr->xbr", W[0], v)  # spread scaling mass to children
        v = w.reshape((1 << k,) * d + (2,) * d + (rest,))
        inv = np.argsort(_flat_offsets(True, d))
        v = v.transpose(inv)
        m = 1 << (k + 1)
        v = v.reshape((m,) * d + (rest,))
        bits = omega[k]
        for t in range(d):
            if bits[t]:
                v = np.roll(v, 1, axis=t)
        v = v.reshape(m ** d, rest)
        v = v + pyr[offs[k + 1]:offs[k + 2]]
    return v * 2.0 ** (L * d / 2.0)


def _over_axis(values: np.ndarray, axis: int, func) -> np.ndarray:
    moved = np.moveaxis(values, axis, 0)
    lead = moved.shape[0]
    flat = moved.reshape(lead, -1)
    res = func(flat)
    res = res.reshape((res.shape[0],) + moved.shape[1:])
    return np.moveaxis(res, 0, axis)


# ---------------------------------------------------------------------------
# public transforms


@dataclass(frozen=True)
class HaarFunction:
    """One per-parameter Haar function: cube plus sign pattern (0 = h^1)."""

    cube: DyadicCube
    pattern: int = 1

    def __post_init__(self):
        d = self.cube.d
        if not (0 <= self.pattern < (1 << d)):
            raise ValueError("pattern out of range")
        if self.pattern != 0 and self.cube.level >= self.cube.grid.space.L:
            raise ValueError("cancellative Haar needs level < L")

    @property
    def cancellative(self) -> bool:
        return self.pattern != 0


def haar_vector(h: HaarFunction) -> np.ndarray:
    """Cell-value vector of the Haar function along its parameter axis."""
    cube = h.cube
    space = cube.grid.space
    L, d = space.L, cube.d
    box = realize_cube(cube)
    span = 1 << (L - cube.level)
    scale = 1 << L
    axes = []
    for t in range(d):
        start = round(box.left[t] * scale)
        idx = (start + np.arange(span)) % scale
        sign1d = np.zeros(scale)
        bit = (h.pattern >> (d - 1 - t)) & 1
        half = np.ones(span)
        if bit:
            half[span // 2:] = -1.0
        sign1d[idx] = half
        axes.append(sign1d)
    vec = axes[0]
    for t in range(1, d):
        vec = np.multiply.outer(vec, axes[t])
    return vec.reshape(-1) * 2.0 ** (cube.level * d / 2.0)


def indicator_vector(cube: DyadicCube) -> np.ndarray:
    """Cell-value vector of the plain indicator of a realized cube."""
    h = haar_vector(HaarFunction(cube, 0))
    return (h > 0).astype(np.float64)


@dataclass
class HaarCoeffs:
    """Full tensor-basis coefficients; axis i uses the slot layout of axis i."""

    space: TorusSpace
    grid: GridShift
    values: np.ndarray

    def norm_sq(self) -> float:
        return float(np.vdot(self.values, self.values).real)

    def copy(self) -> "HaarCoeffs":
        return HaarCoeffs(self.space, self.grid, self.values.copy())


def haar_forward(f: MultiFunction, grid: GridShift) -> HaarCoeffs:
    """Exact orthonormal analysis against the grid's tensor Haar basis."""
    if grid.space.L != f.space.L or grid.space.dims != f.space.dims:
        raise ValueError("grid depth/dims mismatch")
    vals = f.values
    for i in range(f.space.n):
        L, d = f.space.L, f.space.dims[i]
        vals = _over_axis(vals, i,
                          lambda a, i=i, L=L, d=d:
                          _axis_forward(a, grid.omega[i], L, d))
    return HaarCoeffs(f.space, grid, vals)


def haar_inverse(c: HaarCoeffs) -> MultiFunction:
    """Exact synthesis, inverse of haar_forward."""
    vals = c.values
    for i in range(c.space.n):
        L, d = c.space.L, c.space.dims[i]
        vals = _over_axis(vals, i,
                          lambda a, i=i, L=L, d=d:
                          _axis_inverse(a, c.grid.omega[i], L, d))
    return MultiFunction(c.space, vals)


def scaling_pyramid(f: MultiFunction, grid: GridShift, param: int) -> np.ndarray:
    """Noncancellative analysis along one axis; output axis `param` holds the
    pyramid layout (levels 0..L concatenated), other axes untouched."""
    L, d = f.space.L, f.space.dims[param]
    return _over_axis(f.values, param,
                      lambda a: _axis_pyramid(a, grid.omega[param], L, d))


def level_project(f: MultiFunction, grid: GridShift, param: int,
                  J: DyadicCube, gap: int) -> MultiFunction:
    """Orthogonal projection onto span{h_I : I inside J, l(I) = 2^-gap l(J)}
    in parameter `param`, identity in the others."""
    space = f.space
    if J.param != param:
        raise ValueError("cube parameter mismatch")
    k = J.level + gap
    if gap < 0 or k > space.L:
        raise ValueError("projection level overflows the depth")
    coeffs = haar_forward(f, grid)
    L, d = space.L, space.dims[param]
    levels, pos, _ = slot_table(L, d)
    keep = np.zeros(levels.shape[0], dtype=bool)
    if k < L:
        from dyadlab.grid import ancestor_positions
        anc = ancestor_positions(grid, param, k, J.level)
        jflat = 0
        for t in range(d):
            jflat = (jflat << J.level) + J.pos[t]
        inside = anc == jflat
        sel = (levels == k)
        keep[sel] = inside[pos[sel]]
    shape = [1] * space.n
    shape[param] = keep.shape[0]
    coeffs.values = coeffs.values * keep.reshape(shape)
    return haar_inverse(coeffs)


def partial_pair_values(f: MultiFunction, vectors: dict[int, np.ndarray]):
    """Integrate f against per-parameter cell-value vectors on a parameter
    subset; returns a MultiFunction on the rest, or a float when none remain."""
    if not vectors:
        raise ValueError("need at least one pairing axis")
    vals = f.values
    axes_sorted = sorted(vectors)
    for shiftcount, i in enumerate(axes_sorted):
        weight = np.asarray(vectors[i], dtype=np.float64) * f.space.cell_volume(i)
        vals = np.tensordot(vals, weight, axes=([i - shiftcount], [0]))
    remaining = [i for i in range(f.space.n) if i not in vectors]
    if not remaining:
        return float(vals)
    return MultiFunction(f.space.subspace(remaining), vals)


def partial_pair(f: MultiFunction, haars: Sequence[HaarFunction]):
    """Pair f against a tensor of Haar functions over a subset of parameters."""
    vectors = {}
    for h in haars:
        if h.cube.param in vectors:
            raise ValueError("duplicate parameter in pairing tensor")
        vectors[h.cube.param] = haar_vector(h)
    return partial_pair_values(f, vectors)


@lru_cache(maxsize=32)
def _synthesis_matrix_cached(omega_bytes: bytes, L: int, d: int) -> np.ndarray:
    omega = np.frombuffer(omega_bytes, dtype=np.uint8).reshape(L, d)
    n = 1 << (L * d)
    B = _axis_inverse(np.eye(n), omega, L, d)
    B.setflags(write=False)
    return B


def synthesis_matrix(grid: GridShift, param: int) -> np.ndarray:
    """Columns are the basis functions (cell values) in slot order; B^T B = I
    up to the cell volume factor."""
    L, d = grid.space.L, grid.space.dims[param]
    return _synthesis_matrix_cached(grid.omega[param].astype(np.uint8).tobytes(),
                                    L, d)
