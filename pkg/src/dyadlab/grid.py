"""Dyadic geometry on the n-parameter torus.

Each parameter i lives on the torus [0,1)^{d_i}. A shifted dyadic grid is the
standard lattice translated, at every level k, by the accumulated binary shift
sum_{j>k} 2^{-j} omega^j (mod 1); at finite depth L the shift sequence is
truncated to levels 1..L, so every realized cube is a union of standard
level-L cells. Cubes are labeled by (level, standard position); the
parent/child relation of the shifted grid relinks standard labels by the
omega bits, which keeps all transforms index-based.

Goodness: a cube is bad when it lies within 2 l(I)^gamma l(J)^(1-gamma) of the
boundary of some cube at least 2^r times larger, gamma = delta/(2d + 2delta).
On the torus the level-0 cube is the whole space with empty boundary, so the
search starts at level 1. The relative offsets of a level-k cube inside all
coarser tilings are the mod-2^(k-m) reductions of a single k-bit integer per
coordinate, which makes the goodness probability position-free and exactly
enumerable.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

__all__ = [
    "TorusSpace",
    "GridShift",
    "DyadicCube",
    "Box",
    "sample_grid",
    "standard_grid",
    "realize_cube",
    "torus_distance",
    "is_good",
    "good_mask",
    "exact_pi_good",
    "estimate_pi_good",
]


@dataclass(frozen=True)
class TorusSpace:
    """Ambient product torus: n parameters, per-parameter dimension and depth."""

    n: int
    dims: tuple[int, ...]
    L: int
    delta: float = 0.5
    r: int = 2
    good_margin: float = 2.0

    def __init__(self, n, dims=None, L=4, delta=0.5, r=2, good_margin=2.0):
        # good_margin is the prefactor of the badness threshold
        # good_margin * l(I)^gamma l(J)^(1-gamma). The classical value 2 keeps
        # every non-vacuous cube bad until r > 2/gamma, far beyond desk-scale
        # depths; experiment configs use 0.25 so that pi_good lands in (0, 1).
        if dims is None:
            dims = (1,) * n
        dims = tuple(int(d) for d in dims)
        if n < 1:
            raise ValueError("need at least one parameter")
        if len(dims) != n or any(d < 1 for d in dims):
            raise ValueError("dims must list one dimension >= 1 per parameter")
        if not (2 <= L <= 16):
            raise ValueError("depth L must lie in [2, 16]")
        if not (0.0 < delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        if r < 1:
            raise ValueError("r must be >= 1")
        if good_margin <= 0:
            raise ValueError("good_margin must be positive")
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "L", int(L))
        object.__setattr__(self, "delta", float(delta))
        object.__setattr__(self, "r", int(r))
        object.__setattr__(self, "good_margin", float(good_margin))

    def gamma(self, i: int) -> float:
        """Goodness exponent gamma_i = delta / (2 d_i + 2 delta), in (0, 1/2)."""
        return self.delta / (2.0 * self.dims[i] + 2.0 * self.delta)

    @property
    def gammas(self) -> tuple[float, ...]:
        return tuple(self.gamma(i) for i in range(self.n))

    def axis_cells(self, i: int) -> int:
        """Number of finest cells along parameter i."""
        return 1 << (self.L * self.dims[i])

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.axis_cells(i) for i in range(self.n))

    def cell_volume(self, i: int) -> float:
        return 2.0 ** (-self.L * self.dims[i])

    @property
    def total_cells(self) -> int:
        out = 1
        for i in range(self.n):
            out *= self.axis_cells(i)
        return out

    def subspace(self, params: Sequence[int]) -> "TorusSpace":
        """Space spanned by a subset of the parameters (depth and exponents kept)."""
        params = tuple(params)
        return TorusSpace(len(params), tuple(self.dims[i] for i in params),
                          self.L, self.delta, self.r, self.good_margin)


@dataclass(frozen=True)
class GridShift:
    """Random translation data omega = (omega_i^j), one {0,1}^{d_i} row per level."""

    space: TorusSpace
    omega: tuple[np.ndarray, ...]  # omega[i] has shape (L, d_i), entries in {0,1}
    seed: int | None = None

    def __post_init__(self):
        if len(self.omega) != self.space.n:
            raise ValueError("one shift sequence per parameter required")
        for i, w in enumerate(self.omega):
            if w.shape != (self.space.L, self.space.dims[i]):
                raise ValueError(f"omega[{i}] must have shape (L, d_{i})")
            if not np.isin(w, (0, 1)).all():
                raise ValueError("shift entries must be bits")

    def sigma(self, i: int, level: int) -> np.ndarray:
        """Translation of the level-`level` lattice in parameter i, shape (d_i,)."""
        L = self.space.L
        if not (0 <= level <= L):
            raise ValueError("level out of range")
        scales = 2.0 ** -(np.arange(level + 1, L + 1))
        return scales @ self.omega[i][level:L].astype(float) if level < L \
            else np.zeros(self.space.dims[i])

    def subgrid(self, params: Sequence[int]) -> "GridShift":
        params = tuple(params)
        return GridShift(self.space.subspace(params),
                         tuple(self.omega[i] for i in params), self.seed)

    def to_record(self) -> dict:
        """JSON-ready reproducibility record; bits are hex-packed level-major."""
        bits = []
        for w in self.omega:
            packed = np.packbits(w.astype(np.uint8).reshape(-1))
            bits.append(packed.tobytes().hex())
        return {"seed": self.seed, "n": self.space.n, "L": self.space.L,
                "dims": list(self.space.dims), "bits": bits}

    @classmethod
    def from_record(cls, record: dict, space: TorusSpace) -> "GridShift":
        if record["n"] != space.n or record["L"] != space.L or \
                tuple(record["dims"]) != space.dims:
            raise ValueError("record does not match the space")
        omega = []
        for i, hexs in enumerate(record["bits"]):
            nbits = space.L * space.dims[i]
            raw = np.unpackbits(np.frombuffer(bytes.fromhex(hexs), dtype=np.uint8))
            omega.append(raw[:nbits].reshape(space.L, space.dims[i]).astype(np.uint8))
        return cls(space, tuple(omega), record.get("seed"))


def sample_grid(space: TorusSpace, seed: int) -> GridShift:
    """Draw every omega_i^j independently and uniformly from {0,1}^{d_i}."""
    rng = np.random.default_rng(seed)
    omega = tuple(rng.integers(0, 2, size=(space.L, space.dims[i]), dtype=np.uint8)
                  for i in range(space.n))
    return GridShift(space, omega, seed)


def standard_grid(space: TorusSpace) -> GridShift:
    """The all-zero shift: coincides with the standard dyadic grid."""
    omega = tuple(np.zeros((space.L, space.dims[i]), dtype=np.uint8)
                  for i in range(space.n))
    return GridShift(space, omega, None)


@dataclass(frozen=True)
class DyadicCube:
    """Cube of one parameter's grid: level k and standard position label."""

    grid: GridShift
    param: int
    level: int
    pos: tuple[int, ...]

    def __init__(self, grid: GridShift, param: int, level: int, pos):
        space = grid.space
        if not (0 <= param < space.n):
            raise ValueError("parameter index out of range")
        if not (0 <= level <= space.L):
            raise ValueError("level out of range")
        d = space.dims[param]
        pos = (int(pos),) if np.isscalar(pos) else tuple(int(p) for p in pos)
        if len(pos) != d or any(not (0 <= p < (1 << level)) for p in pos):
            raise ValueError("position out of range for level")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "param", param)
        object.__setattr__(self, "level", level)
        object.__setattr__(self, "pos", pos)

    @property
    def d(self) -> int:
        return self.grid.space.dims[self.param]

    @property
    def side(self) -> float:
        return 2.0 ** -self.level

    @property
    def volume(self) -> float:
        return 2.0 ** (-self.level * self.d)

    def parent(self) -> "DyadicCube":
        if self.level == 0:
            raise ValueError("level-0 cube has no parent")
        w = self.grid.omega[self.param][self.level - 1]
        m = 1 << self.level
        p = tuple(((q - int(b)) % m) >> 1 for q, b in zip(self.pos, w))
        return DyadicCube(self.grid, self.param, self.level - 1, p)

    def child(self, offsets) -> "DyadicCube":
        """Child with geometric half-offsets per coordinate (0 = low half)."""
        if self.level >= self.grid.space.L:
            raise ValueError("finest level has no children")
        offsets = (int(offsets),) if np.isscalar(offsets) else tuple(offsets)
        w = self.grid.omega[self.param][self.level]
        m = 1 << (self.level + 1)
        q = tuple((2 * p + int(e) + int(b)) % m
                  for p, e, b in zip(self.pos, offsets, w))
        return DyadicCube(self.grid, self.param, self.level + 1, q)

    def ancestor(self, level: int) -> "DyadicCube":
        if not (0 <= level <= self.level):
            raise ValueError("ancestor level must be coarser")
        cube = self
        while cube.level > level:
            cube = cube.parent()
        return cube

    def contains(self, other: "DyadicCube") -> bool:
        """Set containment within the same grid and parameter."""
        if other.param != self.param:
            raise ValueError("cubes from different parameters")
        if other.level < self.level:
            return False
        return other.ancestor(self.level).pos == self.pos


@dataclass(frozen=True)
class Box:
    """Realized axis-aligned box on one parameter's torus: left corners + side."""

    left: tuple[float, ...]
    side: float


def realize_cube(cube: DyadicCube) -> Box:
    """Left endpoints (mod 1) and side length of the translated cube."""
    sig = cube.grid.sigma(cube.param, cube.level)
    left = tuple(float((p * cube.side + s) % 1.0) for p, s in zip(cube.pos, sig))
    return Box(left, cube.side)


def _interval_gap(l1: float, s1: float, l2: float, s2: float) -> float:
    """Minimal wrapped gap between two circle arcs, 0 when they intersect."""
    fwd = (l2 - l1) % 1.0
    bwd = (l1 - l2) % 1.0
    if fwd < s1 or bwd < s2:
        return 0.0
    return min(fwd - s1, bwd - s2)


def torus_distance(a: Box, b: Box) -> float:
    """sup-metric distance between two boxes: largest per-coordinate wrapped gap."""
    if len(a.left) != len(b.left):
        raise ValueError("boxes from different parameter dimensions")
    return max(_interval_gap(la, a.side, lb, b.side)
               for la, lb in zip(a.left, b.left))


def _offset_keys(cube: DyadicCube) -> np.ndarray:
    """Per-coordinate k-bit integers whose mod-2^(k-m) parts are the offsets
    of the cube inside every coarser level-m tiling (units of 2^-k)."""
    k = cube.level
    w = cube.grid.omega[cube.param][:k].astype(np.int64)  # rows 1..k
    weights = (1 << np.arange(k - 1, -1, -1, dtype=np.int64)) if k else \
        np.zeros(0, dtype=np.int64)
    shift = weights @ w if k else np.zeros(cube.d, dtype=np.int64)
    pos = np.asarray(cube.pos, dtype=np.int64)
    return (pos - shift) % (1 << k) if k else np.zeros(cube.d, dtype=np.int64)


def _bad_offset_mask(space: TorusSpace, param: int, level: int) -> np.ndarray:
    """Boolean mask over single-coordinate offset keys v in [0, 2^level):
    True where some searched coarser level puts the cube too close to a face."""
    k, r, d = level, space.r, space.dims[param]
    gamma = space.gamma(param)
    v = np.arange(1 << k, dtype=np.int64)
    bad = np.zeros(v.shape, dtype=bool)
    for m in range(1, k - r + 1):  # coarser level m; level 0 has empty boundary
        span = 1 << (k - m)
        off = v & (span - 1)
        dist = np.minimum(off, span - 1 - off) * 2.0 ** -k
        thr = space.good_margin * (2.0 ** -k) ** gamma * (2.0 ** -m) ** (1.0 - gamma)
        bad |= dist <= thr
    return bad


def is_good(cube: DyadicCube) -> bool:
    """False iff some at-least-2^r-times-larger cube of the grid has a boundary
    within 2 l(I)^gamma l(J)^(1-gamma) of the cube (levels >= 1 searched)."""
    mask = _bad_offset_mask(cube.grid.space, cube.param, cube.level)
    keys = _offset_keys(cube)
    return not mask[keys].any()


def good_mask(grid: GridShift, param: int, level: int) -> np.ndarray:
    """Goodness of every level-`level` cube of one parameter, indexed by the
    row-major standard position label; shape (2^(level*d),)."""
    space = grid.space
    k, d = level, space.dims[param]
    bad1 = _bad_offset_mask(space, param, k)
    w = grid.omega[param][:k].astype(np.int64)
    weights = (1 << np.arange(k - 1, -1, -1, dtype=np.int64)) if k else \
        np.zeros(0, dtype=np.int64)
    shift = weights @ w if k else np.zeros(d, dtype=np.int64)
    axis = np.arange(1 << k, dtype=np.int64)
    good = np.ones((1 << k,) * d, dtype=bool)
    for t in range(d):
        keys = (axis - shift[t]) % (1 << k) if k else axis
        shape = [1] * d
        shape[t] = 1 << k
        good &= ~bad1[keys].reshape(shape)
    return good.reshape(-1)


def exact_pi_good(space: TorusSpace, level: int, param: int = 0) -> float:
    """Exact P(random level-k cube is good), by enumerating offset keys."""
    if not (0 <= level <= space.L):
        raise ValueError("level out of range")
    bad = _bad_offset_mask(space, param, level)
    p1 = 1.0 - bad.mean()
    return float(p1 ** space.dims[param])


def estimate_pi_good(space: TorusSpace, level: int, samples: int,
                     seed: int = 0, param: int = 0,
                     pos=None) -> tuple[float, float]:
    """Monte Carlo estimate of P(random level-k cube is good) with stderr."""
    if samples < 1:
        raise ValueError("need at least one sample")
    if pos is None:
        pos = (0,) * space.dims[param]
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(samples):
        sub = np.random.default_rng(rng.integers(0, 2**63))
        omega = tuple(sub.integers(0, 2, size=(space.L, space.dims[i]),
                                   dtype=np.uint8) for i in range(space.n))
        grid = GridShift(space, omega, None)
        hits += is_good(DyadicCube(grid, param, level, pos))
    p = hits / samples
    stderr = float(np.sqrt(max(p * (1.0 - p), 1.0 / samples) / samples))
    return float(p), stderr


@lru_cache(maxsize=None)
def _ancestor_table_cached(omega_bytes: bytes, L: int, d: int, level: int,
                           to_level: int) -> np.ndarray:
    omega = np.frombuffer(omega_bytes, dtype=np.uint8).reshape(L, d)
    axis = np.arange(1 << level, dtype=np.int64)
    coords = [axis.copy() for _ in range(d)]
    for lev in range(level, to_level, -1):
        w = omega[lev - 1]
        for t in range(d):
            coords[t] = ((coords[t] - int(w[t])) % (1 << lev)) >> 1
    # row-major flat label of the level-`to_level` ancestor per flat position
    flat = np.zeros((1 << level,) * d, dtype=np.int64)
    for t in range(d):
        shape = [1] * d
        shape[t] = 1 << level
        flat = flat + (coords[t] << ((d - 1 - t) * to_level)).reshape(shape)
    out = flat.reshape(-1)
    out.setflags(write=False)
    return out


def ancestor_positions(grid: GridShift, param: int, level: int,
                       to_level: int) -> np.ndarray:
    """Vectorized ancestor map: flat row-major label of the level-`to_level`
    ancestor of every level-`level` cube; shape (2^(level*d),), read-only."""
    if to_level > level:
        raise ValueError("ancestor level must be coarser")
    d = grid.space.dims[param]
    omega_bytes = grid.omega[param].astype(np.uint8).tobytes()
    return _ancestor_table_cached(omega_bytes, grid.space.L, d, level, to_level)
