"""Finite-depth reconstruction of operator pairings over dyadic grids.

The complete tensor Haar basis of a grid expands <Tf, g> exactly; regrouping
the slot pairs per parameter by their mutual configuration (separated,
inside, equal, near, or involving the constant slot) recovers the structure
of the shift decomposition. On top of the exact fixed-grid expansion sit:

* the eight-term split of a pairing with nested cubes, an exact bilinear
  regrouping via h_big = s + <h_big>_Q * 1 per parameter;
* the Monte Carlo estimator over random grids that keeps only tuples whose
  designated (smaller) cube is good, reweighted by the exact per-level
  goodness probabilities, which is unbiased because goodness depends only on
  shift bits coarser than everything else in the collapsed sums;
* the complexity truncation, where the complexity of a slot pair is the pair
  of level gaps to the minimal common ancestor in the shifted tree, with a
  geometric tail estimate driven by the configured regularity exponent.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dyadlab.grid import (
    DyadicCube,
    GridShift,
    TorusSpace,
    ancestor_positions,
    estimate_pi_good,
    exact_pi_good,
    good_mask,
    realize_cube,
    sample_grid,
    torus_distance,
)
from dyadlab.haar import (
    HaarFunction,
    MultiFunction,
    haar_forward,
    haar_vector,
    indicator_vector,
    slot_table,
    synthesis_matrix,
)
from dyadlab.kernels import OperatorHandle

__all__ = [
    "CasePair",
    "SFunction",
    "EightTermSplit",
    "ReconstructionReport",
    "classify_pair",
    "make_s",
    "eight_term_split",
    "pair_tables",
    "basis_pairing_matrix",
    "fixed_grid_reconstruct",
    "mc_reconstruct",
    "truncated_representation",
    "TAG_NAMES",
]

# per-parameter configuration codes for slot pairs, indexed [g-slot, f-slot]
TAG_CONST_CONST = 0
TAG_CONST_F = 1      # f slot is the constant, g slot a cube
TAG_CONST_G = 2      # g slot is the constant, f slot a cube
TAG_SEP_LE = 3
TAG_SEP_GT = 4
TAG_IN_LE = 5        # I strictly inside J
TAG_IN_GT = 6        # J strictly inside I
TAG_EQUAL = 7
TAG_NEAR_LE = 8
TAG_NEAR_GT = 9

TAG_NAMES = {
    TAG_CONST_CONST: "const_const",
    TAG_CONST_F: "const_f",
    TAG_CONST_G: "const_g",
    TAG_SEP_LE: "separated_le",
    TAG_SEP_GT: "separated_gt",
    TAG_IN_LE: "inside_le",
    TAG_IN_GT: "inside_gt",
    TAG_EQUAL: "equal",
    TAG_NEAR_LE: "near_le",
    TAG_NEAR_GT: "near_gt",
}


@dataclass(frozen=True)
class CasePair:
    """Mutual configuration of two cubes of one parameter."""

    param: int
    I: DyadicCube
    J: DyadicCube
    tag: str                 # separated | inside | equal | near
    f_not_larger: bool       # l(I) <= l(J)

    @property
    def bucket(self) -> str:
        if self.tag == "equal":
            return "equal"
        return f"{self.tag}_{'le' if self.f_not_larger else 'gt'}"


def classify_pair(I: DyadicCube, J: DyadicCube) -> CasePair:
    """Exactly one of separated / inside / equal / near, plus orientation."""
    if I.grid is not J.grid and I.grid.omega is not J.grid.omega:
        for a, b in zip(I.grid.omega, J.grid.omega):
            if not np.array_equal(a, b):
                raise ValueError("cubes live on different grids")
    if I.param != J.param:
        raise ValueError("cubes from different parameters")
    f_not_larger = I.level >= J.level  # finer level = smaller side
    if I.level == J.level and I.pos == J.pos:
        return CasePair(I.param, I, J, "equal", True)
    small, big = (I, J) if f_not_larger else (J, I)
    if big.contains(small):
        return CasePair(I.param, I, J, "inside", f_not_larger)
    gamma = I.grid.space.gamma(I.param)
    dist = torus_distance(realize_cube(I), realize_cube(J))
    thr = small.side ** gamma * big.side ** (1.0 - gamma)
    tag = "separated" if dist > thr else "near"
    return CasePair(I.param, I, J, tag, f_not_larger)


# ---------------------------------------------------------------------------
# s-functions and the eight-term split


@dataclass
class SFunction:
    """Remainder of splitting h_big beyond the child containing a nested cube:
    s = chi_{Q^c} (h_big - <h_big>_Q), so h_big = s + <h_big>_Q * 1 pointwise."""

    small: DyadicCube
    big: DyadicCube
    child: DyadicCube
    pattern: int
    avg: float               # <h_big>_Q, the constant value of h_big on Q
    values: np.ndarray       # cell-value vector along the parameter axis

    def haar_values(self) -> np.ndarray:
        return self.values + self.avg


def make_s(small: DyadicCube, big: DyadicCube, pattern: int = 1) -> SFunction:
    """chi_{Q^c} (h_big - <h_big>_Q) with Q the child of big containing small."""
    if small.level <= big.level or not big.contains(small):
        raise ValueError("need strict nesting: small strictly inside big")
    child = small.ancestor(big.level + 1)
    hvec = haar_vector(HaarFunction(big, pattern))
    chi_q = indicator_vector(child)
    on_child = hvec[chi_q > 0]
    avg = float(on_child[0])
    if not np.all(on_child == avg):
        raise AssertionError("Haar function must be constant on the child")
    values = (hvec - avg) * (1.0 - chi_q)
    return SFunction(small, big, child, pattern, avg, values)


@dataclass
class EightTermSplit:
    """Terms I..VIII of the nested-triple pairing and the exact residual."""

    terms: tuple[float, ...]
    direct: float
    residual: float


def eight_term_split(op: OperatorHandle,
                     pairs: Sequence[tuple[HaarFunction, HaarFunction]]
                     ) -> EightTermSplit:
    """Split <T(h_I1 x h_I2 x h_I3), h_J1 x h_J2 x h_J3> for I1 c J1, I2 c J2,
    J3 c I3 into the eight constant/remainder combinations.

    pairs lists (input Haar, output Haar) per parameter; the split replaces
    the output Haar in parameters 1 and 2 and the input Haar in parameter 3.
    """
    if op.space.n != 3 or len(pairs) != 3:
        raise ValueError("the eight-term split is the three-parameter case")
    svecs, consts, invecs, outvecs = [], [], [], []
    for t, (hin, hout) in enumerate(pairs):
        iv, ov = haar_vector(hin), haar_vector(hout)
        invecs.append(iv)
        outvecs.append(ov)
        if t < 2:
            if not (hin.cube.level > hout.cube.level
                    and hout.cube.contains(hin.cube)):
                raise ValueError(f"parameter {t}: input cube must sit strictly "
                                 "inside the output cube")
            s = make_s(hin.cube, hout.cube, hout.pattern)
        else:
            if not (hout.cube.level > hin.cube.level
                    and hin.cube.contains(hout.cube)):
                raise ValueError("parameter 3: output cube must sit strictly "
                                 "inside the input cube")
            s = make_s(hout.cube, hin.cube, hin.pattern)
        svecs.append(s.values)
        consts.append(s.avg)
    ones = [np.ones_like(v) for v in invecs]
    terms = []
    for b1 in (0, 1):
        for b2 in (0, 1):
            for b3 in (0, 1):
                out1 = ones[0] if b1 else svecs[0]
                out2 = ones[1] if b2 else svecs[1]
                in3 = ones[2] if b3 else svecs[2]
                coef = (consts[0] if b1 else 1.0) * \
                       (consts[1] if b2 else 1.0) * \
                       (consts[2] if b3 else 1.0)
                val = coef * op.pair_cellvecs(
                    [invecs[0], invecs[1], in3], [out1, out2, outvecs[2]])
                terms.append(val)
    direct = op.pair_cellvecs(invecs, outvecs)
    residual = sum(terms) - direct
    return EightTermSplit(tuple(terms), direct, float(residual))


# ---------------------------------------------------------------------------
# slot-pair tables per parameter


@dataclass
class PairTables:
    """Per-parameter configuration of every (g-slot, f-slot) pair."""

    tag: np.ndarray          # int8 codes, shape (N, N), indexed [J, I]
    anc_level: np.ndarray    # level of the minimal common ancestor (0 for const)
    gap_f: np.ndarray        # level gap of the f cube to the ancestor
    gap_g: np.ndarray        # level gap of the g cube to the ancestor
    complexity: np.ndarray   # max(gap_f, gap_g)


def _realized_lefts(grid: GridShift, param: int, level: int) -> np.ndarray:
    """(cells, d) realized left endpoints of all level cubes, by flat label."""
    d = grid.space.dims[param]
    sig = grid.sigma(param, level)
    axis = np.arange(1 << level) * 2.0 ** -level
    coords = np.meshgrid(*[axis] * d, indexing="ij") if d > 1 else [axis]
    lefts = np.stack([((c + s) % 1.0).reshape(-1)
                      for c, s in zip(coords, sig)], axis=-1)
    return lefts


def _gap_matrix(la: np.ndarray, sa: float, lb: np.ndarray, sb: float
                ) -> np.ndarray:
    """Pairwise sup-metric torus gaps between level-a boxes and level-b boxes."""
    gaps = None
    for t in range(la.shape[1]):
        fwd = (lb[None, :, t] - la[:, None, t]) % 1.0
        bwd = (la[:, None, t] - lb[None, :, t]) % 1.0
        inter = (fwd < sa) | (bwd < sb)
        g = np.where(inter, 0.0, np.minimum(fwd - sa, bwd - sb))
        gaps = g if gaps is None else np.maximum(gaps, g)
    return gaps


def pair_tables(grid: GridShift, param: int) -> PairTables:
    space = grid.space
    L, d = space.L, space.dims[param]
    n = space.axis_cells(param)
    levels, pos, _ = slot_table(L, d)
    gamma = space.gamma(param)
    tag = np.empty((n, n), dtype=np.int8)
    anc = np.zeros((n, n), dtype=np.int16)
    gf = np.zeros((n, n), dtype=np.int16)
    gg = np.zeros((n, n), dtype=np.int16)

    lefts = {k: _realized_lefts(grid, param, k) for k in range(L)}
    ancmaps = {(k, m): ancestor_positions(grid, param, k, m)
               for k in range(L) for m in range(k + 1)}
    slot_of_level = {k: np.nonzero(levels == k)[0] for k in range(L)}
    const_slots = np.nonzero(levels < 0)[0]

    # pairs involving the constant slot
    tag[np.ix_(const_slots, const_slots)] = TAG_CONST_CONST
    cube_slots = np.nonzero(levels >= 0)[0]
    tag[np.ix_(cube_slots, const_slots)] = TAG_CONST_F
    tag[np.ix_(const_slots, cube_slots)] = TAG_CONST_G

    for a in range(L):          # f-cube level
        for b in range(L):      # g-cube level
            srows = slot_of_level[b]
            scols = slot_of_level[a]
            pa = pos[scols]
            pb = pos[srows]
            mmin = min(a, b)
            eq_count = np.zeros((pb.shape[0], pa.shape[0]), dtype=np.int16)
            for m in range(mmin + 1):
                ea = ancmaps[(a, m)][pa]
                eb = ancmaps[(b, m)][pb]
                eq_count += (eb[:, None] == ea[None, :])
            mstar = eq_count - 1  # ancestors agree at 0..mstar
            block_tag = np.empty(mstar.shape, dtype=np.int8)
            if a == b:
                same = pb[:, None] == pa[None, :]
            else:
                same = np.zeros(mstar.shape, dtype=bool)
            nested = mstar == mmin
            if a > b:
                block_tag[nested] = TAG_IN_LE
            elif b > a:
                block_tag[nested] = TAG_IN_GT
            block_tag[nested & same] = TAG_EQUAL
            disjoint = ~nested if a != b else ~same
            if disjoint.any():
                g = _gap_matrix(lefts[b], 2.0 ** -b, lefts[a], 2.0 ** -a)
                g = g[np.ix_(pb, pa)]
                small_side = 2.0 ** -max(a, b)
                big_side = 2.0 ** -min(a, b)
                thr = small_side ** gamma * big_side ** (1.0 - gamma)
                sep = g > thr
                le = a >= b  # equal-size disjoint pairs collapse to le
                block_tag[disjoint & sep] = TAG_SEP_LE if le else TAG_SEP_GT
                block_tag[disjoint & ~sep] = TAG_NEAR_LE if le else TAG_NEAR_GT
            idx = np.ix_(srows, scols)
            tag[idx] = block_tag
            anc[idx] = mstar
            gf[idx] = a - mstar
            gg[idx] = b - mstar
    comp = np.maximum(gf, gg).astype(np.int16)
    return PairTables(tag, anc, gf, gg, comp)


def basis_pairing_matrix(op: OperatorHandle, grid: GridShift, param: int
                         ) -> np.ndarray:
    """P[J, I] = <T_i b_I, b_J> over the full slot basis of one parameter."""
    B = synthesis_matrix(grid, param)
    return B.T @ op.matrix(param) @ B


# ---------------------------------------------------------------------------
# reports


@dataclass
class ReconstructionReport:
    mode: str
    direct: float
    reconstructed: float
    buckets: dict[str, float] | None = None
    complexity_cap: int | None = None
    tail_bound: float | None = None
    mc_samples: int | None = None
    mc_stderr: float | None = None
    sm_convention: str | None = None
    pi_good: list[list[float]] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def abs_error(self) -> float:
        return abs(self.reconstructed - self.direct)

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.direct), 1e-300)
        return self.abs_error / scale

    def to_json(self) -> str:
        payload = {
            "mode": self.mode,
            "direct": self.direct,
            "reconstructed": self.reconstructed,
            "abs_error": self.abs_error,
            "rel_error": self.rel_error,
            "buckets": self.buckets,
            "complexity_cap": self.complexity_cap,
            "tail_bound": self.tail_bound,
            "mc_samples": self.mc_samples,
            "mc_stderr": self.mc_stderr,
            "sm_convention": self.sm_convention,
            "pi_good": self.pi_good,
        }
        payload.update(self.extra)
        return json.dumps(payload, indent=2)


def _contract(F: np.ndarray, G: np.ndarray, mats: Sequence[np.ndarray]
              ) -> float:
    vals = F
    for i, P in enumerate(mats):
        moved = np.moveaxis(vals, i, 0)
        out = P @ moved.reshape(moved.shape[0], -1)
        vals = np.moveaxis(out.reshape(moved.shape), 0, i)
    return float(np.vdot(G, vals))


def fixed_grid_reconstruct(op: OperatorHandle, f: MultiFunction,
                           g: MultiFunction, grid: GridShift,
                           with_buckets: bool = True) -> ReconstructionReport:
    """Expand <Tf, g> over the complete Haar basis of one grid and regroup by
    per-parameter case buckets; exact up to roundoff."""
    n = op.space.n
    F = haar_forward(f, grid).values
    G = haar_forward(g, grid).values
    Ps = [basis_pairing_matrix(op, grid, i) for i in range(n)]
    direct = op.pair(f, g)
    buckets: dict[str, float] = {}
    if with_buckets:
        tables = [pair_tables(grid, i) for i in range(n)]
        masks = []
        for i in range(n):
            codes = sorted(set(tables[i].tag.reshape(-1).tolist()))
            masks.append([(c, Ps[i] * (tables[i].tag == c)) for c in codes])

        def recurse(axis: int, arr: np.ndarray, prefix: tuple[str, ...]):
            if axis == n:
                buckets["|".join(prefix)] = float(np.vdot(G, arr))
                return
            for code, mat in masks[axis]:
                moved = np.moveaxis(arr, axis, 0)
                nxt = mat @ moved.reshape(moved.shape[0], -1)
                nxt = np.moveaxis(nxt.reshape(moved.shape), 0, axis)
                if np.any(nxt):
                    recurse(axis + 1, nxt, prefix + (TAG_NAMES[code],))

        recurse(0, F, ())
        reconstructed = float(sum(buckets.values()))
    else:
        reconstructed = _contract(F, G, Ps)
    return ReconstructionReport("fixed", direct, reconstructed,
                                buckets=buckets if with_buckets else None)


# ---------------------------------------------------------------------------
# Monte Carlo estimator over random grids


def _designation_tables(space: TorusSpace, param: int, convention: str):
    """Grid-independent choice of the designated cube per slot pair: its level
    (-1 when both slots are constants) and flat position."""
    L, d = space.L, space.dims[param]
    levels, pos, _ = slot_table(L, d)
    kI = levels[None, :]
    kJ = levels[:, None]
    pI = pos[None, :]
    pJ = pos[:, None]
    if convention == "smaller":
        pick_f = (kI >= kJ) & (kI >= 0)         # ties designate the f side
        pick_g = (~pick_f) & (kJ >= 0)
    elif convention == "f_side":
        pick_f = kI >= 0
        pick_g = (~pick_f) & (kJ >= 0)
    else:
        raise ValueError("sm convention must be 'smaller' or 'f_side'")
    lev = np.where(pick_f, kI, np.where(pick_g, kJ, -1)).astype(np.int64)
    ps = np.where(pick_f, pI, np.where(pick_g, pJ, 0)).astype(np.int64)
    return lev, ps


def _pi_vector(space: TorusSpace, param: int, source: str, seed: int,
               mc_samples: int) -> np.ndarray:
    if source == "exact":
        return np.array([exact_pi_good(space, k, param)
                         for k in range(space.L)])
    if source == "mc":
        return np.array([estimate_pi_good(space, k, mc_samples,
                                          seed=seed + 7919 * k, param=param)[0]
                         for k in range(space.L)])
    raise ValueError("pi source must be 'exact' or 'mc'")


def mc_reconstruct(op: OperatorHandle, f: MultiFunction, g: MultiFunction,
                   samples: int, seed: int, sm_convention: str = "smaller",
                   pi_source: str = "exact", pi_mc_samples: int = 4000,
                   workers: int = 1) -> ReconstructionReport:
    """Monte Carlo over random grids, counting only tuples whose designated
    cube is good per parameter, weighted by 1/pi_good at the cube's level."""
    if samples < 1:
        raise ValueError("need at least one sample")
    space = op.space
    n = space.n
    pis = [_pi_vector(space, i, pi_source, seed, pi_mc_samples)
           for i in range(n)]
    for i in range(n):
        if np.any(pis[i] == 0.0):
            raise ValueError(
                f"pi_good vanishes at parameter {i} levels "
                f"{np.nonzero(pis[i] == 0.0)[0].tolist()}; configuration "
                "rejected (raise good_margin, lower r, or shrink L)")
    desig = [_designation_tables(space, i, sm_convention) for i in range(n)]
    direct = op.pair(f, g)
    ss = np.random.SeedSequence(seed)
    child_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(samples)]

    def one_sample(sample_seed: int) -> float:
        grid = sample_grid(space, sample_seed)
        F = haar_forward(f, grid).values
        G = haar_forward(g, grid).values
        mats = []
        for i in range(n):
            lev, ps = desig[i]
            goods = [good_mask(grid, i, k).astype(np.float64)
                     for k in range(space.L)]
            goodflat = np.concatenate(goods) if goods else np.zeros(0)
            offs = np.cumsum([0] + [gd.shape[0] for gd in goods])
            safe_lev = np.maximum(lev, 0)
            gathered = goodflat[offs[safe_lev] + ps]
            weight = np.where(lev < 0, 1.0, gathered / pis[i][safe_lev])
            mats.append(basis_pairing_matrix(op, grid, i) * weight)
        return _contract(F, G, mats)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(one_sample, child_seeds))
    else:
        values = [one_sample(s) for s in child_seeds]
    values = np.array(values)
    mean = float(values.mean())
    stderr = float(values.std(ddof=1) / np.sqrt(samples)) if samples > 1 else 0.0
    return ReconstructionReport(
        "mc", direct, mean, mc_samples=samples, mc_stderr=stderr,
        sm_convention=sm_convention,
        pi_good=[p.tolist() for p in pis])


# ---------------------------------------------------------------------------
# complexity truncation


def _normalized_coefficient_sup(op: OperatorHandle, grid: GridShift,
                                tables: Sequence[PairTables],
                                Ps: Sequence[np.ndarray]) -> float:
    """Empirical sup of |pairing| / (size factor * decay factor) over
    cancellative slot pairs, multiplied across parameters."""
    delta = op.space.delta
    out = 1.0
    for i in range(op.space.n):
        t = tables[i]
        cube = t.tag >= TAG_SEP_LE
        if not np.any(cube):
            continue
        d = op.space.dims[i]
        size = 2.0 ** (-0.5 * d * (t.gap_f + t.gap_g))
        decay = 2.0 ** (-0.5 * delta * t.complexity)
        ratio = np.abs(Ps[i]) / (size * decay)
        out *= float(ratio[cube].max())
    return out


def truncated_representation(op: OperatorHandle, f: MultiFunction,
                             g: MultiFunction, grid: GridShift, i_max: int
                             ) -> ReconstructionReport:
    """Keep only slot pairs whose per-parameter complexity is at most i_max;
    report the value and a geometric tail estimate."""
    if i_max < 0:
        raise ValueError("i_max must be nonnegative")
    n = op.space.n
    delta = op.space.delta
    F = haar_forward(f, grid).values
    G = haar_forward(g, grid).values
    Ps = [basis_pairing_matrix(op, grid, i) for i in range(n)]
    tables = [pair_tables(grid, i) for i in range(n)]
    masked = [Ps[i] * (tables[i].complexity <= i_max) for i in range(n)]
    value = _contract(F, G, masked)
    full = _contract(F, G, Ps)
    csup = _normalized_coefficient_sup(op, grid, tables, Ps)
    ratio = 2.0 ** (-0.5 * delta)
    geom_all = 1.0 / (1.0 - ratio)
    geom_tail = ratio ** (i_max + 1) * geom_all  # sum_{c > i_max} 2^(-c delta/2)
    # n A^(n-1) (A - B) dominates A^n - B^n, keeping the tail purely geometric
    tail = csup * n * geom_all ** (n - 1) * geom_tail * f.norm() * g.norm()
    report = ReconstructionReport(
        "truncated", full, value, complexity_cap=i_max, tail_bound=tail)
    report.extra["normalized_coefficient_sup"] = csup
    return report
