"""Dyadic shift operators with lazy coefficient providers.

A shift sums a * <f, tensor of input Haar> * (tensor of output Haar) over all
cube triples I_s, J_s inside K_s at fixed level gaps (i_s, j_s) per parameter,
with |a| bounded by the size factor sqrt(|I||J|)/|K| per parameter (a constant
2^(-(i+j)d/2) at fixed gaps). Coefficients are never materialized globally:
providers are pure vectorized callbacks evaluated on bounded tuple batches.
Cancellative slots read and write Haar coefficients; noncancellative slots go
through the scaling pyramid. Noncancellative slot patterns are admitted only
when some parameter has gaps (0, 0).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from dyadlab.grid import DyadicCube, GridShift, good_mask
from dyadlab.haar import (
    HaarFunction,
    MultiFunction,
    _axis_forward,
    _axis_inverse,
    _axis_pyramid,
    _axis_pyramid_adjoint,
    _over_axis,
    haar_vector,
    pyramid_offsets,
    slot_table,
)
from dyadlab.kernels import OperatorHandle
from dyadlab.representation import (
    TAG_EQUAL,
    TAG_NEAR_LE,
    TAG_NEAR_GT,
    TAG_SEP_LE,
    TAG_SEP_GT,
    basis_pairing_matrix,
    make_s,
    pair_tables,
)

__all__ = [
    "ShiftSpec",
    "ShiftCoefficientError",
    "TripleArrays",
    "shift_apply",
    "shift_adjoint_spec",
    "shift_norm_check",
    "saturating_random_sign_provider",
    "identity_provider",
    "zero_provider",
    "extract_shift_coefficients",
    "ShiftExtractReport",
]


class ShiftCoefficientError(RuntimeError):
    """A provider emitted a coefficient above the size-factor bound."""


@dataclass
class TripleArrays:
    """Column arrays describing every admissible (K, I, J) triple of one
    parameter at fixed gaps."""

    param: int
    gap_in: int
    gap_out: int
    k: np.ndarray        # level of K
    Kpos: np.ndarray
    Ilevel: np.ndarray
    Ipos: np.ndarray
    Ipat: np.ndarray
    Jlevel: np.ndarray
    Jpos: np.ndarray
    Jpat: np.ndarray
    slot_in: np.ndarray
    slot_out: np.ndarray

    def __len__(self) -> int:
        return self.k.shape[0]

    def swapped(self) -> "TripleArrays":
        return TripleArrays(self.param, self.gap_out, self.gap_in,
                            self.k, self.Kpos,
                            self.Jlevel, self.Jpos, self.Jpat,
                            self.Ilevel, self.Ipos, self.Ipat,
                            self.slot_out, self.slot_in)


Provider = Callable[[Sequence[TripleArrays], Sequence[np.ndarray]], np.ndarray]


@dataclass
class ShiftSpec:
    """Grid, per-parameter gaps, coefficient provider, cancellativity flags."""

    grid: GridShift
    complexity: tuple[tuple[int, int], ...]
    provider: Provider
    cancellative: tuple[tuple[bool, bool], ...] | None = None

    def __post_init__(self):
        n = self.grid.space.n
        if len(self.complexity) != n:
            raise ValueError("one (i, j) pair per parameter required")
        if self.cancellative is None:
            self.cancellative = ((True, True),) * n
        if len(self.cancellative) != n:
            raise ValueError("one cancellativity flag pair per parameter")
        for i, j in self.complexity:
            if i < 0 or j < 0:
                raise ValueError("gaps must be nonnegative")
        wants_noncanc = any(not a or not b for a, b in self.cancellative)
        if wants_noncanc and not any(i == 0 and j == 0
                                     for i, j in self.complexity):
            raise ValueError("noncancellative slots require some parameter "
                             "with gaps (0, 0)")

    @property
    def is_cancellative(self) -> bool:
        return all(a and b for a, b in self.cancellative)

    def size_bound(self) -> float:
        """Product of the per-parameter coefficient bounds sqrt(|I||J|)/|K|."""
        out = 1.0
        for s, (i, j) in enumerate(self.complexity):
            out *= 2.0 ** (-0.5 * self.grid.space.dims[s] * (i + j))
        return out


def _descendant_starts(grid: GridShift, param: int, level: int, gap: int
                       ) -> np.ndarray:
    """Per-coordinate offset c with descendants = (2^gap p + u + c) mod 2^(k+g)."""
    d = grid.space.dims[param]
    c = np.zeros(d, dtype=np.int64)
    for m in range(1, gap + 1):
        c = 2 * c + grid.omega[param][level + m - 1].astype(np.int64)
    return c


def _flatten_coords(coords: Sequence[np.ndarray], level: int) -> np.ndarray:
    out = np.zeros(coords[0].shape, dtype=np.int64)
    for c in coords:
        out = (out << level) + c
    return out


def _unflatten(flat: np.ndarray, level: int, d: int) -> list[np.ndarray]:
    return [(flat >> ((d - 1 - t) * level)) & ((1 << level) - 1)
            for t in range(d)]


def enumerate_triples(spec: ShiftSpec, param: int) -> TripleArrays:
    grid = spec.grid
    space = grid.space
    L, d = space.L, space.dims[param]
    gi, gj = spec.complexity[param]
    canc_in, canc_out = spec.cancellative[param]
    max_in = L - 1 if canc_in else L
    max_out = L - 1 if canc_out else L
    kmax = min(max_in - gi, max_out - gj)
    if kmax < 0:
        raise ValueError("complexity exceeds the depth")
    pats_in = range(1, 1 << d) if canc_in else (0,)
    pats_out = range(1, 1 << d) if canc_out else (0,)
    offs = pyramid_offsets(L, d)
    blocks = []
    for k in range(kmax + 1):
        kflat = np.arange(1 << (k * d), dtype=np.int64)
        kcoords = _unflatten(kflat, k, d)
        ci = _descendant_starts(grid, param, k, gi)
        cj = _descendant_starts(grid, param, k, gj)
        ui = np.arange(1 << (gi * d), dtype=np.int64)
        uj = np.arange(1 << (gj * d), dtype=np.int64)
        uic = _unflatten(ui, gi, d)
        ujc = _unflatten(uj, gj, d)
        icoords = [((kc[:, None] << gi) + u[None, :] + c) % (1 << (k + gi))
                   for kc, u, c in zip(kcoords, uic, ci)]
        jcoords = [((kc[:, None] << gj) + u[None, :] + c) % (1 << (k + gj))
                   for kc, u, c in zip(kcoords, ujc, cj)]
        ipos = _flatten_coords(icoords, k + gi)     # (K, Ui)
        jpos = _flatten_coords(jcoords, k + gj)     # (K, Uj)
        nk, nui, nuj = kflat.shape[0], ui.shape[0], uj.shape[0]
        npi, npj = len(pats_in), len(pats_out)
        shape = (nk, nui, nuj, npi, npj)
        Kb = np.broadcast_to(kflat[:, None, None, None, None], shape)
        Ib = np.broadcast_to(ipos[:, :, None, None, None], shape)
        Jb = np.broadcast_to(jpos[:, None, :, None, None], shape)
        Pib = np.broadcast_to(np.array(list(pats_in))[None, None, None, :, None],
                              shape)
        Pjb = np.broadcast_to(np.array(list(pats_out))[None, None, None, None, :],
                              shape)
        flat = [a.reshape(-1) for a in (Kb, Ib, Jb, Pib, Pjb)]
        lvl_i = np.full(flat[0].shape, k + gi, dtype=np.int64)
        lvl_j = np.full(flat[0].shape, k + gj, dtype=np.int64)
        if canc_in:
            slot_in = (1 << (lvl_i * d)) + (flat[3] - 1) * (1 << (lvl_i * d)) \
                + flat[1]
        else:
            slot_in = np.array(offs)[lvl_i] + flat[1]
        if canc_out:
            slot_out = (1 << (lvl_j * d)) + (flat[4] - 1) * (1 << (lvl_j * d)) \
                + flat[2]
        else:
            slot_out = np.array(offs)[lvl_j] + flat[2]
        blocks.append((np.full(flat[0].shape, k, dtype=np.int64), flat[0],
                       lvl_i, flat[1], flat[3], lvl_j, flat[2], flat[4],
                       slot_in, slot_out))
    cols = [np.concatenate([b[i] for b in blocks]) for i in range(10)]
    return TripleArrays(param, gi, gj, *cols)


# ---------------------------------------------------------------------------
# providers


def zero_provider(parts, idx):
    return np.zeros(idx[0].shape[0])


def identity_provider(parts, idx):
    """a = 1 on matching cancellative slots at gaps (0, 0)."""
    out = np.ones(idx[0].shape[0])
    for s, part in enumerate(parts):
        same = (part.Ipos[idx[s]] == part.Jpos[idx[s]]) & \
            (part.Ipat[idx[s]] == part.Jpat[idx[s]])
        out *= same.astype(np.float64)
    return out


def _mix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


def saturating_random_sign_provider(spec_bound: float, seed: int) -> Provider:
    """|a| saturates the size bound with a deterministic per-tuple sign."""

    def provider(parts, idx):
        h = np.full(idx[0].shape[0], np.uint64(seed * 2 + 1), dtype=np.uint64)
        with np.errstate(over="ignore"):
            for s, part in enumerate(parts):
                salt = np.uint64((0x9E3779B97F4A7C15 * (s + 1)) % (1 << 64))
                for col in (part.k, part.Kpos, part.Ipos, part.Ipat,
                            part.Jpos, part.Jpat):
                    h = _mix64(h ^ (col[idx[s]].astype(np.uint64) + salt))
        sign = 2.0 * (h >> np.uint64(63)).astype(np.float64) - 1.0
        return sign * spec_bound

    return provider


def mask_to_root(provider: Provider, param: int, level: int, pos: int
                 ) -> Provider:
    """Restrict a provider to triples whose K in `param` is one fixed cube."""

    def masked(parts, idx):
        vals = provider(parts, idx)
        part = parts[param]
        keep = (part.k[idx[param]] == level) & (part.Kpos[idx[param]] == pos)
        return vals * keep.astype(np.float64)

    return masked


# ---------------------------------------------------------------------------
# application


_BLOCK_CAP = 1 << 20


def shift_apply(spec: ShiftSpec, f: MultiFunction) -> MultiFunction:
    space = spec.grid.space
    if f.space.shape != space.shape:
        raise ValueError("function does not match the shift space")
    n = space.n
    parts = [enumerate_triples(spec, s) for s in range(n)]
    sizes_in, sizes_out = [], []
    vals = f.values
    for s in range(n):
        L, d = space.L, space.dims[s]
        w = spec.grid.omega[s]
        canc_in, _ = spec.cancellative[s]
        if canc_in:
            vals = _over_axis(vals, s,
                              lambda a, w=w, L=L, d=d: _axis_forward(a, w, L, d))
            sizes_in.append(space.axis_cells(s))
        else:
            vals = _over_axis(vals, s,
                              lambda a, w=w, L=L, d=d: _axis_pyramid(a, w, L, d))
            sizes_in.append(pyramid_offsets(L, d)[-1])
        canc_out = spec.cancellative[s][1]
        sizes_out.append(space.axis_cells(s) if canc_out
                         else pyramid_offsets(L, d)[-1])
    cin = vals.reshape(-1)
    dout = np.zeros(int(np.prod(sizes_out)))
    bound = spec.size_bound() * (1.0 + 1e-9)

    lens = [len(p) for p in parts]
    inner = int(np.prod(lens[1:])) if n > 1 else 1
    chunk = max(1, _BLOCK_CAP // max(1, inner))
    inner_idx = None
    if n > 1:
        grids = np.meshgrid(*[np.arange(t) for t in lens[1:]], indexing="ij")
        inner_idx = [g.reshape(-1) for g in grids]
    for lo in range(0, lens[0], chunk):
        hi = min(lens[0], lo + chunk)
        i0 = np.repeat(np.arange(lo, hi), inner)
        idx = [i0]
        if n > 1:
            for g in inner_idx:
                idx.append(np.tile(g, hi - lo))
        a = np.asarray(spec.provider(parts, idx), dtype=np.float64)
        if a.shape != i0.shape:
            raise ValueError("provider returned a batch of the wrong size")
        over = np.abs(a) > bound
        if over.any():
            w = int(np.argmax(np.abs(a)))
            raise ShiftCoefficientError(
                f"coefficient {a[w]:g} exceeds the size bound "
                f"{spec.size_bound():g}")
        flat_in = np.zeros(i0.shape[0], dtype=np.int64)
        flat_out = np.zeros(i0.shape[0], dtype=np.int64)
        for s in range(n):
            flat_in = flat_in * sizes_in[s] + parts[s].slot_in[idx[s]]
            flat_out = flat_out * sizes_out[s] + parts[s].slot_out[idx[s]]
        np.add.at(dout, flat_out, a * cin[flat_in])

    out = dout.reshape(sizes_out)
    for s in range(n):
        L, d = space.L, space.dims[s]
        w = spec.grid.omega[s]
        canc_out = spec.cancellative[s][1]
        if canc_out:
            out = _over_axis(out, s,
                             lambda a, w=w, L=L, d=d: _axis_inverse(a, w, L, d))
        else:
            out = _over_axis(out, s,
                             lambda a, w=w, L=L, d=d:
                             _axis_pyramid_adjoint(a, w, L, d))
    return MultiFunction(f.space, out)


def shift_adjoint_spec(spec: ShiftSpec) -> ShiftSpec:
    """Adjoint shift: gaps and slots swapped, coefficients transposed."""
    base = spec.provider

    def provider(parts, idx):
        return base([p.swapped() for p in parts], idx)

    return ShiftSpec(spec.grid,
                     tuple((j, i) for i, j in spec.complexity),
                     provider,
                     tuple((b, a) for a, b in spec.cancellative))


def shift_norm_check(spec: ShiftSpec, iters: int = 30, seed: int = 0) -> float:
    """Power-iteration estimate of the operator norm of a cancellative shift."""
    if not spec.is_cancellative:
        raise ValueError("norm check targets cancellative shifts")
    adj = shift_adjoint_spec(spec)
    v = MultiFunction.random(spec.grid.space, seed)
    est = 0.0
    for _ in range(iters):
        w = shift_apply(spec, v)
        nv = v.norm()
        est = w.norm() / nv if nv > 0 else 0.0
        if est == 0.0:
            break
        v = shift_apply(adj, w)
        nrm = v.norm()
        if nrm == 0.0:
            break
        v = (1.0 / nrm) * v
    return float(est)


# ---------------------------------------------------------------------------
# coefficient extraction from an operator


@dataclass
class ShiftExtractReport:
    cases: tuple[str, ...]
    complexity: tuple[tuple[int, int], ...]
    per_param: list[list[dict]]
    sup_per_param: list[float]

    @property
    def sup_ratio(self) -> float:
        out = 1.0
        for v in self.sup_per_param:
            out *= v
        return out

    def rows(self, cap: int = 1_000_000):
        """Full tuple rows (levels, positions per parameter, value) for dumps."""
        import itertools
        total = 1
        for rows in self.per_param:
            total *= max(1, len(rows))
        if total > cap:
            raise ValueError(f"{total} tuple rows exceed the dump cap {cap}")
        for combo in itertools.product(*self.per_param):
            value = 1.0
            rec = {}
            for s, row in enumerate(combo):
                value *= row["value"]
                rec[f"k{s}"] = row["k"]
                rec[f"Kpos{s}"] = row["Kpos"]
                rec[f"Ipos{s}"] = row["Ipos"]
                rec[f"Jpos{s}"] = row["Jpos"]
            rec["value"] = value
            yield rec


def _extract_param(op: OperatorHandle, grid: GridShift, param: int, tag: str,
                   ij: tuple[int, int], good_only: bool) -> list[dict]:
    space = grid.space
    L, d = space.L, space.dims[param]
    delta = space.delta
    gi, gj = ij
    if max(gi, gj) > L - 1:
        raise ValueError("complexity exceeds the depth")
    size = 2.0 ** (-0.5 * d * (gi + gj))
    decay = 2.0 ** (-0.5 * delta * max(gi, gj))
    goods = {k: good_mask(grid, param, k) for k in range(L)}
    rows: list[dict] = []
    if tag == "inside":
        if (gi == 0) == (gj == 0):
            raise ValueError("inside extraction needs exactly one positive gap")
        gap = max(gi, gj)
        le = gi > 0  # f cube strictly inside the g cube
        M = op.matrix(param)
        for k in range(L - gap):
            for p in range(1 << (k * d)):
                outer = DyadicCube(grid, param, k,
                                   tuple(_unflatten(np.array([p]), k, d)[t][0]
                                         for t in range(d)))
                starts = _descendant_starts(grid, param, k, gap)
                ui = np.arange(1 << (gap * d), dtype=np.int64)
                uic = _unflatten(ui, gap, d)
                pos = [((np.int64(c) << gap) + u + st) % (1 << (k + gap))
                       for c, u, st in zip(outer.pos, uic, starts)]
                flat = _flatten_coords(pos, k + gap)
                for fp in flat:
                    if good_only and not goods[k + gap][fp]:
                        continue
                    inner = DyadicCube(
                        grid, param, k + gap,
                        tuple(int(x[0]) for x in
                              _unflatten(np.array([fp]), k + gap, d)))
                    for pat_small in range(1, 1 << d):
                        for pat_big in range(1, 1 << d):
                            s = make_s(inner, outer, pat_big)
                            hsmall = haar_vector(HaarFunction(inner, pat_small))
                            if le:
                                val = float(s.values @ M @ hsmall)
                            else:
                                val = float(hsmall @ M @ s.values)
                            rows.append({"k": k, "Kpos": int(p),
                                         "Ipos": int(fp if le else p),
                                         "Jpos": int(p if le else fp),
                                         "value": val,
                                         "ratio": abs(val) / (size * decay)})
        return rows
    codes = {"separated": (TAG_SEP_LE, TAG_SEP_GT),
             "near": (TAG_NEAR_LE, TAG_NEAR_GT),
             "equal": (TAG_EQUAL, TAG_EQUAL)}
    if tag not in codes:
        raise ValueError(f"unknown case tag {tag!r}")
    tables = pair_tables(grid, param)
    P = basis_pairing_matrix(op, grid, param)
    levels, pos, _ = slot_table(L, d)
    want = (tables.gap_f == gi) & (tables.gap_g == gj) & \
        ((tables.tag == codes[tag][0]) | (tables.tag == codes[tag][1]))
    js, is_ = np.nonzero(want)
    for sj, si in zip(js, is_):
        kI, kJ = int(levels[si]), int(levels[sj])
        small_level, small_pos = (kI, int(pos[si])) if kI >= kJ else \
            (kJ, int(pos[sj]))
        if good_only and not goods[small_level][small_pos]:
            continue
        val = float(P[sj, si])
        anc = int(levels[si]) - gi
        rows.append({"k": anc, "Kpos": int(pos[si]) >> (gi * d)
                     if d == 1 else -1,
                     "Ipos": int(pos[si]), "Jpos": int(pos[sj]),
                     "value": val, "ratio": abs(val) / (size * decay)})
    return rows


def extract_shift_coefficients(op: OperatorHandle, grid: GridShift,
                               cases: Sequence[str],
                               complexity: Sequence[tuple[int, int]],
                               good_only: bool = True) -> ShiftExtractReport:
    """Per-parameter term pairings of the operator in the given cases at the
    given gaps, each normalized by the size and decay factors; the supremum
    ratio multiplies across parameters for tensor kernels."""
    space = grid.space
    if len(cases) != space.n or len(complexity) != space.n:
        raise ValueError("one case tag and one gap pair per parameter")
    per_param = []
    sups = []
    for s in range(space.n):
        rows = _extract_param(op, grid, s, cases[s], tuple(complexity[s]),
                              good_only)
        per_param.append(rows)
        sups.append(max((r["ratio"] for r in rows), default=0.0))
    return ShiftExtractReport(tuple(cases), tuple(tuple(c) for c in complexity),
                              per_param, sups)
