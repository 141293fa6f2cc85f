"""Kernel descriptors, singular quadrature, and tensor operator handles.

Operators act separably: one pairing matrix per parameter, entry (c, c') the
integral of the kernel over the cell pair, so <Tu, v> = v^T M u on cell-value
vectors with no extra volume factors. Cell pairs with positive torus gap are
integrated by graded bisection plus tensor Gauss-Legendre; touching pairs
(diagonal, adjacent, wrap-adjacent) by quadtree refinement toward the
singular set with a dyadic cutoff at `refine` extra halvings. Declared
antisymmetric kernels get an exactly zero diagonal and exact
antisymmetrization; declared finite diagonals are checked for shell decay and
a growing shell sum raises (non-integrable diagonal).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from dyadlab.grid import TorusSpace
from dyadlab.haar import HaarFunction, MultiFunction, haar_vector

__all__ = [
    "KernelQuadratureError",
    "QuadRule",
    "PeriodicHilbert",
    "FourierPoly",
    "Modulated",
    "RoughPower",
    "Tabulated",
    "build_pairing_matrix",
    "OperatorHandle",
    "build_operator",
    "operator_norm",
    "operator_dense",
    "make_operator",
    "parse_kernel_name",
]


class KernelQuadratureError(RuntimeError):
    """Raised when a declared-finite diagonal fails to converge."""


@dataclass(frozen=True)
class QuadRule:
    """Gauss-Legendre order, touching-pair refinement depth, grading factor."""

    q: int = 4
    refine: int = 6
    near_factor: float = 2.0


def torus_frac(u: np.ndarray) -> np.ndarray:
    """Signed wrapped difference in (-1/2, 1/2]."""
    v = np.asarray(u) % 1.0
    return np.where(v > 0.5, v - 1.0, v)


# ---------------------------------------------------------------------------
# one-dimensional kernel descriptors


class PeriodicHilbert:
    """cot(pi (x - y)): odd, 1-periodic, principal-value zero on the diagonal."""

    diagonal = "pv"
    symmetry = "anti"
    evaluable = True
    label = "periodic-hilbert"

    def evaluate(self, x, y):
        t = np.asarray(x) - np.asarray(y)
        return 1.0 / np.tan(np.pi * t)

    def swapped(self):
        return _Swapped(self)


@dataclass(frozen=True)
class FourierPoly:
    """Truncated real Fourier series c0 + sum_m (a_m cos 2pi m x + b_m sin)."""

    const: float = 1.0
    cos: tuple[tuple[int, float], ...] = ()
    sin: tuple[tuple[int, float], ...] = ()

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape, self.const)
        for m, a in self.cos:
            out = out + a * np.cos(2.0 * np.pi * m * x)
        for m, b in self.sin:
            out = out + b * np.sin(2.0 * np.pi * m * x)
        return out


@dataclass(frozen=True)
class Modulated:
    """a(x) cot(pi (x - y)) b(y) with smooth periodic modulations a, b."""

    a: FourierPoly
    b: FourierPoly

    diagonal = "finite"
    symmetry = None
    evaluable = True

    @property
    def label(self):
        return "modulated"

    def evaluate(self, x, y):
        t = np.asarray(x) - np.asarray(y)
        return self.a(x) * (1.0 / np.tan(np.pi * t)) * self.b(y)

    def swapped(self):
        return _Swapped(self)


@dataclass(frozen=True)
class RoughPower:
    """|x - y|_torus^(-beta); integrable on the diagonal only for beta < 1."""

    beta: float

    diagonal = "finite"
    symmetry = "sym"
    evaluable = True

    @property
    def label(self):
        return f"rough({self.beta:g})"

    def evaluate(self, x, y):
        t = np.abs(torus_frac(np.asarray(x) - np.asarray(y)))
        return t ** (-self.beta)

    def swapped(self):
        return self  # symmetric


@dataclass
class Tabulated:
    """Cell-pair matrix supplied directly; no pointwise evaluator."""

    table: np.ndarray

    diagonal = "finite"
    symmetry = None
    evaluable = False
    label = "tabulated"

    def swapped(self):
        return Tabulated(self.table.T.copy())


class _Swapped:
    """Kernel with arguments exchanged (partial adjoint on one parameter)."""

    def __init__(self, base):
        self.base = base
        self.diagonal = base.diagonal
        self.symmetry = base.symmetry
        self.evaluable = base.evaluable
        self.label = base.label + "^T"

    def evaluate(self, x, y):
        return self.base.evaluate(y, x)

    def swapped(self):
        return self.base


# ---------------------------------------------------------------------------
# cell-pair quadrature


def _interval_gap_scalar(xa, xb, ya, yb):
    fwd = (ya - xb) % 1.0
    bwd = (xa - yb) % 1.0
    if (ya - xa) % 1.0 < (xb - xa) or (xa - ya) % 1.0 < (yb - ya):
        return 0.0
    return min(fwd, bwd)


def _collect_panels(xa, xb, ya, yb, depth, rule: QuadRule, panels, touch_cap):
    gap = _interval_gap_scalar(xa, xb, ya, yb)
    size = max(xb - xa, yb - ya)
    if gap > 0.0 and (gap >= rule.near_factor * size or depth >= 48):
        panels.append((xa, xb, ya, yb, depth))
        return
    if gap == 0.0 and depth >= touch_cap:
        return  # dyadic principal-value cutoff at the singular set
    xm = 0.5 * (xa + xb)
    ym = 0.5 * (ya + yb)
    for x0, x1 in ((xa, xm), (xm, xb)):
        for y0, y1 in ((ya, ym), (ym, yb)):
            _collect_panels(x0, x1, y0, y1, depth + 1, rule, panels, touch_cap)


@lru_cache(maxsize=None)
def _gl_nodes(q: int):
    nodes, weights = np.polynomial.legendre.leggauss(q)
    return nodes, weights


def _eval_panels(kernel, panels: np.ndarray, shifts: np.ndarray, q: int
                 ) -> np.ndarray:
    """Integrate the kernel over each panel translated by each shift.
    panels: (P, 5) rows (xa, xb, ya, yb, depth); returns (S, P)."""
    nodes, weights = _gl_nodes(q)
    xa, xb, ya, yb = panels[:, 0], panels[:, 1], panels[:, 2], panels[:, 3]
    xm, xw = 0.5 * (xa + xb), 0.5 * (xb - xa)
    ym, yw = 0.5 * (ya + yb), 0.5 * (yb - ya)
    wx = xw[:, None] * weights[None, :]
    wy = yw[:, None] * weights[None, :]
    out = np.empty((shifts.shape[0], panels.shape[0]))
    chunk = max(1, (1 << 22) // max(1, panels.shape[0] * q * q))
    for lo in range(0, shifts.shape[0], chunk):
        sh = shifts[lo:lo + chunk, None, None]
        X = sh + xm[None, :, None] + xw[None, :, None] * nodes[None, None, :]
        Y = sh + ym[None, :, None] + yw[None, :, None] * nodes[None, None, :]
        K = kernel.evaluate(X[:, :, :, None], Y[:, :, None, :])
        out[lo:lo + chunk] = np.einsum("spab,pa,pb->sp", K, wx, wy)
    return out


def build_pairing_matrix(kernel, L: int, rule: QuadRule = QuadRule()
                         ) -> np.ndarray:
    """Matrix of cell-pair kernel integrals at depth L (d = 1 per parameter)."""
    if isinstance(kernel, Tabulated):
        n = 1 << L
        if kernel.table.shape != (n, n):
            raise ValueError("tabulated matrix has the wrong size for L")
        return np.array(kernel.table, dtype=np.float64)
    if not kernel.evaluable:
        raise ValueError("kernel has no pointwise evaluator")
    N = 1 << L
    h = 2.0 ** -L
    nodes, weights = _gl_nodes(rule.q)
    centers = (np.arange(N) + 0.5) * h
    pts = centers[:, None] + 0.5 * h * nodes[None, :]  # (N, q)
    wts = np.full(rule.q, 0.5 * h) * weights

    # far pairs: one tensor Gauss-Legendre panel per cell pair
    M = np.empty((N, N), dtype=np.float64)
    chunk = max(1, (1 << 22) // (N * rule.q * rule.q))
    refine_off = sorted({int(o) for o in range(N)
                         if o == 0
                         or min(o - 1, N - o - 1) < rule.near_factor})
    with np.errstate(divide="ignore", invalid="ignore"):
        for lo in range(0, N, chunk):
            hi = min(N, lo + chunk)
            K = kernel.evaluate(pts[lo:hi, :, None, None], pts[None, None, :, :])
            M[lo:hi] = np.einsum("cakb,a,b->ck", K, wts, wts)

    # touching and near classes: graded panels, shared geometry per offset
    for o in refine_off:
        if o == 0 and kernel.diagonal == "pv":
            M[np.arange(N), np.arange(N)] = 0.0
            continue
        panels: list = []
        _collect_panels(0.0, h, o * h, (o + 1) * h, 0, rule, panels,
                        touch_cap=rule.refine)
        panels_arr = np.array(panels, dtype=np.float64).reshape(-1, 5)
        shifts = np.arange(N) * h
        vals = _eval_panels(kernel, panels_arr, shifts, rule.q) \
            if len(panels) else np.zeros((N, 0))
        if o == 0 and kernel.diagonal == "finite" and len(panels):
            depths = panels_arr[:, 4].astype(int)
            dmax = depths.max()
            if dmax >= 2:
                s_last = np.abs(vals[:, depths == dmax]).sum(axis=1)
                s_prev = np.abs(vals[:, depths == dmax - 1]).sum(axis=1)
                scale = np.abs(vals).sum(axis=1) + 1e-300
                growing = (s_last >= 0.999 * s_prev) & (s_last > 1e-13 * scale)
                if growing.any():
                    raise KernelQuadratureError(
                        f"{kernel.label}: diagonal shell sums do not decay "
                        "(non-integrable declared-finite diagonal)")
        M[np.arange(N), (np.arange(N) + o) % N] = vals.sum(axis=1)

    if kernel.symmetry == "anti":
        M = 0.5 * (M - M.T)
        np.fill_diagonal(M, 0.0)
    elif kernel.symmetry == "sym":
        M = 0.5 * (M + M.T)
    return M


# ---------------------------------------------------------------------------
# operator handles


@dataclass
class OperatorHandle:
    """Separable operator: per-parameter pairing matrices plus adjoint flags."""

    space: TorusSpace
    matrices: tuple[np.ndarray, ...]
    kernels: tuple = ()
    adjoint: tuple[bool, ...] = ()
    name: str = "operator"

    def __post_init__(self):
        if len(self.matrices) != self.space.n:
            raise ValueError("one pairing matrix per parameter required")
        for i, m in enumerate(self.matrices):
            nc = self.space.axis_cells(i)
            if m.shape != (nc, nc):
                raise ValueError(f"matrix {i} has shape {m.shape}, expected {nc}")
        if not self.adjoint:
            self.adjoint = (False,) * self.space.n
        if not self.kernels:
            self.kernels = (None,) * self.space.n

    def matrix(self, i: int) -> np.ndarray:
        return self.matrices[i].T if self.adjoint[i] else self.matrices[i]

    def kernel(self, i: int):
        k = self.kernels[i]
        if k is None:
            return None
        return k.swapped() if self.adjoint[i] else k

    def with_adjoint(self, params: Sequence[int]) -> "OperatorHandle":
        """Partial adjoint: exchange input and output in the listed parameters."""
        flags = list(self.adjoint)
        for i in params:
            flags[i] = not flags[i]
        return OperatorHandle(self.space, self.matrices, self.kernels,
                              tuple(flags), self.name)

    @property
    def full_adjoint(self) -> "OperatorHandle":
        return self.with_adjoint(range(self.space.n))

    def scaled(self, factor: float, param: int = 0) -> "OperatorHandle":
        mats = list(self.matrices)
        mats[param] = mats[param] * float(factor)
        return OperatorHandle(self.space, tuple(mats), self.kernels,
                              self.adjoint, self.name)

    def apply(self, f: MultiFunction) -> MultiFunction:
        """Separable contraction: each axis hit by its matrix over cell measure."""
        if f.space.shape != self.space.shape:
            raise ValueError("function shape does not match the operator space")
        vals = f.values
        for i in range(self.space.n):
            A = self.matrix(i) / self.space.cell_volume(i)
            moved = np.moveaxis(vals, i, 0)
            flat = moved.reshape(moved.shape[0], -1)
            out = A @ flat
            vals = np.moveaxis(out.reshape(moved.shape), 0, i)
        return MultiFunction(f.space, vals)

    def pair(self, f: MultiFunction, g: MultiFunction) -> float:
        """<Tf, g>."""
        return self.apply(f).inner(g)

    def pair_cellvecs(self, fvecs: Sequence[np.ndarray],
                      gvecs: Sequence[np.ndarray]) -> float:
        """<T(tensor f), tensor g> for per-parameter cell vectors (fast path)."""
        out = 1.0
        for i in range(self.space.n):
            out *= float(gvecs[i] @ self.matrix(i) @ fvecs[i])
        return out

    def pair_haar(self, hf: Sequence[HaarFunction], hg: Sequence[HaarFunction]
                  ) -> float:
        """<T(tensor of Haar), tensor of Haar>, fully separable."""
        fvecs = [haar_vector(h) for h in hf]
        gvecs = [haar_vector(h) for h in hg]
        return self.pair_cellvecs(fvecs, gvecs)


def build_operator(space: TorusSpace, kernels: Sequence,
                   rule: QuadRule = QuadRule(), name: str = "operator"
                   ) -> OperatorHandle:
    """Quadrature every per-parameter descriptor into a pairing matrix."""
    if len(kernels) != space.n:
        raise ValueError("one kernel descriptor per parameter required")
    mats = []
    for i, k in enumerate(kernels):
        if space.dims[i] != 1 and not isinstance(k, Tabulated):
            raise ValueError("analytic descriptors are one-dimensional; use a "
                             "tabulated matrix for d_i > 1")
        mats.append(build_pairing_matrix(k, space.L * space.dims[i], rule))
    return OperatorHandle(space, tuple(mats), tuple(kernels), name=name)


def operator_norm(op: OperatorHandle, iters: int = 50, seed: int = 0,
                  return_history: bool = False):
    """Power iteration on T^T T from a seeded start; nondecreasing estimates."""
    if iters < 1:
        raise ValueError("need at least one iteration")
    v = MultiFunction.random(op.space, seed)
    if v.norm() == 0:
        return 0.0
    adj = op.full_adjoint
    history = []
    est = 0.0
    for _ in range(iters):
        w = op.apply(v)
        est = w.norm() / v.norm()
        history.append(est)
        if est == 0.0:
            break
        v = adj.apply(w)
        nrm = v.norm()
        if nrm == 0.0:
            break
        v = (1.0 / nrm) * v
    if return_history:
        return est, history
    return float(est)


def operator_dense(op: OperatorHandle) -> np.ndarray:
    """Full matrix on flattened cell space (volume-normalized application)."""
    total = op.space.total_cells
    if total > 1 << 13:
        raise ValueError("dense materialization capped at 8192 cells")
    out = np.array([[1.0]])
    for i in range(op.space.n):
        out = np.kron(out, op.matrix(i) / op.space.cell_volume(i))
    return out


# ---------------------------------------------------------------------------
# kernel registry


def _modulation_bank(i: int) -> tuple[FourierPoly, FourierPoly]:
    banks = [
        (FourierPoly(1.0, ((1, 0.5),), ((2, 0.25),)),
         FourierPoly(1.0, ((2, -0.4),), ((1, 0.3),))),
        (FourierPoly(1.0, ((1, -0.35), (3, 0.15)), ()),
         FourierPoly(1.0, (), ((1, 0.45),))),
        (FourierPoly(1.0, ((2, 0.3),), ((1, -0.2),)),
         FourierPoly(1.0, ((1, 0.25),), ((3, 0.2),))),
    ]
    return banks[i % len(banks)]


def parse_kernel_name(name: str) -> tuple[int, list]:
    """Registry names: hilbert1/2/3, modulated3, rough:beta (or rough(beta))."""
    name = name.strip().lower()
    if name in ("hilbert1", "hilbert2", "hilbert3"):
        n = int(name[-1])
        return n, [PeriodicHilbert() for _ in range(n)]
    if name == "modulated3":
        return 3, [Modulated(*_modulation_bank(i)) for i in range(3)]
    if name.startswith("rough"):
        spec = name[5:].strip(":() ")
        try:
            beta = float(spec)
        except ValueError:
            raise ValueError(f"cannot parse rough kernel spec {name!r}")
        return 1, [RoughPower(beta)]
    raise ValueError(f"unknown kernel name {name!r}")


def make_operator(name: str, L: int, delta: float = 0.5, r: int = 2,
                  good_margin: float = 0.25, rule: QuadRule = QuadRule()
                  ) -> OperatorHandle:
    """Build a registry operator together with its space."""
    n, kernels = parse_kernel_name(name)
    space = TorusSpace(n, L=L, delta=delta, r=r, good_margin=good_margin)
    return build_operator(space, kernels, rule, name=name)
