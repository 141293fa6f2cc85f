"""Kernel quadrature and operator handles."""

import numpy as np
import pytest

from dyadlab.grid import DyadicCube, TorusSpace, sample_grid, standard_grid
from dyadlab.haar import HaarFunction, MultiFunction, haar_vector, synthesis_matrix
from dyadlab.kernels import (
    KernelQuadratureError,
    Modulated,
    OperatorHandle,
    PeriodicHilbert,
    QuadRule,
    RoughPower,
    Tabulated,
    build_operator,
    build_pairing_matrix,
    make_operator,
    operator_dense,
    operator_norm,
    parse_kernel_name,
)
from dyadlab.kernels import FourierPoly


def test_hilbert_matrix_antisymmetric_exactly():
    M = build_pairing_matrix(PeriodicHilbert(), 4)
    assert np.array_equal(M, -M.T)
    assert np.all(np.diag(M) == 0.0)


def test_hilbert_row_sums_vanish():
    # T1 = 0 for an antisymmetric convolution kernel on the torus
    M = build_pairing_matrix(PeriodicHilbert(), 4)
    assert np.max(np.abs(M.sum(axis=1))) < 1e-12
    assert np.max(np.abs(M.sum(axis=0))) < 1e-12


def test_tabulated_returned_verbatim():
    rng = np.random.default_rng(0)
    table = rng.standard_normal((16, 16))
    M = build_pairing_matrix(Tabulated(table), 4)
    assert np.array_equal(M, table)


def test_hilbert_entries_against_fine_composite_oracle():
    # oracle: composite 64-panel Gauss-Legendre per cell, error ~ 1e-14;
    # the assembled entry's own quadrature error stays below 1e-5 relative
    L = 3
    h = 2.0 ** -L
    M = build_pairing_matrix(PeriodicHilbert(), L)
    nodes, weights = np.polynomial.legendre.leggauss(4)
    sub = 64
    edges = np.arange(sub) * h / sub
    xs = (edges[:, None] + h / sub * 0.5 * (nodes[None, :] + 1)).ravel()
    ws = np.tile(weights * h / sub * 0.5, sub)
    for off in (2, 3):
        ys = xs + off * h
        K = 1.0 / np.tan(np.pi * (xs[:, None] - ys[None, :]))
        oracle = ws @ K @ ws
        assert M[0, off] == pytest.approx(oracle, rel=1e-5)


def test_quadrature_order_refinement_stable():
    # raising q from 4 to 6 moves any Haar-basis pairing by < 1e-6
    L = 6
    grid = standard_grid(TorusSpace(1, L=L))
    B = synthesis_matrix(grid, 0)
    M4 = build_pairing_matrix(PeriodicHilbert(), L, QuadRule(q=4))
    M6 = build_pairing_matrix(PeriodicHilbert(), L, QuadRule(q=6))
    P4 = B.T @ M4 @ B
    P6 = B.T @ M6 @ B
    assert np.max(np.abs(P4 - P6)) < 1e-6


def test_modulated_diagonal_finite_and_stable():
    # diagonal entries converge like the 2^-refine cutoff strip they drop
    kern = Modulated(FourierPoly(1.0, ((1, 0.5),), ()),
                     FourierPoly(1.0, (), ((1, 0.3),)))
    M6 = build_pairing_matrix(kern, 4, QuadRule(refine=6))
    M8 = build_pairing_matrix(kern, 4, QuadRule(refine=8))
    assert np.all(np.isfinite(M6))
    assert np.max(np.abs(np.diag(M6) - np.diag(M8))) < 5e-4


def test_rough_superintegrable_diagonal_ok():
    M = build_pairing_matrix(RoughPower(0.5), 3)
    assert np.all(np.isfinite(M))
    assert np.all(np.diag(M) > 0)


def test_rough_nonintegrable_diagonal_raises():
    with pytest.raises(KernelQuadratureError):
        build_pairing_matrix(RoughPower(1.5), 3)


def test_apply_separable_on_tensors():
    sp = TorusSpace(3, L=3)
    op = make_operator("hilbert3", L=3)
    rng = np.random.default_rng(1)
    u, v, w = (rng.standard_normal(8) for _ in range(3))
    f = MultiFunction.outer(sp, [u, v, w])
    got = op.apply(f)
    vol = sp.cell_volume(0)
    expect = MultiFunction.outer(
        sp, [op.matrices[0] @ u / vol, op.matrices[1] @ v / vol,
             op.matrices[2] @ w / vol])
    assert np.max(np.abs(got.values - expect.values)) < 1e-10


def test_adjoint_pairing_identity():
    op = make_operator("hilbert2", L=4)
    sp = op.space
    f = MultiFunction.random(sp, 2)
    g = MultiFunction.random(sp, 3)
    lhs = op.pair(f, g)
    rhs = f.inner(op.full_adjoint.apply(g))
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_partial_adjoint_involution_and_identity():
    op = make_operator("modulated3", L=3)
    sp = op.space
    f = MultiFunction.random(sp, 4)
    twice = op.with_adjoint([1]).with_adjoint([1])
    assert np.max(np.abs(twice.apply(f).values - op.apply(f).values)) < 1e-12
    # defining identity of the partial adjoint on tensor inputs
    rng = np.random.default_rng(5)
    fS, fC1, fC2 = (rng.standard_normal(8) for _ in range(3))
    gS, gC1, gC2 = (rng.standard_normal(8) for _ in range(3))
    lhs = op.pair(MultiFunction.outer(sp, [fS, fC1, fC2]),
                  MultiFunction.outer(sp, [gS, gC1, gC2]))
    tS = op.with_adjoint([0])
    rhs = tS.pair(MultiFunction.outer(sp, [gS, fC1, fC2]),
                  MultiFunction.outer(sp, [fS, gC1, gC2]))
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_pair_haar_tensor_vs_general_path():
    op = make_operator("hilbert2", L=4)
    grid = sample_grid(op.space, 7)
    hf = [HaarFunction(DyadicCube(grid, 0, 2, 1), 1),
          HaarFunction(DyadicCube(grid, 1, 1, 0), 1)]
    hg = [HaarFunction(DyadicCube(grid, 0, 3, 5), 1),
          HaarFunction(DyadicCube(grid, 1, 2, 2), 1)]
    fast = op.pair_haar(hf, hg)
    f = MultiFunction.outer(op.space, [haar_vector(h) for h in hf])
    g = MultiFunction.outer(op.space, [haar_vector(h) for h in hg])
    assert fast == pytest.approx(op.pair(f, g), abs=1e-10)


def test_pair_haar_antisymmetric_diagonal_zero():
    op = make_operator("hilbert1", L=4)
    grid = standard_grid(op.space)
    h = [HaarFunction(DyadicCube(grid, 0, 2, 1), 1)]
    assert op.pair_haar(h, h) == pytest.approx(0.0, abs=1e-14)


def test_pair_haar_bilinear():
    op = make_operator("hilbert1", L=4)
    grid = standard_grid(op.space)
    h1 = haar_vector(HaarFunction(DyadicCube(grid, 0, 2, 1), 1))
    h2 = haar_vector(HaarFunction(DyadicCube(grid, 0, 1, 0), 1))
    g = haar_vector(HaarFunction(DyadicCube(grid, 0, 3, 6), 1))
    lhs = op.pair_cellvecs([2.0 * h1 + h2], [g])
    rhs = 2.0 * op.pair_cellvecs([h1], [g]) + op.pair_cellvecs([h2], [g])
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_operator_norm_identity_and_zero():
    sp = TorusSpace(1, L=4)
    vol = sp.cell_volume(0)
    ident = OperatorHandle(sp, (np.eye(16) * vol,))
    assert operator_norm(ident, iters=10, seed=0) == pytest.approx(1.0, abs=1e-6)
    zero = OperatorHandle(sp, (np.zeros((16, 16)),))
    assert operator_norm(zero, iters=5, seed=0) == 0.0


def test_operator_norm_stabilizes_and_matches_dense():
    op8 = make_operator("hilbert1", L=8)
    est50, hist = operator_norm(op8, iters=50, seed=1, return_history=True)
    est100 = operator_norm(op8, iters=100, seed=1)
    assert abs(est50 - est100) / est100 < 0.01
    assert all(b >= a - 1e-12 for a, b in zip(hist, hist[1:]))  # monotone
    op6 = make_operator("hilbert1", L=6)
    dense = np.linalg.svd(operator_dense(op6), compute_uv=False)[0]
    power = operator_norm(op6, iters=100, seed=2)
    assert abs(power - dense) / dense < 0.01


def test_registry_names():
    assert parse_kernel_name("hilbert3")[0] == 3
    assert parse_kernel_name("rough:1.5")[1][0].beta == 1.5
    assert parse_kernel_name("rough(0.5)")[1][0].beta == 0.5
    with pytest.raises(ValueError):
        parse_kernel_name("nope")


def test_kernel_swapped_evaluation():
    k = Modulated(FourierPoly(1.0, ((1, 0.5),), ()), FourierPoly(1.0))
    x, y = np.array([0.3]), np.array([0.1])
    assert k.swapped().evaluate(x, y)[0] == pytest.approx(k.evaluate(y, x)[0])
    assert k.swapped().swapped() is k
