"""Paraproducts: defining sums, adjoints, norms against BMO."""

import itertools

import numpy as np
import pytest

from dyadlab.grid import DyadicCube, TorusSpace, sample_grid, standard_grid
from dyadlab.haar import HaarFunction, MultiFunction, haar_vector
from dyadlab.kernels import make_operator
from dyadlab.paraproducts import (
    ParaproductSpec,
    para_adjoint_apply,
    para_apply,
    para_norm,
    para_norm_vs_bmo,
)


def _spec1(grid, b):
    return ParaproductSpec(b, (0,), grid)


def test_one_parameter_single_haar_symbol():
    # b = h_V: the sum collapses to <f>_V h_V
    sp = TorusSpace(1, L=4)
    grid = standard_grid(sp)
    V = DyadicCube(grid, 0, 1, 0)
    hV = haar_vector(HaarFunction(V, 1))
    b = MultiFunction(sp, hV)
    f = MultiFunction.random(sp, 1)
    got = para_apply(_spec1(grid, b), f)
    chi = (hV > 0) | (hV < 0)
    avg = f.values[chi].mean()
    assert np.max(np.abs(got.values - avg * hV)) < 1e-12


def test_one_parameter_applied_to_constant():
    # Pi_b 1 = cancellative part of b (b minus its mean)
    sp = TorusSpace(1, L=4)
    grid = sample_grid(sp, 2)
    b = MultiFunction.random(sp, 3)
    got = para_apply(_spec1(grid, b), MultiFunction.constant(sp))
    expect = b.values - b.values.mean()
    assert np.max(np.abs(got.values - expect)) < 1e-12


def test_zero_symbol_zero_output():
    sp = TorusSpace(1, L=3)
    grid = standard_grid(sp)
    b = MultiFunction.constant(sp, 0.0)
    f = MultiFunction.random(sp, 4)
    assert np.all(para_apply(_spec1(grid, b), f).values == 0.0)


def test_adjoint_rank_one_value():
    # b = h_V: Pi*_b f = <f, h_V> chi_V / |V|, i.e. <f, h_V> |V|^(-1/2) h^1_V
    sp = TorusSpace(1, L=4)
    grid = standard_grid(sp)
    V = DyadicCube(grid, 0, 2, 1)
    hV = haar_vector(HaarFunction(V, 1))
    b = MultiFunction(sp, hV)
    f = MultiFunction.random(sp, 5)
    got = para_adjoint_apply(_spec1(grid, b), f)
    coef = f.inner(MultiFunction(sp, hV))
    chi = np.abs(hV) > 0
    expect = coef * chi.astype(float) / V.volume
    assert np.max(np.abs(got.values - expect)) < 1e-12


@pytest.mark.parametrize("acting,n", [((0,), 2), ((1,), 2), ((0, 1), 2),
                                      ((0, 2), 3), ((0, 1, 2), 3)])
def test_adjoint_identity_random(acting, n):
    sp = TorusSpace(n, L=3)
    grid = sample_grid(sp, 6)
    sub = grid.subgrid(acting)
    b = MultiFunction.random(sp.subspace(acting), 7)
    spec = ParaproductSpec(b, acting, sub)
    f = MultiFunction.random(sp, 8)
    g = MultiFunction.random(sp, 9)
    lhs = para_apply(spec, f).inner(g)
    rhs = f.inner(para_adjoint_apply(spec, g))
    assert lhs == pytest.approx(rhs, abs=1e-10)
    # and the reverse orientation: (Pi*)* = Pi
    lhs2 = para_adjoint_apply(spec, f).inner(g)
    rhs2 = f.inner(para_apply(spec, g))
    assert lhs2 == pytest.approx(rhs2, abs=1e-10)


def test_linearity_in_symbol_and_argument():
    sp = TorusSpace(1, L=4)
    grid = sample_grid(sp, 10)
    b1 = MultiFunction.random(sp, 11)
    b2 = MultiFunction.random(sp, 12)
    f1 = MultiFunction.random(sp, 13)
    f2 = MultiFunction.random(sp, 14)
    combo = para_apply(_spec1(grid, b1 + 2.0 * b2), f1)
    split = para_apply(_spec1(grid, b1), f1) + 2.0 * para_apply(
        _spec1(grid, b2), f1)
    assert np.max(np.abs(combo.values - split.values)) < 1e-11
    combo2 = para_apply(_spec1(grid, b1), f1 + 3.0 * f2)
    split2 = para_apply(_spec1(grid, b1), f1) + 3.0 * para_apply(
        _spec1(grid, b1), f2)
    assert np.max(np.abs(combo2.values - split2.values)) < 1e-11


def _cubes_with_haar(grid, param):
    L = grid.space.L
    return [DyadicCube(grid, param, k, p)
            for k in range(L) for p in range(1 << k)]


def test_slot_pattern_fidelity_one_parameter():
    # brute force: sum_V <b,h_V><f,h^1_V><g,h_V> |V|^(-1/2)
    sp = TorusSpace(1, L=3)
    grid = sample_grid(sp, 15)
    b = MultiFunction.random(sp, 16)
    f = MultiFunction.random(sp, 17)
    g = MultiFunction.random(sp, 18)
    total = 0.0
    for V in _cubes_with_haar(grid, 0):
        hv = MultiFunction(sp, haar_vector(HaarFunction(V, 1)))
        h1 = MultiFunction(sp, haar_vector(HaarFunction(V, 0)))
        total += b.inner(hv) * f.inner(h1) * g.inner(hv) * V.volume ** -0.5
    got = para_apply(_spec1(grid, b), f).inner(g)
    assert got == pytest.approx(total, abs=1e-10)


def test_slot_pattern_fidelity_bi_parameter():
    sp = TorusSpace(2, L=3)
    grid = sample_grid(sp, 19)
    b = MultiFunction.random(sp, 20)
    f = MultiFunction.random(sp, 21)
    g = MultiFunction.random(sp, 22)
    spec = ParaproductSpec(b, (0, 1), grid)
    total = 0.0
    for V in _cubes_with_haar(grid, 0):
        for W in _cubes_with_haar(grid, 1):
            hV = haar_vector(HaarFunction(V, 1))
            hW = haar_vector(HaarFunction(W, 1))
            h1V = haar_vector(HaarFunction(V, 0))
            h1W = haar_vector(HaarFunction(W, 0))
            cb = b.inner(MultiFunction.outer(sp, [hV, hW]))
            cf = f.inner(MultiFunction.outer(sp, [hV, h1W]))
            cg = g.inner(MultiFunction.outer(sp, [h1V, hW]))
            total += cb * cf * cg * (V.volume * W.volume) ** -0.5
    got = para_apply(spec, f).inner(g)
    assert got == pytest.approx(total, abs=1e-10)


def test_tri_parameter_matches_triple_sum_with_operator_symbol():
    # symbol = image of the constant under the partial adjoint in axes {1,2};
    # the pairing must reproduce the displayed triple sum exactly
    op = make_operator("modulated3", L=3)
    sp = op.space
    grid = sample_grid(sp, 23)
    symbol = op.with_adjoint([0, 1]).apply(MultiFunction.constant(sp))
    spec = ParaproductSpec(symbol, (0, 1, 2), grid)
    f = MultiFunction.random(sp, 24)
    g = MultiFunction.random(sp, 25)
    total = 0.0
    for K in _cubes_with_haar(grid, 0):
        hK = haar_vector(HaarFunction(K, 1))
        h1K = haar_vector(HaarFunction(K, 0))
        for V in _cubes_with_haar(grid, 1):
            hV = haar_vector(HaarFunction(V, 1))
            h1V = haar_vector(HaarFunction(V, 0))
            for W in _cubes_with_haar(grid, 2):
                hW = haar_vector(HaarFunction(W, 1))
                h1W = haar_vector(HaarFunction(W, 0))
                cb = symbol.inner(MultiFunction.outer(sp, [hK, hV, hW]))
                cf = f.inner(MultiFunction.outer(sp, [hK, hV, h1W]))
                cg = g.inner(MultiFunction.outer(sp, [h1K, h1V, hW]))
                total += cb * cf * cg * \
                    (K.volume * V.volume * W.volume) ** -0.5
    got = para_apply(spec, f).inner(g)
    assert got == pytest.approx(total, abs=1e-10)


def test_para_norm_rank_one_and_dense_oracle():
    sp = TorusSpace(1, L=4)
    grid = standard_grid(sp)
    V = DyadicCube(grid, 0, 1, 0)
    b = MultiFunction(sp, haar_vector(HaarFunction(V, 1)))
    spec = _spec1(grid, b)
    est = para_norm(spec, iters=60, seed=0)
    assert est == pytest.approx(V.volume ** -0.5, rel=1e-6)
    # dense oracle: materialize the operator column by column
    n = sp.axis_cells(0)
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols.append(para_apply(spec, MultiFunction(sp, e)).values)
    dense = np.stack(cols, axis=1)
    svmax = np.linalg.svd(dense, compute_uv=False)[0]
    assert est == pytest.approx(svmax, rel=1e-6)
    # adjoint norm agrees
    cols_t = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols_t.append(para_adjoint_apply(spec, MultiFunction(sp, e)).values)
    sv_adj = np.linalg.svd(np.stack(cols_t, axis=1), compute_uv=False)[0]
    assert sv_adj == pytest.approx(svmax, rel=1e-10)


def test_para_norm_vs_bmo_rank_one_ratio_one():
    sp = TorusSpace(1, L=4)
    grid = standard_grid(sp)
    b = MultiFunction(sp, haar_vector(
        HaarFunction(DyadicCube(grid, 0, 1, 0), 1)))
    out = para_norm_vs_bmo(_spec1(grid, b), iters=60)
    assert out["ratio"] == pytest.approx(1.0, rel=1e-6)


def test_para_norm_vs_bmo_constant_symbol():
    sp = TorusSpace(1, L=4)
    grid = standard_grid(sp)
    out = para_norm_vs_bmo(_spec1(grid, MultiFunction.constant(sp, 4.0)))
    assert out["ratio"] == 0.0 and out["norm"] == 0.0
