"""Carleson estimators and lemma-ratio diagnostics."""

import itertools

import numpy as np
import pytest

from dyadlab.grid import DyadicCube, TorusSpace, sample_grid, standard_grid
from dyadlab.haar import (
    HaarFunction,
    MultiFunction,
    haar_vector,
)
from dyadlab.bmo import (
    bmo_dyadic_1p,
    bmo_lemma_check,
    carleson_openset,
    carleson_rect,
    cube_energy,
)
from dyadlab.kernels import make_operator


def test_bmo_1p_constant_zero():
    sp = TorusSpace(1, L=4)
    grid = standard_grid(sp)
    assert bmo_dyadic_1p(MultiFunction.constant(sp, 5.0), grid) == 0.0


def test_bmo_1p_single_haar():
    # b = h_V, V = [0, 1/2): supremum attained at J = V with value sqrt(2)
    sp = TorusSpace(1, L=3)
    grid = standard_grid(sp)
    b = MultiFunction(sp, haar_vector(HaarFunction(DyadicCube(grid, 0, 1, 0), 1)))
    assert bmo_dyadic_1p(b, grid) == pytest.approx(np.sqrt(2.0), abs=1e-12)


def test_bmo_1p_homogeneous():
    sp = TorusSpace(1, L=4)
    grid = sample_grid(sp, 1)
    b = MultiFunction.random(sp, 2)
    assert bmo_dyadic_1p(2.0 * b, grid) == pytest.approx(
        2.0 * bmo_dyadic_1p(b, grid), rel=1e-12)


def test_carleson_rect_single_tensor_haar():
    sp = TorusSpace(2, L=3)
    grid = standard_grid(sp)
    V = DyadicCube(grid, 0, 1, 0)
    W = DyadicCube(grid, 1, 2, 3)
    b = MultiFunction.outer(sp, [haar_vector(HaarFunction(V, 1)),
                                 haar_vector(HaarFunction(W, 1))])
    rep = carleson_rect(b, grid)
    expect = 1.0 / np.sqrt(V.volume * W.volume)
    assert rep.value == pytest.approx(expect, rel=1e-12)
    assert rep.witnesses[0][0] == {"level": 1, "position": 0}
    assert rep.witnesses[0][1] == {"level": 2, "position": 3}


def test_carleson_rect_monotone_under_added_mass():
    sp = TorusSpace(2, L=3)
    grid = sample_grid(sp, 3)
    b = MultiFunction.random(sp, 4)
    extra = MultiFunction.outer(
        sp, [haar_vector(HaarFunction(DyadicCube(grid, 0, 2, 1), 1)),
             haar_vector(HaarFunction(DyadicCube(grid, 1, 1, 1), 1))])
    v1 = carleson_rect(b, grid).value
    # adding squared mass on a fresh coefficient never lowers any sum
    b2 = b + 10.0 * extra
    v2 = carleson_rect(b2, grid).value
    assert v2 >= v1 - 1e-12


def test_carleson_rect_matches_bruteforce():
    sp = TorusSpace(2, L=3)
    grid = sample_grid(sp, 5)
    b = MultiFunction.random(sp, 6)
    rep = carleson_rect(b, grid)
    # oracle: direct inner products and explicit rectangle scan
    coeffs = {}
    for k0, k1 in itertools.product(range(3), range(3)):
        for p0, p1 in itertools.product(range(1 << k0), range(1 << k1)):
            h0 = haar_vector(HaarFunction(DyadicCube(grid, 0, k0, p0), 1))
            h1 = haar_vector(HaarFunction(DyadicCube(grid, 1, k1, p1), 1))
            coeffs[(k0, p0, k1, p1)] = b.inner(MultiFunction.outer(sp, [h0, h1]))
    best = 0.0
    for k0, k1 in itertools.product(range(3), range(3)):
        for p0, p1 in itertools.product(range(1 << k0), range(1 << k1)):
            R0 = DyadicCube(grid, 0, k0, p0)
            R1 = DyadicCube(grid, 1, k1, p1)
            total = 0.0
            for (a0, q0, a1, q1), c in coeffs.items():
                if a0 < k0 or a1 < k1:
                    continue
                if DyadicCube(grid, 0, a0, q0).ancestor(k0).pos != R0.pos:
                    continue
                if DyadicCube(grid, 1, a1, q1).ancestor(k1).pos != R1.pos:
                    continue
                total += c * c
            best = max(best, total / (R0.volume * R1.volume))
    assert rep.value == pytest.approx(np.sqrt(best), rel=1e-10)


def test_cube_energy_sums_patterns():
    sp = TorusSpace(1, dims=(2,), L=2)
    grid = sample_grid(sp, 7)
    b = MultiFunction.random(sp, 8)
    energy = cube_energy(b, grid)
    cube = DyadicCube(grid, 0, 1, (0, 1))
    direct = 0.0
    for pat in (1, 2, 3):
        h = haar_vector(HaarFunction(cube, pat))
        direct += b.inner(MultiFunction(sp, h)) ** 2
    flat = (0 << 1) + 1  # row-major label of coords (0, 1) at level 1
    offset = 1           # level-0 block holds one cube
    assert energy[offset + flat] == pytest.approx(direct, abs=1e-12)


def test_openset_m1_equals_rect():
    sp = TorusSpace(2, L=4)
    grid = sample_grid(sp, 9)
    b = MultiFunction.random(sp, 10)
    rect = carleson_rect(b, grid)
    open1 = carleson_openset(b, grid, 1)
    assert open1.value == rect.value


def test_openset_two_equal_disjoint_rectangles():
    # equal unit masses on two disjoint rectangles of the same measure: the
    # union doubles numerator and denominator, so the report equals rect
    sp = TorusSpace(2, L=3)
    grid = standard_grid(sp)
    r1 = MultiFunction.outer(
        sp, [haar_vector(HaarFunction(DyadicCube(grid, 0, 1, 0), 1)),
             haar_vector(HaarFunction(DyadicCube(grid, 1, 1, 0), 1))])
    r2 = MultiFunction.outer(
        sp, [haar_vector(HaarFunction(DyadicCube(grid, 0, 1, 1), 1)),
             haar_vector(HaarFunction(DyadicCube(grid, 1, 1, 1), 1))])
    b = r1 + r2
    rect = carleson_rect(b, grid)
    open2 = carleson_openset(b, grid, 2)
    assert open2.value == pytest.approx(rect.value, rel=1e-12)


def test_openset_nondecreasing_in_m():
    sp = TorusSpace(2, L=4)
    grid = sample_grid(sp, 11)
    b = MultiFunction.random(sp, 12)
    vals = [carleson_openset(b, grid, m).value for m in (1, 2, 3, 4)]
    assert all(b2 >= a2 - 1e-12 for a2, b2 in zip(vals, vals[1:]))
    assert vals[0] == carleson_rect(b, grid).value


def test_openset_can_beat_single_rectangle():
    # two crossing bands: the union has area 3/4 while any single rectangle
    # holding both masses has area 1, so the union strictly wins
    sp = TorusSpace(2, L=3)
    grid = standard_grid(sp)
    horiz = MultiFunction.outer(
        sp, [haar_vector(HaarFunction(DyadicCube(grid, 0, 0, 0), 1)),
             haar_vector(HaarFunction(DyadicCube(grid, 1, 1, 0), 1))])
    vert = MultiFunction.outer(
        sp, [haar_vector(HaarFunction(DyadicCube(grid, 0, 1, 0), 1)),
             haar_vector(HaarFunction(DyadicCube(grid, 1, 0, 0), 1))])
    b = horiz + 0.9 * vert
    rect = carleson_rect(b, grid).value
    open2 = carleson_openset(b, grid, 2).value
    assert rect == pytest.approx(np.sqrt(2.0), rel=1e-12)
    assert open2 == pytest.approx(np.sqrt((1.0 + 0.81) * 4.0 / 3.0), rel=1e-12)


def test_bmo_lemma_check_hilbert_vanishes():
    # convolution kernels kill the constant directions: symbol identically 0
    op = make_operator("hilbert3", L=4, good_margin=0.25)
    grid = standard_grid(op.space)
    out = bmo_lemma_check(op, grid, count=6, seed=0, kind="bi")
    assert out["max_ratio"] < 1e-12  # zero up to row-sum roundoff


def test_bmo_lemma_check_modulated_finite():
    op = make_operator("modulated3", L=4, good_margin=0.25)
    grid = standard_grid(op.space)
    out = bmo_lemma_check(op, grid, count=6, seed=1, kind="bi")
    assert np.isfinite(out["max_ratio"])
    assert out["max_ratio"] > 0.0
    one = bmo_lemma_check(op, grid, count=6, seed=2, kind="one")
    assert np.isfinite(one["max_ratio"])


def test_bmo_lemma_check_zero_kernel():
    from dyadlab.kernels import OperatorHandle
    sp = TorusSpace(3, L=4, good_margin=0.25)
    zero = OperatorHandle(sp, tuple(np.zeros((16, 16)) for _ in range(3)))
    grid = standard_grid(sp)
    out = bmo_lemma_check(zero, grid, count=4, seed=3)
    assert out["max_ratio"] == 0.0
