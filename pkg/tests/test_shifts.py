"""Dyadic shifts: engine, bounds, norms, extraction."""

import numpy as np
import pytest

from dyadlab.grid import TorusSpace, sample_grid, standard_grid
from dyadlab.haar import MultiFunction, haar_forward, haar_inverse
from dyadlab.kernels import make_operator
from dyadlab.shifts import (
    ShiftCoefficientError,
    ShiftSpec,
    enumerate_triples,
    extract_shift_coefficients,
    identity_provider,
    mask_to_root,
    saturating_random_sign_provider,
    shift_adjoint_spec,
    shift_apply,
    shift_norm_check,
    zero_provider,
)


def _cancellative_part(f, grid):
    c = haar_forward(f, grid)
    # zero every slot that touches a constant direction
    for axis in range(f.space.n):
        sl = [slice(None)] * f.space.n
        sl[axis] = 0
        c.values[tuple(sl)] = 0.0
    return haar_inverse(c)


def test_size_bound_hand_value():
    sp = TorusSpace(1, L=4)
    grid = standard_grid(sp)
    spec = ShiftSpec(grid, ((2, 1),), zero_provider)
    assert spec.size_bound() == pytest.approx(2.0 ** -1.5)


def test_identity_shift_on_cancellative_span():
    sp = TorusSpace(2, L=3)
    grid = sample_grid(sp, 1)
    spec = ShiftSpec(grid, ((0, 0), (0, 0)), identity_provider)
    f = MultiFunction.random(sp, 2)
    got = shift_apply(spec, f)
    expect = _cancellative_part(f, grid)
    assert np.max(np.abs(got.values - expect.values)) < 1e-11


def test_zero_provider_zero_output():
    sp = TorusSpace(1, L=4)
    spec = ShiftSpec(standard_grid(sp), ((1, 1),), zero_provider)
    f = MultiFunction.random(sp, 3)
    assert np.all(shift_apply(spec, f).values == 0.0)


def test_bound_violation_is_hard_error():
    sp = TorusSpace(1, L=3)
    grid = standard_grid(sp)

    def hot(parts, idx):
        return np.full(idx[0].shape[0], 1.0)  # bound at (1,1) is 1/2

    spec = ShiftSpec(grid, ((1, 1),), hot)
    with pytest.raises(ShiftCoefficientError):
        shift_apply(spec, MultiFunction.random(sp, 4))


def test_linearity():
    sp = TorusSpace(1, L=4)
    grid = sample_grid(sp, 5)
    spec = ShiftSpec(grid, ((1, 1),),
                     saturating_random_sign_provider(0.5, seed=9))
    f = MultiFunction.random(sp, 6)
    g = MultiFunction.random(sp, 7)
    lhs = shift_apply(spec, f + 2.0 * g)
    rhs = shift_apply(spec, f) + 2.0 * shift_apply(spec, g)
    assert np.max(np.abs(lhs.values - rhs.values)) < 1e-11


@pytest.mark.parametrize("n,complexity", [(1, ((1, 2),)), (2, ((1, 0), (1, 1)))])
def test_adjoint_identity(n, complexity):
    sp = TorusSpace(n, L=4)
    grid = sample_grid(sp, 8)
    bound = ShiftSpec(grid, complexity, zero_provider).size_bound()
    spec = ShiftSpec(grid, complexity,
                     saturating_random_sign_provider(bound, seed=4))
    adj = shift_adjoint_spec(spec)
    f = MultiFunction.random(sp, 9)
    g = MultiFunction.random(sp, 10)
    assert shift_apply(spec, f).inner(g) == pytest.approx(
        f.inner(shift_apply(adj, g)), abs=1e-10)


def test_adjoint_identity_noncancellative():
    sp = TorusSpace(1, L=4)
    grid = sample_grid(sp, 11)
    spec = ShiftSpec(grid, ((0, 0),),
                     saturating_random_sign_provider(1.0, seed=5),
                     cancellative=((False, True),))
    adj = shift_adjoint_spec(spec)
    f = MultiFunction.random(sp, 12)
    g = MultiFunction.random(sp, 13)
    assert shift_apply(spec, f).inner(g) == pytest.approx(
        f.inner(shift_apply(adj, g)), abs=1e-10)


def test_noncancellative_requires_zero_gap_somewhere():
    sp = TorusSpace(2, L=4)
    grid = standard_grid(sp)
    with pytest.raises(ValueError):
        ShiftSpec(grid, ((1, 1), (2, 0)), zero_provider,
                  cancellative=((True, False), (True, True)))
    # fine when one parameter sits at (0, 0)
    ShiftSpec(grid, ((0, 0), (2, 0)), zero_provider,
              cancellative=((True, False), (True, True)))


def test_outputs_orthogonal_across_K():
    sp = TorusSpace(1, L=4)
    grid = sample_grid(sp, 14)
    bound = 2.0 ** -1.0
    base = saturating_random_sign_provider(bound, seed=6)
    f = MultiFunction.random(sp, 15)
    outs = []
    for pos in (0, 1, 2, 3):
        spec = ShiftSpec(grid, ((1, 1),), mask_to_root(base, 0, 2, pos))
        outs.append(shift_apply(spec, f))
    for a in range(4):
        for b in range(a + 1, 4):
            assert outs[a].inner(outs[b]) == pytest.approx(0.0, abs=1e-12)


def test_norm_check_zero_and_saturated():
    sp = TorusSpace(1, L=6)
    grid = sample_grid(sp, 16)
    zero = ShiftSpec(grid, ((1, 1),), zero_provider)
    assert shift_norm_check(zero, iters=3, seed=0) == 0.0
    bound = 0.5
    spec = ShiftSpec(grid, ((1, 1),),
                     saturating_random_sign_provider(bound, seed=7))
    est = shift_norm_check(spec, iters=40, seed=1)
    assert est <= 1.05
    # dense oracle at L = 6
    n = sp.axis_cells(0)
    cols = []
    for jcol in range(n):
        e = np.zeros(n)
        e[jcol] = 1.0
        cols.append(shift_apply(spec, MultiFunction(sp, e)).values)
    dense = np.linalg.svd(np.stack(cols, axis=1), compute_uv=False)[0]
    assert dense <= 1.0 + 1e-9
    assert abs(est - dense) / dense < 0.01


def test_enumerate_triples_counts():
    sp = TorusSpace(1, L=4)
    grid = standard_grid(sp)
    spec = ShiftSpec(grid, ((1, 1),), zero_provider)
    parts = enumerate_triples(spec, 0)
    # K levels 0..2, each K has 2 I-children and 2 J-children
    assert len(parts) == (1 + 2 + 4) * 4


def test_extract_equal_case_antisymmetric_diagonal():
    op = make_operator("hilbert1", L=4)
    grid = standard_grid(op.space)
    rep = extract_shift_coefficients(op, grid, ["equal"], [(0, 0)])
    assert rep.sup_ratio == pytest.approx(0.0, abs=1e-13)


def test_extract_scaling_linearity():
    # gaps (2,2) admit no separated pairs on the torus (wrap distances keep
    # every cross-half pair inside the near threshold); (3,3) does
    op = make_operator("hilbert1", L=5)
    grid = standard_grid(op.space)
    empty = extract_shift_coefficients(op, grid, ["separated"], [(2, 2)])
    assert empty.sup_ratio == 0.0
    rep1 = extract_shift_coefficients(op, grid, ["separated"], [(3, 3)])
    rep3 = extract_shift_coefficients(op.scaled(3.0), grid, ["separated"],
                                      [(3, 3)])
    assert rep3.sup_ratio == pytest.approx(3.0 * rep1.sup_ratio, rel=1e-12)
    assert rep1.sup_ratio > 0.0


def test_extract_inside_finite_and_rows_dump():
    op = make_operator("hilbert1", L=4, good_margin=0.25)
    grid = standard_grid(op.space)
    rep = extract_shift_coefficients(op, grid, ["inside"], [(2, 0)])
    assert np.isfinite(rep.sup_ratio)
    rows = list(rep.rows())
    assert rows and all("value" in r for r in rows)
    with pytest.raises(ValueError):
        list(rep.rows(cap=0))


def test_extract_validates_inputs():
    op = make_operator("hilbert1", L=3)
    grid = standard_grid(op.space)
    with pytest.raises(ValueError):
        extract_shift_coefficients(op, grid, ["inside"], [(1, 1)])
    with pytest.raises(ValueError):
        extract_shift_coefficients(op, grid, ["separated"], [(9, 0)])
    with pytest.raises(ValueError):
        extract_shift_coefficients(op, grid, ["bogus"], [(1, 1)])
