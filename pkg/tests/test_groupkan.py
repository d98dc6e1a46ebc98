"""GroupKAN: batched spline evaluation against the recursive reference,
partition of unity, extrapolation, function fitting, group locality, CAM
gating, gradients, and the spline-coefficient counting identity."""

import numpy as np
import pytest

import flowkan.diffcore as dc
import flowkan.groupkan as gk
from flowkan.diffcore import DiffTensor


GRID = gk.SplineGrid()


def pure_spline(coeffs, grid=GRID):
    return gk.SplineFunction(
        grid=grid, coeffs=DiffTensor(np.asarray(coeffs, np.float64)),
        base_scale=DiffTensor(np.asarray(0.0)),
        spline_scale=DiffTensor(np.asarray(1.0)))


def test_batched_eval_matches_recursion_50_functions():
    rng = np.random.default_rng(0)
    xs = np.linspace(GRID.lo, GRID.hi, 100)
    worst = 0.0
    for _ in range(50):
        coeffs = rng.normal(0, 1, GRID.n_bases)
        got = gk.spline_eval(pure_spline(coeffs), DiffTensor(xs, dtype=np.float64)).data
        ref = np.array([gk.de_boor_reference(x, coeffs, GRID) for x in xs])
        worst = max(worst, np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-9)))
    assert worst < 1e-10


def test_partition_of_unity_including_endpoints():
    xs = np.linspace(GRID.lo, GRID.hi, 64)
    with dc.no_grad():
        bases, _, _ = gk._bases_and_derivs(DiffTensor(xs, dtype=np.float64), GRID)
    assert np.allclose(bases.data.sum(axis=-1), 1.0, atol=1e-12)


def test_linear_extrapolation_beyond_grid():
    # all-ones coefficients give the constant function 1 inside the grid;
    # its derivative is 0, so extrapolation stays exactly 1
    ones = np.ones(GRID.n_bases)
    xs = np.array([GRID.lo - 2.0, GRID.lo - 0.1, GRID.hi + 0.1, GRID.hi + 5.0])
    got = gk.spline_eval(pure_spline(ones), DiffTensor(xs, dtype=np.float64)).data
    assert np.allclose(got, 1.0, atol=1e-12)
    # a fitted identity extrapolates along x itself
    coeffs = gk.fit_spline_coeffs(GRID, lambda x: x)
    got = gk.spline_eval(pure_spline(coeffs), DiffTensor(xs, dtype=np.float64)).data
    assert np.allclose(got, xs, atol=1e-9)


def test_fit_reproduces_smooth_function():
    coeffs = gk.fit_spline_coeffs(GRID, np.sin)
    xs = np.linspace(GRID.lo, GRID.hi, 200)
    got = gk.spline_eval(pure_spline(coeffs), DiffTensor(xs, dtype=np.float64)).data
    assert np.max(np.abs(got - np.sin(xs))) < 1e-4


def test_spline_gradients_in_x_and_coeffs():
    rng = np.random.default_rng(1)
    f = gk.SplineFunction.init(rng, dtype=np.float64)
    x = DiffTensor(rng.uniform(-1.5, 1.5, 16), requires_grad=True)
    coeff = rng.standard_normal(16)
    tensors = [x, f.coeffs, f.base_scale, f.spline_scale]
    err = dc.gradcheck(lambda: dc.sum_(gk.spline_eval(f, x) * coeff), tensors)
    assert err < 1e-5


def test_kan_layer_shape_contract_and_gradients():
    rng = np.random.default_rng(2)
    layer = gk.KanLayer.init(rng, 3, 5, dtype=np.float64)
    x = DiffTensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
    with dc.no_grad():
        assert gk.kan_layer_apply(layer, x).shape == (4, 5)
    bad = DiffTensor(np.zeros((4, 7)))
    with pytest.raises(ValueError):
        gk.kan_layer_apply(layer, bad)
    coeff = rng.standard_normal((4, 5))
    tensors = [x] + [t for _, t in layer.named("l")]
    err = dc.gradcheck(
        lambda: dc.sum_(gk.kan_layer_apply(layer, x) * coeff), tensors)
    assert err < 1e-5


def test_group_locality_jacobian_is_block_diagonal():
    # before the CAM gate, output channels of group g must not depend on
    # input channels of any other group
    rng = np.random.default_rng(3)
    c, groups = 8, 4
    p = gk.GroupKanBlockParams.init(rng, c, groups=groups, dtype=np.float64)
    x0 = rng.uniform(-1, 1, (1, 1, c))
    cg = c // groups

    def group_out(x):
        flat = DiffTensor(x.reshape(1, c), dtype=np.float64)
        ys = [gk.kan_stack(dc.narrow(flat, 1, g * cg, cg), p.kan_ops[g])
              for g in range(groups)]
        return dc.concat(ys, axis=1).data[0]

    base = group_out(x0)
    for j in range(c):
        xp = x0.copy()
        xp[0, 0, j] += 1e-3
        delta = group_out(xp) - base
        outside = np.delete(delta, slice((j // cg) * cg, (j // cg + 1) * cg))
        assert np.allclose(outside, 0.0, atol=1e-12)


def test_cam_gate_range_and_time_constancy():
    rng = np.random.default_rng(4)
    p = gk.GroupKanBlockParams.init(rng, 8, dtype=np.float64)
    x = DiffTensor(rng.standard_normal((2, 5, 8)), dtype=np.float64)
    with dc.no_grad():
        gate = gk.cam_gate(x, p.cam_w1, p.cam_w2).data
    assert gate.shape == (2, 1, 8)
    assert np.all((gate > 0) & (gate < 1))


def test_block_residual_and_gradients():
    rng = np.random.default_rng(5)
    p = gk.GroupKanBlockParams.init(rng, 4, groups=2, dtype=np.float64)
    x = DiffTensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    coeff = rng.standard_normal((2, 3, 4))
    tensors = [x] + [t for _, t in p.named("g")]
    err = dc.gradcheck(
        lambda: dc.sum_(gk.groupkan_block(x, p) * coeff), tensors)
    assert err < 1e-4
    with dc.no_grad():
        out = gk.groupkan_block(x, p)
    assert out.shape == x.shape


def test_block_rejects_indivisible_channels():
    rng = np.random.default_rng(6)
    p = gk.GroupKanBlockParams.init(rng, 4, groups=4, dtype=np.float64)
    p.groups = 3
    with pytest.raises(ValueError):
        with dc.no_grad():
            gk.groupkan_block(DiffTensor(np.zeros((1, 2, 4))), p)


def test_drop_path_identity_at_eval_and_scaling_in_training():
    x = DiffTensor(np.ones((4, 2, 3)))
    assert gk.drop_path(x, 0.5, training=False) is x
    rng = np.random.default_rng(7)
    with dc.no_grad():
        y = gk.drop_path(x, 0.5, rng=rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_grouped_spline_coefficients_quarter_of_ungrouped():
    # grouping construction: G groups of (C/G -> C/G) layers hold C^2/G
    # spline functions vs C^2 ungrouped, so G=4 holds exactly 1/4
    rng = np.random.default_rng(8)
    c = 8
    grouped = gk.GroupKanBlockParams.init(rng, c, groups=4, dtype=np.float64)
    ungrouped = gk.GroupKanBlockParams.init(rng, c, groups=1, dtype=np.float64)
    count = lambda p: sum(
        layer.num_spline_coeffs() for ops in p.kan_ops for layer in ops)
    assert count(grouped) * 4 == count(ungrouped)
