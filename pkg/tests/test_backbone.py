"""Velocity backbone: shape contract, zero initial field, time embedding
domain checks, parameter counting, end-to-end gradient check, and the
grouped-vs-ungrouped spline coefficient ratio."""

import numpy as np
import pytest

import flowkan.diffcore as dc
from flowkan.backbone import (BackboneConfig, VelocityNet, count_params,
                              time_features)
from flowkan.diffcore import DiffTensor

TINY = BackboneConfig(widths=(8, 16, 32), action_dim=2, horizon=4,
                      cond_dim=12, time_emb_dim=8, time_freqs=4)


def make_net(cfg=TINY, seed=0, dtype=np.float64):
    return VelocityNet.init(np.random.default_rng(seed), cfg, dtype=dtype)


def fwd(net, b=3, seed=1):
    rng = np.random.default_rng(seed)
    a = DiffTensor(rng.standard_normal((b, net.cfg.horizon, net.cfg.action_dim)),
                   dtype=np.float64)
    cond = DiffTensor(rng.standard_normal(
        (b, net.cfg.cond_dim - net.cfg.time_emb_dim)), dtype=np.float64)
    t = rng.uniform(0, 1, b)
    seg = rng.integers(0, net.cfg.segments_k, b)
    return net.forward(a, t, seg, cond)


@pytest.mark.parametrize("grid,order", [(5, 3), (4, 2), (6, 3)])
def test_output_shape_across_spline_grids(grid, order):
    cfg = BackboneConfig(widths=(8, 16, 32), action_dim=2, horizon=4,
                         cond_dim=12, time_emb_dim=8, time_freqs=4,
                         spline_grid=grid, spline_order=order)
    with dc.no_grad():
        out = fwd(make_net(cfg))
    assert out.shape == (3, 4, 2)


def test_initial_velocity_field_is_zero():
    with dc.no_grad():
        out = fwd(make_net())
    assert np.allclose(out.data, 0.0)


def test_time_features_domain_checks():
    with pytest.raises(ValueError):
        time_features(np.array([1.5]), np.array([0]), 4, 2)
    with pytest.raises(ValueError):
        time_features(np.array([0.5]), np.array([2]), 4, 2)
    feats = time_features(np.array([0.25]), np.array([1]), 4, 2)
    assert feats.shape == (1, 2 * 4 + 2)
    assert np.allclose(feats[0, -2:], [0.0, 1.0])


def test_rejects_nonfinite_action_input():
    net = make_net()
    a = DiffTensor(np.full((1, 4, 2), np.nan))
    cond = DiffTensor(np.zeros((1, 4)))
    with pytest.raises(FloatingPointError):
        with dc.no_grad():
            net.forward(a, np.array([0.1]), np.array([0]), cond)


def test_count_params_matches_instantiated_network():
    for cfg in (TINY,
                BackboneConfig(widths=(8, 16, 32), cond_dim=20, blocks_per_stage=2,
                               time_emb_dim=8, time_freqs=4),
                BackboneConfig()):
        assert count_params(cfg) == make_net(cfg, dtype=np.float32).num_params()


def test_grouped_spline_coefficients_are_quarter_of_ungrouped():
    nb = TINY.grid().n_bases

    def spline_coeffs(cfg):
        total = 0
        for c in list(cfg.widths) + [cfg.widths[1], cfg.widths[0]]:
            cg = c // cfg.group_g
            total += cfg.blocks_per_stage * cfg.group_g * cfg.kan_depth * cg * cg * nb
        return total

    import dataclasses
    g4 = spline_coeffs(TINY)
    g1 = spline_coeffs(dataclasses.replace(TINY, group_g=1))
    assert g4 * 4 == g1


def test_end_to_end_gradient_check():
    net = make_net()
    # the output head is zero-initialized; give it signal so the check is
    # not vacuous
    rng = np.random.default_rng(9)
    net.out_w.data[...] = 0.1 * rng.standard_normal(net.out_w.shape)
    a = DiffTensor(rng.standard_normal((2, 4, 2)), dtype=np.float64)
    cond = DiffTensor(rng.standard_normal((2, 4)), dtype=np.float64,
                      requires_grad=True)
    t = np.array([0.2, 0.7])
    seg = np.array([0, 1])

    def loss():
        out = net.forward(a, t, seg, cond)
        return dc.sum_(out * out)

    tensors = [p for _, p in net.named()] + [cond]
    err = dc.gradcheck_sampled(loss, tensors, n_samples=250, seed=5)
    assert err < 1e-4


def test_condition_changes_output():
    net = make_net()
    rng = np.random.default_rng(11)
    net.out_w.data[...] = 0.1 * rng.standard_normal(net.out_w.shape)
    a = DiffTensor(rng.standard_normal((1, 4, 2)), dtype=np.float64)
    t = np.array([0.3])
    seg = np.array([0])
    with dc.no_grad():
        y1 = net.forward(a, t, seg, DiffTensor(np.zeros((1, 4)))).data
        y2 = net.forward(a, t, seg, DiffTensor(np.ones((1, 4)))).data
    assert np.linalg.norm(y1 - y2) > 0
