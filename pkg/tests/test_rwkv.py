"""RWKV block: the O(T) scan against the literal quadratic summation,
overflow safety, token shift, bidirectional composition, gradients."""

import numpy as np
import pytest

import flowkan.diffcore as dc
import flowkan.rwkv as rk
from flowkan.diffcore import DiffTensor


def rel_err(got, ref):
    return np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12))


def test_scan_matches_direct_summation_200_cases():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        b, t, c = rng.integers(1, 5), rng.integers(1, 17), rng.integers(1, 9)
        k = rng.normal(0, 2, (b, t, c))
        v = rng.normal(0, 1, (b, t, c))
        w = rng.uniform(0.01, 3, c)
        u = rng.normal(0, 1, c)
        got = rk.wkv_forward_scan(
            DiffTensor(k, dtype=np.float64), DiffTensor(v, dtype=np.float64),
            w, u).data
        worst = max(worst, rel_err(got, rk.wkv_direct(k, v, w, u)))
    assert worst < 1e-10


def test_first_token_is_bonus_term_only():
    k = np.array([[[0.7], [0.1]]])
    v = np.array([[[2.5], [1.0]]])
    got = rk.wkv_forward_scan(
        DiffTensor(k, dtype=np.float64), DiffTensor(v, dtype=np.float64),
        np.array([1.3]), np.array([0.4])).data
    # no history at t=0: numerator and denominator share exp(u+k_0)
    assert np.allclose(got[0, 0, 0], 2.5)


def test_large_decay_keeps_undamped_predecessor():
    # the t-1 term has decay exponent zero, so even w -> inf leaves a
    # two-term mixture of v_{t-1} and the bonus-weighted v_t
    k = np.zeros((1, 3, 1))
    v = np.array([[[5.0], [3.0], [1.0]]])
    u = np.array([0.0])
    got = rk.wkv_forward_scan(
        DiffTensor(k, dtype=np.float64), DiffTensor(v, dtype=np.float64),
        np.array([50.0]), u).data
    expected_t2 = (3.0 + 1.0) / 2.0
    assert np.allclose(got[0, 2, 0], expected_t2, atol=1e-12)


def test_extreme_keys_stay_finite():
    k = np.full((1, 8, 2), 80.0)
    v = np.ones((1, 8, 2))
    got = rk.wkv_forward_scan(
        DiffTensor(k, dtype=np.float64), DiffTensor(v, dtype=np.float64),
        np.array([0.5, 1.0]), np.zeros(2)).data
    assert np.all(np.isfinite(got))
    assert np.allclose(got, 1.0)  # all values equal -> weighted mean is 1


def test_token_shift_zero_padded():
    x = DiffTensor(np.arange(6.0).reshape(1, 3, 2))
    mix = DiffTensor(np.array([1.0, 0.0]))
    out = rk.token_shift(x, mix).data
    # channel 0 fully shifted (first step sees zero), channel 1 unshifted
    assert np.allclose(out[0, :, 0], [0.0, 0.0, 2.0])
    assert np.allclose(out[0, :, 1], [1.0, 3.0, 5.0])


def test_bidirectional_double_counts_current_token():
    # constant sequence: each direction returns v everywhere, so the sum
    # is exactly 2v; dedup_current subtracts one copy
    k = np.zeros((1, 4, 1))
    v = np.full((1, 4, 1), 3.0)
    args = (DiffTensor(k, dtype=np.float64), DiffTensor(v, dtype=np.float64),
            np.array([1.0]), np.array([0.0]))
    assert np.allclose(rk.wkv_bidirectional(*args).data, 6.0)
    assert np.allclose(rk.wkv_bidirectional(*args, dedup_current=True).data, 3.0)


def test_single_token_bidirectional():
    k = np.array([[[0.3]]])
    v = np.array([[[7.0]]])
    got = rk.wkv_bidirectional(
        DiffTensor(k, dtype=np.float64), DiffTensor(v, dtype=np.float64),
        np.array([1.0]), np.array([0.2])).data
    assert np.allclose(got, 14.0)


def test_wkv_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    b, t, c = 2, 5, 3
    k = DiffTensor(rng.normal(0, 1, (b, t, c)), requires_grad=True)
    v = DiffTensor(rng.normal(0, 1, (b, t, c)), requires_grad=True)
    w = DiffTensor(rng.uniform(0.1, 2, c), requires_grad=True)
    u = DiffTensor(rng.normal(0, 1, c), requires_grad=True)
    coeff = rng.standard_normal((b, t, c))
    err = dc.gradcheck(
        lambda: dc.sum_(rk.wkv_forward_scan(k, v, w, u) * coeff), [k, v, w, u])
    assert err < 1e-6


def test_block_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    c = 4
    p = rk.RwkvBlockParams.init(rng, c, dtype=np.float64)
    x = DiffTensor(rng.standard_normal((2, 4, c)), requires_grad=True)
    coeff = rng.standard_normal((2, 4, c))
    tensors = [x] + [t for _, t in p.named("b")]
    err = dc.gradcheck(lambda: dc.sum_(rk.rwkv_block(x, p) * coeff), tensors)
    assert err < 1e-4


def test_block_preserves_shape_and_batch_independence():
    rng = np.random.default_rng(3)
    p = rk.RwkvBlockParams.init(rng, 6, dtype=np.float64)
    x = rng.standard_normal((3, 5, 6))
    with dc.no_grad():
        full = rk.rwkv_block(DiffTensor(x, dtype=np.float64), p).data
        one = rk.rwkv_block(DiffTensor(x[1:2], dtype=np.float64), p).data
    assert full.shape == (3, 5, 6)
    assert np.allclose(full[1:2], one, atol=1e-12)


def test_orthogonal_init_shapes_and_isometry():
    rng = np.random.default_rng(4)
    for n_in, n_out in [(8, 3), (3, 8), (5, 5)]:
        w = rk.orthogonal_init(rng, n_in, n_out, 1.0, np.float64).data
        assert w.shape == (n_in, n_out)
        k = min(n_in, n_out)
        gram = w.T @ w if n_in >= n_out else w @ w.T
        assert np.allclose(gram, np.eye(k), atol=1e-10)
