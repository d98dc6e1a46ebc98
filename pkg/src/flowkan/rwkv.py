"""Bidirectional RWKV block: token shift, decayed key-value time mixing,
squared-ReLU channel mixing, pre-norm residual assembly.

The per-channel aggregation for a [B,T,C] sequence is

    out_t = (sum_{i<t} exp(-(t-1-i)w + k_i) * v_i + exp(u + k_t) * v_t)
          / (sum_{i<t} exp(-(t-1-i)w + k_i)     + exp(u + k_t))

computed in O(T) with a running max-shifted (a, b, pp) state so that large
k never overflows. The bidirectional variant adds the same scan run on the
time-reversed sequence; the current token therefore contributes twice,
which is kept as printed (see `dedup_current`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffTensor

NEG_INF = -1e30


def orthogonal_init(rng, n_in, n_out, scale, dtype):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, _ = np.linalg.qr(a)
    w = q if n_in >= n_out else q.T
    return DiffTensor((scale * w).astype(dtype), requires_grad=True)


@dataclass
class RwkvBlockParams:
    """Parameters of one RWKV block over C channels.

    Decay positivity: `decay_raw` is unconstrained, the effective decay is
    softplus(decay_raw) >= 0. `shift_mix_raw` is clamped into [0,1] on use.
    """

    w_r: DiffTensor
    w_k: DiffTensor
    w_v: DiffTensor
    w_o: DiffTensor
    wc_r: DiffTensor
    wc_k: DiffTensor
    wc_v: DiffTensor
    decay_raw: DiffTensor
    u: DiffTensor
    shift_mix_raw: DiffTensor
    ln1_g: DiffTensor
    ln1_b: DiffTensor
    ln2_g: DiffTensor
    ln2_b: DiffTensor

    @staticmethod
    def init(rng, channels, dtype=dc.DEFAULT_DTYPE, proj_scale=0.1):
        c = channels
        # softplus(raw) = 1 at init; small-gain projections keep the
        # residual path dominant early
        raw_decay = np.log(np.expm1(1.0))
        return RwkvBlockParams(
            w_r=orthogonal_init(rng, c, c, proj_scale, dtype),
            w_k=orthogonal_init(rng, c, c, proj_scale, dtype),
            w_v=orthogonal_init(rng, c, c, proj_scale, dtype),
            w_o=orthogonal_init(rng, c, c, proj_scale, dtype),
            wc_r=orthogonal_init(rng, c, c, proj_scale, dtype),
            wc_k=orthogonal_init(rng, c, c, proj_scale, dtype),
            wc_v=orthogonal_init(rng, c, c, proj_scale, dtype),
            decay_raw=DiffTensor(np.full(c, raw_decay, dtype), requires_grad=True),
            u=DiffTensor(np.zeros(c, dtype), requires_grad=True),
            shift_mix_raw=DiffTensor(np.full(c, 0.5, dtype), requires_grad=True),
            ln1_g=DiffTensor(np.ones(c, dtype), requires_grad=True),
            ln1_b=DiffTensor(np.zeros(c, dtype), requires_grad=True),
            ln2_g=DiffTensor(np.ones(c, dtype), requires_grad=True),
            ln2_b=DiffTensor(np.zeros(c, dtype), requires_grad=True),
        )

    def named(self, prefix):
        for field in (
            "w_r", "w_k", "w_v", "w_o", "wc_r", "wc_k", "wc_v",
            "decay_raw", "u", "shift_mix_raw",
            "ln1_g", "ln1_b", "ln2_g", "ln2_b",
        ):
            yield f"{prefix}.{field}", getattr(self, field)


def token_shift(x, shift_mix):
    """x~_t = mix * x_{t-1} + (1-mix) * x_t, with x_0 = 0."""
    b, t, c = x.shape
    prev = dc.narrow(x, 1, 0, t - 1) if t > 1 else None
    zeros = DiffTensor(np.zeros((b, 1, c), x.dtype))
    shifted = zeros if prev is None else dc.concat([zeros, prev], axis=1)
    return shift_mix * shifted + (1.0 - shift_mix) * x


def wkv_forward_scan(k, v, w, u):
    """O(T) decayed aggregation with running exponent rebasing.

    k, v: [B,T,C]; w (>=0), u: [C]. Equals the direct quadratic summation.
    """
    b, t, c = k.shape
    a_state = DiffTensor(np.zeros((b, c), k.dtype))
    b_state = DiffTensor(np.zeros((b, c), k.dtype))
    pp = DiffTensor(np.full((b, c), NEG_INF, k.dtype))
    outs = []
    for i in range(t):
        kt = dc.reshape(dc.narrow(k, 1, i, 1), (b, c))
        vt = dc.reshape(dc.narrow(v, 1, i, 1), (b, c))
        ww = u + kt
        qq = dc.maximum(pp, ww)
        e1 = dc.exp(pp - qq)
        e2 = dc.exp(ww - qq)
        out = (e1 * a_state + e2 * vt) / (e1 * b_state + e2)
        outs.append(dc.reshape(out, (b, 1, c)))
        # fold the current token into the decayed state
        ww = pp - w
        qq = dc.maximum(ww, kt)
        e1 = dc.exp(ww - qq)
        e2 = dc.exp(kt - qq)
        a_state = e1 * a_state + e2 * vt
        b_state = e1 * b_state + e2
        pp = qq
    result = dc.concat(outs, axis=1)
    if not np.all(np.isfinite(result.data)):
        raise FloatingPointError("wkv scan produced non-finite values")
    return result


def wkv_direct(k, v, w, u):
    """O(T^2) literal evaluation of the decayed aggregation (oracle path)."""
    k = np.asarray(k, np.float64)
    v = np.asarray(v, np.float64)
    w = np.asarray(w, np.float64)
    u = np.asarray(u, np.float64)
    b, t, c = k.shape
    out = np.zeros_like(v)
    for ti in range(t):
        num = np.exp(u + k[:, ti]) * v[:, ti]
        den = np.exp(u + k[:, ti])
        for i in range(ti):
            wgt = np.exp(-(ti - 1 - i) * w + k[:, i])
            num = num + wgt * v[:, i]
            den = den + wgt
        out[:, ti] = num / den
    return out


def wkv_bidirectional(k, v, w, u, dedup_current=False):
    """Forward scan plus the same scan on the time-reversed sequence.

    As printed, both directions include the current-token bonus term, so a
    constant sequence maps to twice its value. `dedup_current` subtracts
    v_t once to undo the double count (off by default).
    """
    fwd = wkv_forward_scan(k, v, w, u)
    bwd = dc.flip(
        wkv_forward_scan(dc.flip(k, 1), dc.flip(v, 1), w, u), 1
    )
    out = fwd + bwd
    if dedup_current:
        out = out - v
    return out


def time_mix(x, p, dedup_current=False):
    """Receptance-gated decayed aggregation of the token-shifted input."""
    b, t, c = x.shape
    mix = dc.clamp(p.shift_mix_raw, 0.0, 1.0)
    xs = token_shift(x, mix)
    flat = dc.reshape(xs, (b * t, c))
    r = dc.reshape(dc.matmul(flat, p.w_r), (b, t, c))
    k = dc.reshape(dc.matmul(flat, p.w_k), (b, t, c))
    v = dc.reshape(dc.matmul(flat, p.w_v), (b, t, c))
    w = dc.softplus(p.decay_raw)
    agg = wkv_bidirectional(k, v, w, p.u, dedup_current=dedup_current)
    gated = dc.sigmoid(r) * agg
    return dc.reshape(dc.matmul(dc.reshape(gated, (b * t, c)), p.w_o), (b, t, c))


def channel_mix(x, p):
    """Tokenwise gated MLP: sigmoid(r') * (W'_v [ReLU(k')]^2), no shift."""
    b, t, c = x.shape
    flat = dc.reshape(x, (b * t, c))
    r = dc.matmul(flat, p.wc_r)
    k = dc.matmul(flat, p.wc_k)
    out = dc.sigmoid(r) * dc.matmul(dc.relu_squared(k), p.wc_v)
    return dc.reshape(out, (b, t, c))


def rwkv_block(x, p, dedup_current=False):
    """Pre-norm residual assembly, channel-mix first as printed:

        y = x + CM(LN2(x));  z = y + TM(LN1(y))
    """
    y = x + channel_mix(dc.layer_norm(x, p.ln2_g, p.ln2_b), p)
    return y + time_mix(dc.layer_norm(y, p.ln1_g, p.ln1_b), p, dedup_current=dedup_current)
