"""Conditional velocity network: a three-stage U-shaped encoder-decoder of
RWKV-KAN units with concat-then-project skip fusion.

With the default horizon of 4 the temporal axis is never resampled; stages
differ only in channel width. Conditioning (state embedding + point-cloud
embedding + time embedding) is projected per unit and added to every token.
The output projection is zero-initialized so the initial velocity field is
exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import groupkan as gk
from . import rwkv as rk
from .diffcore import DiffTensor
from .rwkv import orthogonal_init


@dataclass
class BackboneConfig:
    widths: tuple = (32, 64, 128)
    blocks_per_stage: int = 1
    action_dim: int = 2
    horizon: int = 4          # T_pred
    cond_dim: int = 160       # state_emb + vision_emb + time_emb
    segments_k: int = 2
    group_g: int = 4
    spline_grid: int = 5
    spline_order: int = 3
    time_emb_dim: int = 32
    time_freqs: int = 8
    kan_depth: int = 1
    cam_reduction: int = 4
    drop_path_rate: float = 0.0

    def grid(self):
        return gk.SplineGrid(intervals=self.spline_grid, order=self.spline_order)


def _linear_params(rng, n_in, n_out, dtype, scale=1.0, zero=False):
    if zero:
        w = np.zeros((n_in, n_out), dtype)
    else:
        w = (orthogonal_init(rng, n_in, n_out, scale, dtype)).data
    return (
        DiffTensor(w, requires_grad=True),
        DiffTensor(np.zeros(n_out, dtype), requires_grad=True),
    )


@dataclass
class TimeEmbedParams:
    """Sinusoidal(t) ++ one-hot(segment), projected by a 2-layer map."""

    n_freqs: int
    segments: int
    w1: DiffTensor
    b1: DiffTensor
    w2: DiffTensor
    b2: DiffTensor

    @staticmethod
    def init(rng, cfg: BackboneConfig, dtype):
        n_in = 2 * cfg.time_freqs + cfg.segments_k
        hidden = cfg.time_emb_dim
        w1, b1 = _linear_params(rng, n_in, hidden, dtype)
        w2, b2 = _linear_params(rng, hidden, cfg.time_emb_dim, dtype)
        return TimeEmbedParams(cfg.time_freqs, cfg.segments_k, w1, b1, w2, b2)

    def named(self, prefix):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


def time_features(t, segment, n_freqs, segments):
    """Raw sinusoidal + one-hot features for batched t [B], segment [B]."""
    t = np.asarray(t, np.float64)
    segment = np.asarray(segment)
    if np.any((t < 0) | (t > 1)):
        raise ValueError(f"flow time must lie in [0,1], got {t}")
    if np.any((segment < 0) | (segment >= segments)):
        raise ValueError(f"segment index out of range [0,{segments})")
    freqs = 2.0 ** np.arange(n_freqs) * np.pi
    ang = t[:, None] * freqs[None, :]
    onehot = np.eye(segments)[segment.astype(int)]
    return np.concatenate([np.sin(ang), np.cos(ang), onehot], axis=1)


def embed_time(p: TimeEmbedParams, t, segment, dtype=dc.DEFAULT_DTYPE):
    """Embed flow times t [B] in [0,1] with segment indices [B]."""
    feats = DiffTensor(time_features(t, segment, p.n_freqs, p.segments), dtype=dtype)
    h = dc.silu(dc.matmul(feats, p.w1) + p.b1)
    return dc.matmul(h, p.w2) + p.b2


@dataclass
class UnitParams:
    """One RWKV-KAN unit: condition injection, RWKV block, GroupKAN block."""

    cond_w: DiffTensor
    cond_b: DiffTensor
    rwkv: rk.RwkvBlockParams
    kan: gk.GroupKanBlockParams

    @staticmethod
    def init(rng, width, cfg: BackboneConfig, dtype):
        cond_w, cond_b = _linear_params(rng, cfg.cond_dim, width, dtype, scale=0.1)
        return UnitParams(
            cond_w=cond_w,
            cond_b=cond_b,
            rwkv=rk.RwkvBlockParams.init(rng, width, dtype),
            kan=gk.GroupKanBlockParams.init(
                rng, width, groups=cfg.group_g, reduction=cfg.cam_reduction,
                grid=cfg.grid(), depth=cfg.kan_depth, dtype=dtype,
            ),
        )

    def named(self, prefix):
        yield f"{prefix}.cond_w", self.cond_w
        yield f"{prefix}.cond_b", self.cond_b
        yield from self.rwkv.named(f"{prefix}.rwkv")
        yield from self.kan.named(f"{prefix}.kan")


def rwkv_kan_unit(x, cond, p: UnitParams, rng=None, training=False):
    """x' = groupkan_block(rwkv_block(x + proj(cond))); cond is [B, cond_dim]."""
    proj = dc.matmul(cond, p.cond_w) + p.cond_b
    x = x + dc.reshape(proj, (proj.shape[0], 1, proj.shape[1]))
    x = rk.rwkv_block(x, p.rwkv)
    return gk.groupkan_block(x, p.kan, rng=rng, training=training)


@dataclass
class VelocityNet:
    """U-shape over [B, T_pred, D_act] with widths w0 -> w1 -> w2 -> w1 -> w0."""

    cfg: BackboneConfig
    time_embed: TimeEmbedParams
    in_w: DiffTensor
    in_b: DiffTensor
    enc_units: list      # [stage][unit]
    down_projs: list     # w_i -> w_{i+1}
    mid_units: list
    up_projs: list       # w_{i+1} -> w_i
    fuse_projs: list     # 2*w_i -> w_i  (concat skip then project)
    dec_units: list
    out_w: DiffTensor
    out_b: DiffTensor

    @staticmethod
    def init(rng, cfg: BackboneConfig, dtype=dc.DEFAULT_DTYPE):
        w0, w1, w2 = cfg.widths
        in_w, in_b = _linear_params(rng, cfg.action_dim, w0, dtype)
        units = lambda width: [
            UnitParams.init(rng, width, cfg, dtype) for _ in range(cfg.blocks_per_stage)
        ]
        enc_units = [units(w0), units(w1)]
        down_projs = [_linear_params(rng, w0, w1, dtype), _linear_params(rng, w1, w2, dtype)]
        mid_units = units(w2)
        up_projs = [_linear_params(rng, w2, w1, dtype), _linear_params(rng, w1, w0, dtype)]
        fuse_projs = [_linear_params(rng, 2 * w1, w1, dtype), _linear_params(rng, 2 * w0, w0, dtype)]
        dec_units = [units(w1), units(w0)]
        out_w, out_b = _linear_params(rng, w0, cfg.action_dim, dtype, zero=True)
        return VelocityNet(
            cfg=cfg,
            time_embed=TimeEmbedParams.init(rng, cfg, dtype),
            in_w=in_w, in_b=in_b,
            enc_units=enc_units, down_projs=down_projs, mid_units=mid_units,
            up_projs=up_projs, fuse_projs=fuse_projs, dec_units=dec_units,
            out_w=out_w, out_b=out_b,
        )

    def named(self, prefix="net"):
        yield f"{prefix}.in_w", self.in_w
        yield f"{prefix}.in_b", self.in_b
        yield from self.time_embed.named(f"{prefix}.time")
        for s, stage in enumerate(self.enc_units):
            for i, u in enumerate(stage):
                yield from u.named(f"{prefix}.enc.{s}.{i}")
        for s, (w, b) in enumerate(self.down_projs):
            yield f"{prefix}.down.{s}.w", w
            yield f"{prefix}.down.{s}.b", b
        for i, u in enumerate(self.mid_units):
            yield from u.named(f"{prefix}.mid.{i}")
        for s, (w, b) in enumerate(self.up_projs):
            yield f"{prefix}.up.{s}.w", w
            yield f"{prefix}.up.{s}.b", b
        for s, (w, b) in enumerate(self.fuse_projs):
            yield f"{prefix}.fuse.{s}.w", w
            yield f"{prefix}.fuse.{s}.b", b
        for s, stage in enumerate(self.dec_units):
            for i, u in enumerate(stage):
                yield from u.named(f"{prefix}.dec.{s}.{i}")
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b

    def forward(self, a_t, t, segment, cond, rng=None, training=False):
        """Velocity field for noised trajectories.

        a_t: DiffTensor [B, T_pred, D_act]; t, segment: arrays [B];
        cond: DiffTensor [B, cond_dim - time_emb_dim] (state ++ vision).
        """
        if not np.all(np.isfinite(a_t.data)):
            raise FloatingPointError("non-finite action input to velocity network")
        temb = embed_time(self.time_embed, t, segment, dtype=a_t.dtype)
        full_cond = dc.concat([cond, temb], axis=1)
        run = lambda x, stage: _run_units(x, full_cond, stage, rng, training)

        x = dc.linear(a_t, self.in_w, self.in_b)
        x = run(x, self.enc_units[0])
        skip0 = x
        x = dc.linear(x, *self.down_projs[0])
        x = run(x, self.enc_units[1])
        skip1 = x
        x = dc.linear(x, *self.down_projs[1])
        x = run(x, self.mid_units)
        x = dc.linear(x, *self.up_projs[0])
        x = dc.linear(dc.concat([x, skip1], axis=2), *self.fuse_projs[0])
        x = run(x, self.dec_units[0])
        x = dc.linear(x, *self.up_projs[1])
        x = dc.linear(dc.concat([x, skip0], axis=2), *self.fuse_projs[1])
        x = run(x, self.dec_units[1])
        return dc.linear(x, self.out_w, self.out_b)

    def num_params(self):
        return sum(t.data.size for _, t in self.named())


def _run_units(x, cond, units, rng, training):
    for u in units:
        x = rwkv_kan_unit(x, cond, u, rng=rng, training=training)
    return x


def count_params(cfg: BackboneConfig):
    """Closed-form learnable-scalar count for a VelocityNet(cfg)."""
    nb = cfg.grid().n_bases

    def rwkv_count(c):
        return 7 * c * c + 7 * c  # 7 projections + decay,u,mix + 2 LN pairs

    def kan_count(c):
        cg = c // cfg.group_g
        per_layer = cg * cg * (nb + 2)  # coeffs + base weight + scaler
        cam = 2 * c * max(c // cfg.cam_reduction, 1)
        return cfg.group_g * cfg.kan_depth * per_layer + cam + 2 * c

    def unit_count(c):
        return (cfg.cond_dim * c + c) + rwkv_count(c) + kan_count(c)

    w0, w1, w2 = cfg.widths
    n = cfg.action_dim * w0 + w0  # input projection
    tin = 2 * cfg.time_freqs + cfg.segments_k
    n += tin * cfg.time_emb_dim + cfg.time_emb_dim
    n += cfg.time_emb_dim * cfg.time_emb_dim + cfg.time_emb_dim
    for c in (w0, w1, w1, w0):  # enc0, enc1, dec0(w1), dec1(w0)
        n += cfg.blocks_per_stage * unit_count(c)
    n += cfg.blocks_per_stage * unit_count(w2)  # bottleneck
    n += (w0 * w1 + w1) + (w1 * w2 + w2)        # down projections
    n += (w2 * w1 + w1) + (w1 * w0 + w0)        # up projections
    n += (2 * w1 * w1 + w1) + (2 * w0 * w0 + w0)  # skip fusions
    n += w0 * cfg.action_dim + cfg.action_dim   # output head
    return n
