"""KAN layers as matrices of learnable univariate B-spline functions,
grouped channelwise with a channel-affinity modulation (CAM) gate.

Each edge function is  base_scale * SiLU(x) + spline_scale * sum_j c_j B_j(x)
on a uniform cubic B-spline grid. Inputs outside the grid are evaluated by
linear extrapolation from the nearest boundary: the bases are evaluated at
the clamped point and corrected by the basis derivative times the overhang,
which leaves in-grid values and gradients untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import DiffTensor


@dataclass(frozen=True)
class SplineGrid:
    """Uniform knot layout shared by every edge of a layer."""

    lo: float = -1.1
    hi: float = 1.1
    intervals: int = 5
    order: int = 3  # cubic

    @property
    def n_bases(self):
        return self.intervals + self.order

    def knots(self):
        h = (self.hi - self.lo) / self.intervals
        return self.lo + h * np.arange(-self.order, self.intervals + self.order + 1)


def _bases_and_derivs(x, grid: SplineGrid):
    """B-spline bases of the grid order evaluated at clamp(x), plus their
    derivatives, plus the overhang (x - clamp(x)).

    x: DiffTensor of any shape; returns ([...,n_bases], [...,n_bases], [...]).
    """
    knots = grid.knots().astype(np.float64 if x.dtype == np.float64 else np.float32)
    xc = dc.clamp(x, grid.lo, grid.hi)
    over = x - xc
    xe = dc.reshape(xc, xc.shape + (1,))

    # degree-0 indicators are piecewise constant: detached constants
    xd = xc.data[..., None]
    ind = ((xd >= knots[:-1]) & (xd < knots[1:])).astype(x.dtype)
    # clamped x lives in the base interval: zero the upper extension spans
    # and close the last base interval so x == hi lands in exactly one cell
    last = grid.order + grid.intervals - 1
    ind[..., last + 1:] = 0.0
    edge = xd[..., 0] == grid.hi
    if np.any(edge):
        ind[edge, last] = 1.0
    bases = DiffTensor(ind)

    prev = bases
    for k in range(1, grid.order + 1):
        t_lo = knots[: -k - 1]
        t_hi = knots[k:-1]
        t_lo2 = knots[1:-k]
        t_hi2 = knots[k + 1:]
        left = (xe - t_lo) * (1.0 / (t_hi - t_lo))
        right = (t_hi2 - xe) * (1.0 / (t_hi2 - t_lo2))
        if k == grid.order:
            prev = bases
        nd = bases.data.ndim - 1
        bases = left * dc.narrow(bases, nd, 0, bases.shape[-1] - 1) \
            + right * dc.narrow(bases, nd, 1, bases.shape[-1] - 1)

    # derivative of order-k bases from the order-(k-1) bases
    k = grid.order
    t = knots
    d1 = k / (t[k:-1] - t[: -k - 1])
    d2 = k / (t[k + 1:] - t[1:-k])
    nd = prev.data.ndim - 1
    derivs = dc.narrow(prev, nd, 0, prev.shape[-1] - 1) * d1 \
        - dc.narrow(prev, nd, 1, prev.shape[-1] - 1) * d2
    return bases, derivs, over


def de_boor_reference(x, coeffs, grid: SplineGrid):
    """Scalar spline value by the textbook recursion; slow reference path.

    Matches the batched evaluation's conventions: half-open knot spans with
    the last base interval closed, linear extrapolation outside the grid.
    """
    knots = grid.knots()
    last = grid.order + grid.intervals - 1

    def basis(i, k, t):
        if k == 0:
            if t == grid.hi:
                return 1.0 if i == last else 0.0
            return 1.0 if knots[i] <= t < knots[i + 1] else 0.0
        out = 0.0
        dl = knots[i + k] - knots[i]
        if dl > 0:
            out += (t - knots[i]) / dl * basis(i, k - 1, t)
        dr = knots[i + k + 1] - knots[i + 1]
        if dr > 0:
            out += (knots[i + k + 1] - t) / dr * basis(i + 1, k - 1, t)
        return out

    def dbasis(i, t):
        k = grid.order
        out = 0.0
        dl = knots[i + k] - knots[i]
        if dl > 0:
            out += k / dl * basis(i, k - 1, t)
        dr = knots[i + k + 1] - knots[i + 1]
        if dr > 0:
            out -= k / dr * basis(i + 1, k - 1, t)
        return out

    xc = min(max(x, grid.lo), grid.hi)
    val = sum(c * basis(i, grid.order, xc) for i, c in enumerate(coeffs))
    if x != xc:
        val += (x - xc) * sum(c * dbasis(i, xc) for i, c in enumerate(coeffs))
    return val


@dataclass
class SplineFunction:
    """A single learnable univariate function (one KAN edge)."""

    grid: SplineGrid
    coeffs: DiffTensor
    base_scale: DiffTensor
    spline_scale: DiffTensor

    @staticmethod
    def init(rng, grid=SplineGrid(), coeff_std=0.1, dtype=dc.DEFAULT_DTYPE):
        return SplineFunction(
            grid=grid,
            coeffs=DiffTensor(
                (coeff_std * rng.standard_normal(grid.n_bases)).astype(dtype),
                requires_grad=True,
            ),
            base_scale=DiffTensor(np.asarray(1.0, dtype), requires_grad=True),
            spline_scale=DiffTensor(np.asarray(1.0, dtype), requires_grad=True),
        )


def spline_eval(f: SplineFunction, x):
    """Evaluate one edge function elementwise; differentiable in x and coeffs."""
    bases, derivs, over = _bases_and_derivs(x, f.grid)
    c = dc.reshape(f.coeffs, (f.grid.n_bases, 1))
    flat_b = dc.reshape(bases, (-1, f.grid.n_bases))
    flat_d = dc.reshape(derivs, (-1, f.grid.n_bases))
    val = dc.reshape(dc.matmul(flat_b, c), x.shape)
    slope = dc.reshape(dc.matmul(flat_d, c), x.shape)
    spline_part = val + over * slope
    return f.base_scale * dc.silu(x) + f.spline_scale * spline_part


@dataclass
class KanLayer:
    """n_out x n_in matrix of spline functions sharing one grid.

    out_q = sum_p [ base_w[q,p]*SiLU(x_p)
                    + scaler[q,p] * sum_j coeffs[q,p,j] B_j(x_p) ]
    """

    in_dim: int
    out_dim: int
    grid: SplineGrid
    spline_weight: DiffTensor  # [out, in, n_bases]
    base_weight: DiffTensor    # [out, in]
    spline_scaler: DiffTensor  # [out, in]

    @staticmethod
    def init(rng, in_dim, out_dim, grid=SplineGrid(), dtype=dc.DEFAULT_DTYPE,
             coeff_std=0.1):
        nb = grid.n_bases
        return KanLayer(
            in_dim=in_dim,
            out_dim=out_dim,
            grid=grid,
            spline_weight=DiffTensor(
                (coeff_std * rng.standard_normal((out_dim, in_dim, nb))).astype(dtype),
                requires_grad=True,
            ),
            base_weight=DiffTensor(
                (rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)).astype(dtype),
                requires_grad=True,
            ),
            spline_scaler=DiffTensor(np.ones((out_dim, in_dim), dtype), requires_grad=True),
        )

    def named(self, prefix):
        yield f"{prefix}.spline_weight", self.spline_weight
        yield f"{prefix}.base_weight", self.base_weight
        yield f"{prefix}.spline_scaler", self.spline_scaler

    def num_spline_coeffs(self):
        return self.spline_weight.data.size


def kan_layer_apply(layer: KanLayer, x):
    """Apply the matrix of functions to x: [B, n_in] -> [B, n_out]."""
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"kan layer expects last dim {layer.in_dim}, got {x.shape}")
    nb = layer.grid.n_bases
    bases, derivs, over = _bases_and_derivs(x, layer.grid)  # [B, in, nb]
    corrected = bases + dc.reshape(over, over.shape + (1,)) * derivs
    w_eff = dc.reshape(
        layer.spline_weight * dc.reshape(layer.spline_scaler, (layer.out_dim, layer.in_dim, 1)),
        (layer.out_dim, layer.in_dim * nb),
    )
    spline_out = dc.matmul(
        dc.reshape(corrected, (-1, layer.in_dim * nb)), dc.transpose2d(w_eff)
    )
    base_out = dc.matmul(dc.silu(x), dc.transpose2d(layer.base_weight))
    return spline_out + base_out


def kan_stack(x, layers):
    """Sequential composition of KAN layers."""
    for i, layer in enumerate(layers):
        if x.shape[-1] != layer.in_dim:
            raise ValueError(f"layer {i} expects dim {layer.in_dim}, got {x.shape[-1]}")
        x = kan_layer_apply(layer, x)
    return x


def fit_spline_coeffs(grid: SplineGrid, fn, n_points=200):
    """Least-squares spline coefficients reproducing fn on the grid interval."""
    xs = np.linspace(grid.lo, grid.hi, n_points)
    bases, _, _ = _bases_and_derivs(DiffTensor(xs, dtype=np.float64), grid)
    coef, *_ = np.linalg.lstsq(bases.data, fn(xs), rcond=None)
    return coef


@dataclass
class GroupKanBlockParams:
    """Channel-grouped KAN with CAM gating and residual assembly."""

    groups: int
    kan_ops: list  # per group: list[KanLayer] (depth >= 1)
    cam_w1: DiffTensor  # [C, C//r]
    cam_w2: DiffTensor  # [C//r, C]
    ln_g: DiffTensor
    ln_b: DiffTensor
    drop_path_rate: float = 0.0

    @staticmethod
    def init(rng, channels, groups=4, reduction=4, grid=SplineGrid(), depth=1,
             dtype=dc.DEFAULT_DTYPE, coeff_std=0.1):
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        cg = channels // groups
        hidden = max(channels // reduction, 1)
        kan_ops = [
            [KanLayer.init(rng, cg, cg, grid, dtype, coeff_std) for _ in range(depth)]
            for _ in range(groups)
        ]
        return GroupKanBlockParams(
            groups=groups,
            kan_ops=kan_ops,
            cam_w1=DiffTensor(
                (rng.standard_normal((channels, hidden)) / np.sqrt(channels)).astype(dtype),
                requires_grad=True,
            ),
            cam_w2=DiffTensor(
                (rng.standard_normal((hidden, channels)) / np.sqrt(hidden)).astype(dtype),
                requires_grad=True,
            ),
            ln_g=DiffTensor(np.ones(channels, dtype), requires_grad=True),
            ln_b=DiffTensor(np.zeros(channels, dtype), requires_grad=True),
        )

    def named(self, prefix):
        for g, layers in enumerate(self.kan_ops):
            for i, layer in enumerate(layers):
                yield from layer.named(f"{prefix}.kan.{g}.{i}")
        yield f"{prefix}.cam.W1", self.cam_w1
        yield f"{prefix}.cam.W2", self.cam_w2
        yield f"{prefix}.ln_g", self.ln_g
        yield f"{prefix}.ln_b", self.ln_b


def cam_gate(x, w1, w2):
    """Temporal-mean pooled squeeze gate, broadcast back over T.

    x: [B,T,C] -> gate [B,1,C] in (0,1), constant along the time axis.
    """
    pooled = dc.mean_(x, axis=1)  # [B, C]
    a = dc.sigmoid(dc.matmul(dc.silu(dc.matmul(pooled, w1)), w2))
    return dc.reshape(a, (a.shape[0], 1, a.shape[1]))


def drop_path(x, rate, rng=None, training=False):
    """Per-sample residual-branch drop; identity at eval or rate 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random((x.shape[0], 1, 1)) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * DiffTensor(keep)


def groupkan_block(x, p: GroupKanBlockParams, rng=None, training=False):
    """X + DropPath(LN(A * Y)) with Y the groupwise KAN, A the CAM gate."""
    b, t, c = x.shape
    if c % p.groups:
        raise ValueError(f"channels {c} not divisible by groups {p.groups}")
    cg = c // p.groups
    flat = dc.reshape(x, (b * t, c))
    ys = []
    for g in range(p.groups):
        xg = dc.narrow(flat, 1, g * cg, cg)
        ys.append(kan_stack(xg, p.kan_ops[g]))
    y = dc.reshape(dc.concat(ys, axis=1), (b, t, c))
    gate = cam_gate(x, p.cam_w1, p.cam_w2)
    branch = dc.layer_norm(gate * y, p.ln_g, p.ln_b)
    return x + drop_path(branch, p.drop_path_rate, rng=rng, training=training)
