"""Training objective and decoder: linear interpolation path, one-step
Euler decode, segment-wise consistency losses with EMA teacher, action
consistency regularization (ACR), and one/multi-step inference.

Loss reduction convention: squared L2 over the action dimension, averaged
over time steps and batch. ACR's constant-offset identity (offset c on
every selected entry gives exactly ||c||^2) pins this convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import perception as pc
from .backbone import VelocityNet
from .diffcore import DiffTensor


def interpolate(a_src, a_tar, t):
    """a_t = (1-t) a_src + t a_tar; t broadcast per batch element."""
    t = np.asarray(t, np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError(f"interpolation time outside [0,1]: {t}")
    tt = t.reshape((-1,) + (1,) * (a_src.data.ndim - 1)).astype(a_src.dtype)
    return a_src * (1.0 - tt) + a_tar * tt


def euler_decode(a_t, t, v):
    """Single explicit Euler step to t=1: f = a_t + (1-t) v."""
    t = np.asarray(t, np.float64)
    if np.any((t < 0) | (t >= 1)):
        raise ValueError(f"decode time must lie in [0,1): {t}")
    tt = t.reshape((-1,) + (1,) * (a_t.data.ndim - 1)).astype(a_t.dtype)
    return a_t + (1.0 - tt) * v


def segment_decode(a_t, t, segment, v, k_segments):
    """Euler step to the segment's right endpoint: f = a_t + ((i+1)/K - t) v."""
    t = np.asarray(t, np.float64)
    segment = np.asarray(segment)
    lo = segment / k_segments
    hi = (segment + 1) / k_segments
    if np.any((t < lo - 1e-12) | (t > hi + 1e-12)):
        raise ValueError("decode time outside its segment")
    step = (hi - t).reshape((-1,) + (1,) * (a_t.data.ndim - 1)).astype(a_t.dtype)
    return a_t + step * v


@dataclass
class FlowSample:
    """One consistency training batch in normalized action space."""

    a_src: np.ndarray   # [B, T_pred, D_act] standard normal
    a_tar: np.ndarray   # [B, T_pred, D_act] expert trajectories
    t: np.ndarray       # [B] in [i/K, (i+1)/K - dt]
    dt: float
    segment: np.ndarray  # [B] ints in [0, K)


def sample_flow_batch(rng, a_tar, k_segments, dt):
    """Uniform segment index, then t uniform on the segment's support."""
    a_tar = np.asarray(a_tar, np.float64)
    b = a_tar.shape[0]
    seg = rng.integers(0, k_segments, b)
    lo = seg / k_segments
    width = 1.0 / k_segments - dt
    if width <= 0:
        raise ValueError(f"dt={dt} leaves no support inside 1/K={1/k_segments}")
    t = lo + rng.uniform(0, width, b)
    a_src = rng.standard_normal(a_tar.shape)
    return FlowSample(a_src=a_src, a_tar=a_tar, t=t, dt=dt, segment=seg)


@dataclass
class LossBreakdown:
    l_end: float = 0.0
    l_vel: float = 0.0
    l_mfm: float = 0.0
    l_acr: float = 0.0
    total: float = 0.0
    per_segment: dict = field(default_factory=dict)
    total_tensor: DiffTensor | None = None

    def metrics(self):
        return {
            "l_end": self.l_end, "l_vel": self.l_vel, "l_mfm": self.l_mfm,
            "l_acr": self.l_acr, "total": self.total,
        }


def _per_sample_sq(diff):
    """[B,T,D] -> [B]: sum over action dim, mean over time."""
    b, t, _ = diff.shape
    sq = dc.sum_(diff * diff, axis=2)
    return dc.sum_(sq, axis=1) * (1.0 / t)


def _consistency_terms(student_v, teacher_v, batch: FlowSample, cond_s, cond_t,
                       k_segments, dtype):
    """Per-sample endpoint/velocity consistency terms plus the student's
    full-interval decode (shared with ACR at zero extra evaluations)."""
    if np.any(batch.t + batch.dt > (batch.segment + 1) / k_segments + 1e-12):
        raise ValueError("t + dt exceeds the segment boundary")
    a_t = DiffTensor(batch.a_src, dtype=dtype)
    a_t = interpolate(a_t, DiffTensor(batch.a_tar, dtype=dtype), batch.t)
    a_td = interpolate(
        DiffTensor(batch.a_src, dtype=dtype),
        DiffTensor(batch.a_tar, dtype=dtype),
        batch.t + batch.dt,
    )
    v_s = student_v(a_t, batch.t, batch.segment, cond_s)
    with dc.no_grad():
        v_t = teacher_v(a_td.detach(), batch.t + batch.dt, batch.segment, cond_t)
        v_t = v_t.detach()
    f_s = segment_decode(a_t, batch.t, batch.segment, v_s, k_segments)
    f_t = segment_decode(a_td, batch.t + batch.dt, batch.segment, v_t, k_segments)
    a_terms = _per_sample_sq(f_s - f_t)
    b_terms = _per_sample_sq(v_s - v_t)
    decode_full = euler_decode(a_t, batch.t, v_s)
    return a_terms, b_terms, decode_full


def cfm_losses(student_v, teacher_v, batch, cond_s, cond_t, alpha=1.0,
               dtype=dc.DEFAULT_DTYPE):
    """Single-segment consistency: L_end, L_vel, combined L_CFM."""
    a_terms, b_terms, decode_full = _consistency_terms(
        student_v, teacher_v, batch, cond_s, cond_t, 1, dtype)
    n = a_terms.shape[0]
    l_end = dc.sum_(a_terms) * (1.0 / n)
    l_vel = dc.sum_(b_terms) * (1.0 / n)
    l_cfm = dc.sum_(a_terms + alpha * b_terms) * (1.0 / n)
    return l_end, l_vel, l_cfm, decode_full


def multisegment_loss(student_v, teacher_v, batch, cond_s, cond_t, k_segments,
                      alpha=1.0, segment_weights=None, dtype=dc.DEFAULT_DTYPE):
    """Sum_i lambda_i * E_{segment i}[a_i + alpha*b_i]; empty segments
    contribute zero. Returns (l_mfm, l_end, l_vel, decode_full, per_segment)."""
    if segment_weights is None:
        segment_weights = [1.0] * k_segments
    a_terms, b_terms, decode_full = _consistency_terms(
        student_v, teacher_v, batch, cond_s, cond_t, k_segments, dtype)
    combined = a_terms + alpha * b_terms
    n = a_terms.shape[0]
    l_mfm = None
    per_segment = {}
    for i in range(k_segments):
        mask = (batch.segment == i).astype(a_terms.dtype)
        count = int(mask.sum())
        if count == 0:
            continue
        mask_t = DiffTensor(mask)
        seg_loss = dc.sum_(combined * mask_t) * (1.0 / count)
        per_segment[i] = float(seg_loss.data) if seg_loss.data.shape == () else seg_loss.item()
        term = segment_weights[i] * seg_loss
        l_mfm = term if l_mfm is None else l_mfm + term
    l_end = dc.sum_(a_terms) * (1.0 / n)
    l_vel = dc.sum_(b_terms) * (1.0 / n)
    return l_mfm, l_end, l_vel, decode_full, per_segment


@dataclass(frozen=True)
class ControlWindow:
    """Executed slice of the predicted trajectory: {u0, ..., u0+H-1}."""

    u0: int
    horizon: int

    def indices(self):
        return list(range(self.u0, self.u0 + self.horizon))

    def validate(self, t_pred):
        if self.u0 < 0 or self.u0 + self.horizon > t_pred:
            raise ValueError(
                f"control window [{self.u0},{self.u0 + self.horizon}) "
                f"outside trajectory of length {t_pred}")


def acr_loss(decoded, expert, window: ControlWindow):
    """Mean over the control window of squared deviation from the expert.

    decoded: DiffTensor [B,T,D] one-step decode; expert: array [B,T,D].
    """
    window.validate(decoded.shape[1])
    sel = dc.narrow(decoded, 1, window.u0, window.horizon)
    ref = DiffTensor(np.asarray(expert)[:, window.indices()], dtype=decoded.dtype)
    diff = sel - ref
    b = decoded.shape[0]
    sq = dc.sum_(diff * diff, axis=2)
    return dc.sum_(sq) * (1.0 / (b * window.horizon))


def total_loss(student_v, teacher_v, batch, cond_s, cond_t, expert,
               window: ControlWindow, k_segments, alpha=1.0, lambda_acr=1.0,
               segment_weights=None, dtype=dc.DEFAULT_DTYPE):
    """L = L_MFM + lambda_ACR * L_ACR (lambda_ACR >= 0)."""
    if lambda_acr < 0:
        raise ValueError("lambda_acr must be >= 0")
    l_mfm, l_end, l_vel, decode_full, per_seg = multisegment_loss(
        student_v, teacher_v, batch, cond_s, cond_t, k_segments,
        alpha=alpha, segment_weights=segment_weights, dtype=dtype)
    l_acr = acr_loss(decode_full, expert, window)
    total = l_mfm + lambda_acr * l_acr
    return LossBreakdown(
        l_end=l_end.item(), l_vel=l_vel.item(),
        l_mfm=l_mfm.item(), l_acr=l_acr.item(),
        total=total.item(), per_segment=per_seg, total_tensor=total,
    )


# ---------------------------------------------------------------------------
# policy: encoders + velocity network + normalizers + inference


class Policy:
    """Full visuomotor policy. Counts every velocity evaluation (NFE)."""

    def __init__(self, net: VelocityNet, point_enc, state_enc,
                 action_norm=None, state_norm=None, n_obs=2, horizon=3,
                 fps_points=None, fps_seed=0, t_start=0.0):
        self.net = net
        self.point_enc = point_enc
        self.state_enc = state_enc
        self.action_norm = action_norm
        self.state_norm = state_norm
        self.n_obs = n_obs
        self.horizon = horizon
        self.fps_points = fps_points
        self.fps_seed = fps_seed
        self.t_start = t_start
        self.nfe = 0

    def named_params(self, prefix=""):
        yield from self.net.named(f"{prefix}net")
        yield from self.point_enc.named(f"{prefix}vision")
        yield from self.state_enc.named(f"{prefix}state")

    def velocity(self, a_t, t, segment, cond):
        self.nfe += 1
        return self.net.forward(a_t, t, segment, cond)

    def encode_condition(self, states, clouds, fps_rng=None):
        """states: [B, n_obs, D_state] raw; clouds: [B, n_obs, N, 3].

        Returns the concatenated [state_emb ++ vision_emb] tensor.
        """
        states = np.asarray(states, np.float64)
        clouds = np.asarray(clouds, np.float64)
        b, n_obs, ds = states.shape
        if self.state_norm is not None:
            states = self.state_norm.normalize(states.reshape(-1, ds)).reshape(states.shape)
        dtype = self.net.in_w.dtype
        window = DiffTensor(states.reshape(b, n_obs * ds), dtype=dtype)
        state_emb = pc.encode_state(window, self.state_enc)

        flat = clouds.reshape(b * n_obs, clouds.shape[2], 3)
        m = self.fps_points or flat.shape[1]
        if fps_rng is None:
            seeds = np.full(flat.shape[0], self.fps_seed)
        else:
            seeds = fps_rng.integers(0, flat.shape[1], flat.shape[0])
        idx = pc.fps_batch(flat, m, seeds)
        sampled = flat[np.arange(flat.shape[0])[:, None], idx]
        vis = pc.encode_points(DiffTensor(sampled, dtype=dtype), self.point_enc)
        vision_emb = dc.reshape(vis, (b, n_obs * vis.shape[-1]))
        return pc.Condition(vision_emb=vision_emb, state_emb=state_emb).concat()

    def infer_one_step(self, cond, rng):
        """Chained one-Euler-step-per-segment decode from pure noise.

        Returns the clamped, denormalized trajectory [T_pred, D_act].
        """
        if self.action_norm is None:
            raise RuntimeError("policy has no fitted action normalizer")
        cfg = self.net.cfg
        k = cfg.segments_k
        dtype = self.net.in_w.dtype
        a = DiffTensor(rng.standard_normal((1, cfg.horizon, cfg.action_dim)), dtype=dtype)
        t = self.t_start
        for i in range(k):
            if t >= (i + 1) / k - 1e-12:
                continue
            v = self.velocity(a, np.array([t]), np.array([i]), cond)
            a = segment_decode(a, np.array([t]), np.array([i]), v, k)
            t = (i + 1) / k
        a = dc.clamp(a, -1.0, 1.0)
        return self.action_norm.denormalize(a.data[0])

    def infer_multi_step(self, cond, rng, n_steps):
        """Uniform n_steps Euler integration of the velocity field."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        cfg = self.net.cfg
        k = cfg.segments_k
        dtype = self.net.in_w.dtype
        a = DiffTensor(rng.standard_normal((1, cfg.horizon, cfg.action_dim)), dtype=dtype)
        h = 1.0 / n_steps
        for j in range(n_steps):
            t = j * h
            seg = min(int(t * k), k - 1)
            v = self.velocity(a, np.array([t]), np.array([seg]), cond)
            a = a + h * v
        a = dc.clamp(a, -1.0, 1.0)
        return self.action_norm.denormalize(a.data[0])

    def act(self, obs_window, rng=None):
        """Rollout interface: observation window -> executed action chunk."""
        rng = rng or np.random.default_rng(0)
        states = np.stack([o["state"] for o in obs_window])[None]
        clouds = np.stack([o["points"] for o in obs_window])[None]
        with dc.no_grad():
            cond = self.encode_condition(states, clouds)
            traj = self.infer_one_step(cond, rng)
        u0 = self.n_obs - 1
        return traj[u0: u0 + self.horizon]
