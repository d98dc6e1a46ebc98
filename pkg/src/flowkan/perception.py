"""Observation encoding: farthest point sampling, a permutation-invariant
point-cloud encoder, a robot-state encoder, and [-1,1] normalization."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffTensor
from .rwkv import orthogonal_init


def fps(points, m, seed_index=0):
    """Greedy max-min farthest point sampling.

    points: [N,3]; returns m distinct indices starting from seed_index,
    each maximizing the distance to the already-selected set.
    """
    points = np.asarray(points, np.float64)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"fps requires 1 <= m <= N, got m={m}, N={n}")
    chosen = [int(seed_index)]
    dist = np.linalg.norm(points - points[seed_index], axis=1)
    for _ in range(m - 1):
        idx = int(np.argmax(dist))
        chosen.append(idx)
        dist = np.minimum(dist, np.linalg.norm(points - points[idx], axis=1))
    return chosen


def fps_batch(clouds, m, seed_indices):
    """Vectorized FPS over a batch of clouds [M,N,3] -> indices [M,m]."""
    clouds = np.asarray(clouds, np.float64)
    nb, n, _ = clouds.shape
    rows = np.arange(nb)
    out = np.empty((nb, m), np.int64)
    cur = np.asarray(seed_indices, np.int64)
    out[:, 0] = cur
    dist = np.linalg.norm(clouds - clouds[rows, cur][:, None, :], axis=2)
    for j in range(1, m):
        cur = dist.argmax(axis=1)
        out[:, j] = cur
        dist = np.minimum(dist, np.linalg.norm(clouds - clouds[rows, cur][:, None, :], axis=2))
    return out


@dataclass
class PointEncoderParams:
    """Shared per-point MLP [3 -> 64 -> 128], channel max-pool, linear head."""

    w1: DiffTensor
    b1: DiffTensor
    w2: DiffTensor
    b2: DiffTensor
    w3: DiffTensor
    b3: DiffTensor

    @staticmethod
    def init(rng, out_dim=64, hidden=(64, 128), dtype=dc.DEFAULT_DTYPE):
        h1, h2 = hidden
        mk = lambda i, o: (
            orthogonal_init(rng, i, o, 1.0, dtype),
            DiffTensor(np.zeros(o, dtype), requires_grad=True),
        )
        w1, b1 = mk(3, h1)
        w2, b2 = mk(h1, h2)
        w3, b3 = mk(h2, out_dim)
        return PointEncoderParams(w1, b1, w2, b2, w3, b3)

    def named(self, prefix):
        for f in ("w1", "b1", "w2", "b2", "w3", "b3"):
            yield f"{prefix}.{f}", getattr(self, f)

    @property
    def out_dim(self):
        return self.w3.shape[1]


def encode_points(clouds, p: PointEncoderParams):
    """Encode point clouds [M,N,3] -> [M,D_v]; exactly permutation-invariant."""
    clouds = as_cloud_tensor(clouds)
    m, n, _ = clouds.shape
    if n == 0:
        raise ValueError("cannot encode an empty point cloud")
    flat = dc.reshape(clouds, (m * n, 3))
    h = dc.relu(dc.matmul(flat, p.w1) + p.b1)
    h = dc.relu(dc.matmul(h, p.w2) + p.b2)
    pooled = dc.reduce_max(dc.reshape(h, (m, n, h.shape[-1])), axis=1)
    return dc.matmul(pooled, p.w3) + p.b3


def as_cloud_tensor(clouds):
    if isinstance(clouds, DiffTensor):
        t = clouds
    else:
        t = DiffTensor(np.asarray(clouds))
    if t.data.ndim == 2:
        t = dc.reshape(t, (1,) + t.shape)
    return t


@dataclass
class StateEncoderParams:
    """2-layer MLP over the flattened n_obs-step state window."""

    w1: DiffTensor
    b1: DiffTensor
    w2: DiffTensor
    b2: DiffTensor

    @staticmethod
    def init(rng, in_dim, out_dim=64, hidden=64, dtype=dc.DEFAULT_DTYPE):
        return StateEncoderParams(
            orthogonal_init(rng, in_dim, hidden, 1.0, dtype),
            DiffTensor(np.zeros(hidden, dtype), requires_grad=True),
            orthogonal_init(rng, hidden, out_dim, 1.0, dtype),
            DiffTensor(np.zeros(out_dim, dtype), requires_grad=True),
        )

    def named(self, prefix):
        for f in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{f}", getattr(self, f)

    @property
    def in_dim(self):
        return self.w1.shape[0]

    @property
    def out_dim(self):
        return self.w2.shape[1]


def encode_state(window, p: StateEncoderParams):
    """window: [B, n_obs*D_state] normalized states -> [B, D_s]."""
    x = window if isinstance(window, DiffTensor) else DiffTensor(np.asarray(window))
    if x.shape[-1] != p.in_dim:
        raise ValueError(f"state window dim {x.shape[-1]} != configured {p.in_dim}")
    h = dc.silu(dc.matmul(x, p.w1) + p.b1)
    return dc.matmul(h, p.w2) + p.b2


@dataclass
class Condition:
    """Per-window conditioning: point-cloud and robot-state embeddings."""

    vision_emb: DiffTensor  # [B, D_v]
    state_emb: DiffTensor   # [B, D_s]

    def concat(self):
        return dc.concat([self.state_emb, self.vision_emb], axis=1)

    @property
    def dim(self):
        return self.vision_emb.shape[1] + self.state_emb.shape[1]


class Normalizer:
    """Per-dimension affine map onto [-1,1] fitted to the corpus extremes.

    Degenerate dimensions (max == min) normalize to 0 and denormalize back
    to the constant.
    """

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, np.float64)
        self.hi = np.asarray(hi, np.float64)
        span = self.hi - self.lo
        self._degenerate = span == 0
        self._span = np.where(self._degenerate, 1.0, span)

    def normalize(self, x):
        x = np.asarray(x, np.float64)
        out = 2 * (x - self.lo) / self._span - 1
        return np.where(self._degenerate, 0.0, out)

    def denormalize(self, x):
        x = np.asarray(x, np.float64)
        out = (x + 1) / 2 * self._span + self.lo
        return np.where(self._degenerate, self.lo, out)

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @staticmethod
    def from_dict(d):
        return Normalizer(d["lo"], d["hi"])


def fit_normalizer(rows):
    """Per-dimension min/max over rows [n, D] -> Normalizer."""
    rows = np.asarray(rows, np.float64)
    if rows.size == 0:
        raise ValueError("cannot fit a normalizer on an empty corpus")
    return Normalizer(rows.min(axis=0), rows.max(axis=0))


# ---------------------------------------------------------------------------
# demonstration corpus I/O (JSON-lines, one record per episode)


def save_corpus(path, episodes):
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps({
                "obs_state": np.asarray(ep["obs_state"]).tolist(),
                "obs_points": np.asarray(ep["obs_points"]).tolist(),
                "actions": np.asarray(ep["actions"]).tolist(),
            }) + "\n")


def load_corpus(path):
    episodes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            episodes.append({
                "obs_state": np.asarray(rec["obs_state"], np.float64),
                "obs_points": np.asarray(rec["obs_points"], np.float64),
                "actions": np.asarray(rec["actions"], np.float64),
            })
    if not episodes:
        raise ValueError(f"corpus {path} is empty")
    return episodes
