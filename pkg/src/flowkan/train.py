"""Training loop: corpus windowing, normalizer fitting, AdamW with an EMA
teacher updated every step, JSON-lines metrics, and checkpoint save/load
with resume support.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ck
from . import config as cf
from . import diffcore as dc
from . import flowmatch as fm
from . import perception as pc
from .backbone import VelocityNet
from .diffcore import DiffTensor
from .optim import AdamW, EmaState


@dataclass
class TrainWindows:
    """Aligned training windows cut from the demonstration corpus.

    For each timestep u of each episode: the n_obs most recent observations
    (front-padded by repeating the first) and the next T_pred actions
    (back-padded by repeating the last).
    """

    states: np.ndarray   # [N, n_obs, D_state]
    clouds: np.ndarray   # [N, n_obs, P, 3]
    actions: np.ndarray  # [N, T_pred, D_act]


def extract_windows(episodes, n_obs, t_pred):
    states, clouds, actions = [], [], []
    for ep in episodes:
        s, p, a = ep["obs_state"], ep["obs_points"], ep["actions"]
        n = a.shape[0]
        if s.shape[0] != n:
            raise ValueError("episode has mismatched observation/action counts")
        for u in range(n):
            oi = [max(0, u - (n_obs - 1 - j)) for j in range(n_obs)]
            # trajectory index n_obs-1 is the current step: the executed
            # window {u0..u0+H-1} then answers the newest observation
            ai = [min(max(u - (n_obs - 1) + j, 0), n - 1) for j in range(t_pred)]
            states.append(s[oi])
            clouds.append(p[oi])
            actions.append(a[ai])
    return TrainWindows(
        states=np.stack(states), clouds=np.stack(clouds), actions=np.stack(actions))


def build_policy(cfg: cf.RunConfig, rng, dtype=dc.DEFAULT_DTYPE) -> fm.Policy:
    """Fresh policy sized from the config; cond_dim derived, not trusted."""
    state_dim_raw = 6 if cfg.env.name == "push" else 4
    point_enc = pc.PointEncoderParams.init(rng, out_dim=cfg.vision_dim, dtype=dtype)
    state_enc = pc.StateEncoderParams.init(
        rng, cfg.n_obs * state_dim_raw, out_dim=cfg.state_dim, dtype=dtype)
    bcfg = cfg.backbone
    cond = cfg.state_dim + cfg.n_obs * cfg.vision_dim + bcfg.time_emb_dim
    if bcfg.cond_dim != cond:
        bcfg = dataclass_replace(bcfg, cond_dim=cond)
    net = VelocityNet.init(rng, bcfg, dtype=dtype)
    return fm.Policy(
        net, point_enc, state_enc, n_obs=cfg.n_obs, horizon=cfg.exec_horizon,
        fps_points=cfg.fps_points, t_start=cfg.flow.t_start)


def dataclass_replace(obj, **changes):
    import dataclasses
    return dataclasses.replace(obj, **changes)


def clone_net(net: VelocityNet) -> VelocityNet:
    """Structural copy with frozen (requires_grad=False) tensors whose data
    arrays the EMA state updates in place."""
    import copy

    def freeze(x):
        if isinstance(x, DiffTensor):
            return DiffTensor(x.data.copy(), requires_grad=False)
        if isinstance(x, list):
            return [freeze(v) for v in x]
        if isinstance(x, tuple):
            return tuple(freeze(v) for v in x)
        if hasattr(x, "__dataclass_fields__"):
            return type(x)(**{f: freeze(getattr(x, f)) for f in x.__dataclass_fields__})
        return copy.copy(x)

    return freeze(net)


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i: i + batch_size]


def train(cfg: cf.RunConfig, corpus_path, out_dir, max_steps=None,
          resume_from=None, log_every=10, dtype=dc.DEFAULT_DTYPE):
    """Train a policy on a demonstration corpus. Returns (policy, ema, path)."""
    os.makedirs(out_dir, exist_ok=True)
    episodes = pc.load_corpus(corpus_path)
    windows = extract_windows(episodes, cfg.n_obs, cfg.backbone.horizon)

    ds = windows.states.shape[-1]
    expected = 6 if cfg.env.name == "push" else 4
    if ds != expected:
        raise ValueError(
            f"corpus state dim {ds} does not match env '{cfg.env.name}' ({expected})")

    action_norm = pc.fit_normalizer(windows.actions.reshape(-1, windows.actions.shape[-1]))
    state_norm = pc.fit_normalizer(windows.states.reshape(-1, ds))

    rng = np.random.default_rng(cfg.seed)
    policy = build_policy(cfg, rng, dtype=dtype)
    policy.action_norm = action_norm
    policy.state_norm = state_norm

    teacher = clone_net(policy.net)
    params = list(policy.named_params())
    opt = AdamW(
        params, lr=cfg.optimizer.lr, betas=tuple(cfg.optimizer.betas),
        eps=cfg.optimizer.eps, weight_decay=cfg.optimizer.weight_decay)
    net_params = [(n, t) for n, t in params if n.startswith("net")]
    ema = EmaState(net_params, cfg.optimizer.ema_decay,
                   targets=list(teacher.named("net")))

    step = 0
    if resume_from is not None:
        step = load_into(resume_from, policy, ema, teacher)

    a_norm = action_norm.normalize(
        windows.actions.reshape(-1, windows.actions.shape[-1])
    ).reshape(windows.actions.shape)
    n = a_norm.shape[0]
    window = fm.ControlWindow(cfg.n_obs - 1, cfg.exec_horizon)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    batch_rng = np.random.default_rng([cfg.seed, 1])
    fps_rng = np.random.default_rng([cfg.seed, 2])
    flow_rng = np.random.default_rng([cfg.seed, 3])

    steps_per_epoch = -(-n // cfg.optimizer.batch_size)
    total_steps = cfg.optimizer.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    mode = "a" if resume_from else "w"
    with open(metrics_path, mode) as log:
        done = False
        for _ in range(cfg.optimizer.epochs):
            if done:
                break
            for idx in _batches(batch_rng, n, cfg.optimizer.batch_size):
                if max_steps is not None and step >= max_steps:
                    done = True
                    break
                if cfg.optimizer.lr_schedule == "cosine":
                    frac = min(step / max(total_steps, 1), 1.0)
                    opt.lr = cfg.optimizer.lr * 0.5 * (1 + np.cos(np.pi * frac))
                with dc.Tape() as tape:
                    batch = fm.sample_flow_batch(
                        flow_rng, a_norm[idx], cfg.flow.segments_k, cfg.flow.dt)
                    cond = policy.encode_condition(
                        windows.states[idx], windows.clouds[idx], fps_rng=fps_rng)
                    with dc.no_grad():
                        cond_t = DiffTensor(cond.data.copy())
                    breakdown = fm.total_loss(
                        lambda a, t, s, c: policy.velocity(a, t, s, c),
                        lambda a, t, s, c: teacher.forward(a, t, s, c),
                        batch, cond, cond_t, a_norm[idx], window,
                        cfg.flow.segments_k, alpha=cfg.flow.alpha,
                        lambda_acr=cfg.flow.lambda_acr, dtype=dtype)
                    tape.backward(breakdown.total_tensor)
                opt.step()
                opt.zero_grad()
                ema.update()
                step += 1
                if step % log_every == 0 or step == 1:
                    rec = {"step": step}
                    rec.update(breakdown.metrics())
                    log.write(json.dumps(rec) + "\n")
                    log.flush()

    path = os.path.join(out_dir, "checkpoint.zip")
    save_policy(path, cfg, policy, ema, step)
    cf.save_config(cfg, os.path.join(out_dir, "config.json"))
    return policy, teacher, path


def save_policy(path, cfg, policy: fm.Policy, ema: EmaState, step):
    entries = {f"params/{n}": t.data for n, t in policy.named_params()}
    entries.update({f"ema/{n}": s for n, s in ema.shadow.items()})
    extra = {
        "step": step,
        "config": cf.to_dict(cfg),
        "action_norm": policy.action_norm.to_dict(),
        "state_norm": policy.state_norm.to_dict(),
    }
    ck.save_checkpoint(path, entries, extra)


def load_into(path, policy: fm.Policy, ema: EmaState | None, teacher=None):
    """Load a checkpoint into an existing policy/EMA pair; returns step."""
    entries, extra = ck.load_checkpoint(path)
    params = dict(policy.named_params())
    for name, t in params.items():
        key = f"params/{name}"
        if key not in entries:
            raise ValueError(f"checkpoint missing tensor {key}")
        if entries[key].shape != t.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {key}")
        t.data[...] = entries[key].astype(t.data.dtype)
    if ema is not None:
        for name, shadow in ema.shadow.items():
            shadow[...] = entries[f"ema/{name}"].astype(shadow.dtype)
    elif teacher is not None:
        for name, t in teacher.named("net"):
            t.data[...] = entries[f"ema/{name}"].astype(t.data.dtype)
    policy.action_norm = pc.Normalizer.from_dict(extra["action_norm"])
    policy.state_norm = pc.Normalizer.from_dict(extra["state_norm"])
    return int(extra["step"])


def load_policy(path, dtype=dc.DEFAULT_DTYPE):
    """Reconstruct (cfg, policy) from a checkpoint; EMA weights drive the net."""
    entries, extra = ck.load_checkpoint(path)
    cfg = cf.from_dict(extra["config"])
    policy = build_policy(cfg, np.random.default_rng(cfg.seed), dtype=dtype)
    for name, t in policy.named_params():
        src = entries.get(f"ema/{name}", entries.get(f"params/{name}"))
        if src is None:
            raise ValueError(f"checkpoint missing tensor {name}")
        t.data[...] = src.astype(t.data.dtype)
        t.requires_grad = False
    policy.action_norm = pc.Normalizer.from_dict(extra["action_norm"])
    policy.state_norm = pc.Normalizer.from_dict(extra["state_norm"])
    return cfg, policy
