"""Desk-scale verification environments: 2D kinematic reach and push tasks
with synthetic point-cloud observations, scripted experts, and a rollout
evaluator reporting top-k success rates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EnvConfig:
    name: str = "reach"
    n_points: int = 64
    max_step: float = 0.08
    success_radius: float = 0.05
    episode_cap: int = 100
    point_noise: float = 0.01
    contact_radius: float = 0.06

    @property
    def state_dim(self):
        return 6 if self.name == "push" else 4


@dataclass
class EpisodeResult:
    success: bool
    steps_used: int
    final_distance: float


class ToyEnv:
    """Unit-workspace kinematic environment.

    reach: drive the effector onto the target disc.
    push:  drive a pushed object onto the target disc; the object is a
           disc displaced whenever the effector overlaps it.
    """

    def __init__(self, cfg: EnvConfig):
        if cfg.name not in ("reach", "push"):
            raise ValueError(f"unknown environment {cfg.name!r}")
        self.cfg = cfg
        self.effector = np.zeros(2)
        self.target = np.zeros(2)
        self.obj = np.zeros(2)
        self.steps = 0
        self.success = False

    def reset(self, rng):
        c = self.cfg
        self.effector = rng.uniform(-0.9, 0.9, 2)
        self.target = rng.uniform(-0.7, 0.7, 2)
        if c.name == "push":
            while True:
                self.obj = rng.uniform(-0.6, 0.6, 2)
                if (np.linalg.norm(self.obj - self.target) > 3 * c.success_radius
                        and np.linalg.norm(self.obj - self.effector) > 2 * c.contact_radius):
                    break
        else:
            # keep starts off the target so episodes require motion
            while np.linalg.norm(self.effector - self.target) < 4 * c.success_radius:
                self.effector = rng.uniform(-0.9, 0.9, 2)
        self.steps = 0
        self.success = False
        self._obs_rng = rng
        return self.observe()

    def step(self, action):
        """Move by clamp(action)*max_step; returns the new observation."""
        action = np.asarray(action, np.float64)
        if not np.all(np.isfinite(action)):
            raise ValueError("action must be finite")
        c = self.cfg
        delta = np.clip(action, -1, 1) * c.max_step
        new_eff = np.clip(self.effector + delta, -1, 1)
        if c.name == "push":
            if np.linalg.norm(self.obj - new_eff) < c.contact_radius:
                # resolve along the pre-step gap so a fast effector pushes the
                # object ahead of its motion instead of teleporting past it
                gap = self.obj - self.effector
                d = np.linalg.norm(gap)
                direction = gap / d if d > 1e-9 else np.array([1.0, 0.0])
                self.obj = np.clip(new_eff + direction * c.contact_radius, -1, 1)
        self.effector = new_eff
        self.steps += 1
        if self.distance_to_goal() <= c.success_radius:
            self.success = True  # monotone within the episode
        return self.observe()

    def distance_to_goal(self):
        mover = self.obj if self.cfg.name == "push" else self.effector
        return float(np.linalg.norm(mover - self.target))

    def state_vector(self):
        if self.cfg.name == "push":
            return np.concatenate([self.effector, self.obj, self.target])
        return np.concatenate([self.effector, self.target])

    def observe(self):
        """Robot state plus an n_points synthetic cloud on entity discs."""
        c = self.cfg
        rng = self._obs_rng
        if c.name == "push":
            centers = [(self.effector, 0.1), (self.obj, 0.0), (self.target, -0.1)]
        else:
            centers = [(self.effector, 0.1), (self.target, -0.1)]
        counts = np.full(len(centers), c.n_points // len(centers))
        counts[: c.n_points - counts.sum()] += 1
        pts = []
        for (center, z), cnt in zip(centers, counts):
            ang = rng.uniform(0, 2 * np.pi, cnt)
            rad = 0.03 * np.sqrt(rng.uniform(0, 1, cnt))
            disc = np.stack(
                [center[0] + rad * np.cos(ang), center[1] + rad * np.sin(ang),
                 np.full(cnt, z)], axis=1)
            pts.append(disc)
        cloud = np.concatenate(pts) + rng.normal(0, c.point_noise, (c.n_points, 3))
        return {"state": self.state_vector(), "points": cloud}

    def result(self):
        return EpisodeResult(self.success, self.steps, self.distance_to_goal())


def expert_action(env: ToyEnv):
    """One proportional-controller action in [-1,1]^2."""
    c = env.cfg
    if c.name == "reach":
        return np.clip((env.target - env.effector) / c.max_step, -1, 1)
    # push: approach a point behind the object along the push line, orbiting
    # the object when the straight path would bump it off course
    direction = env.target - env.obj
    dist = np.linalg.norm(direction)
    direction = direction / dist if dist > 1e-9 else np.array([1.0, 0.0])
    behind = env.obj - direction * (c.contact_radius + 0.005)
    to_behind = behind - env.effector
    if np.linalg.norm(to_behind) > 0.5 * c.max_step:
        rel = env.effector - env.obj
        theta = np.arctan2(rel[1], rel[0])
        rel_b = behind - env.obj
        theta_b = np.arctan2(rel_b[1], rel_b[0])
        misalign = (theta_b - theta + np.pi) % (2 * np.pi) - np.pi
        # orbit only while badly misaligned; the final radial approach is
        # necessarily close to the object and must not be treated as blocked
        if abs(misalign) > 0.3 and _segment_near(
                env.effector, behind, env.obj, c.contact_radius + 0.01):
            orbit_r = c.contact_radius + 0.05
            dtheta = np.clip(misalign, -0.5, 0.5)
            goal = env.obj + orbit_r * np.array(
                [np.cos(theta + dtheta), np.sin(theta + dtheta)])
            to_behind = goal - env.effector
        return np.clip(to_behind / c.max_step, -1, 1)
    # in pushing position: drive straight through the object toward the target
    return np.clip(direction * min(dist / c.max_step, 1.0), -1, 1)


def _segment_near(a, b, p, radius):
    ab = b - a
    denom = float(np.dot(ab, ab))
    t = 0.0 if denom == 0 else np.clip(np.dot(p - a, ab) / denom, 0, 1)
    return np.linalg.norm(a + t * ab - p) < radius


def scripted_expert(env: ToyEnv, horizon):
    """Next `horizon` expert actions, computed by simulating a copy."""
    sim = ToyEnv(env.cfg)
    sim.effector = env.effector.copy()
    sim.target = env.target.copy()
    sim.obj = env.obj.copy()
    sim.steps = env.steps
    sim.success = env.success
    sim._obs_rng = np.random.default_rng(0)  # observations unused here
    chunk = []
    for _ in range(horizon):
        a = expert_action(sim)
        chunk.append(a)
        sim.step(a)
    return np.asarray(chunk)


class ExpertPolicy:
    """Wraps the scripted controller in the policy rollout interface."""

    def __init__(self, env: ToyEnv, horizon=3):
        self.env = env
        self.horizon = horizon

    def act(self, obs_window, rng=None):
        return scripted_expert(self.env, self.horizon)


def receding_horizon_rollout(policy, env: ToyEnv, rng, horizon=3, n_obs=2):
    """Loop: observe window -> predict chunk -> execute H actions -> repeat.

    The episode rng is shared with the policy so stochastic decoders draw
    fresh noise each replan instead of repeating one fixed sample.
    """
    obs = env.reset(rng)
    window = [obs] * n_obs  # warm start with repeated initial observation
    while env.steps < env.cfg.episode_cap and not env.success:
        chunk = policy.act(window, rng)
        for action in chunk[:horizon]:
            obs = env.step(action)
            window = window[1:] + [obs]
            if env.success or env.steps >= env.cfg.episode_cap:
                break
    return env.result()


def run_episode(policy, cfg: EnvConfig, seed_key, horizon=3, n_obs=2):
    env = ToyEnv(cfg)
    rng = np.random.default_rng(seed_key)
    return receding_horizon_rollout(policy, env, rng, horizon=horizon, n_obs=n_obs)


def topk_rates(round_rates, k):
    top = sorted(round_rates, reverse=True)[:k]
    return float(np.mean(top))


def evaluate_policy(policy, cfg: EnvConfig, seeds=(0, 42, 100), rounds=10,
                    episodes_per_round=20, horizon=3, n_obs=2):
    """SR1/SR3/SR5 per seed plus aggregate mean/std.

    Each round's outcome is its success fraction; SR_k is the mean of the
    top-k round outcomes for that seed.
    """
    if episodes_per_round <= 0 or rounds <= 0:
        raise ValueError("rounds and episodes_per_round must be positive")
    per_seed = {}
    for seed in seeds:
        rates = []
        for rnd in range(rounds):
            wins = 0
            for ep in range(episodes_per_round):
                res = run_episode(policy, cfg, [seed, rnd, ep], horizon, n_obs)
                wins += bool(res.success)
            rates.append(wins / episodes_per_round)
        per_seed[seed] = {
            "round_rates": rates,
            "sr1": topk_rates(rates, 1),
            "sr3": topk_rates(rates, 3),
            "sr5": topk_rates(rates, 5),
        }
    report = {"per_seed": {str(s): v for s, v in per_seed.items()}}
    for key in ("sr1", "sr3", "sr5"):
        vals = [per_seed[s][key] for s in seeds]
        report[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return report
