"""Command-line entry points: demo generation, training, evaluation,
latency benchmarking, and numerical self-checks.

All commands exit nonzero on error with a one-line reason on stderr.
Setting FLOWKAN_DETERMINISTIC=1 forces single-threaded deterministic mode
regardless of --jobs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import config as cf
from . import diffcore as dc
from . import envsuite as es
from . import flowmatch as fm
from . import groupkan as gk
from . import perception as pc
from . import rwkv as rk
from . import train as tr
from .diffcore import DiffTensor


def _deterministic():
    return os.environ.get("FLOWKAN_DETERMINISTIC") == "1"


def collect_demos(cfg: cf.RunConfig, count, seed):
    """Scripted-expert episodes as corpus records (only successes kept)."""
    episodes = []
    attempt = 0
    while len(episodes) < count:
        if attempt > 20 * count:
            raise RuntimeError("expert failed too often; check env config")
        env = es.ToyEnv(cfg.env)
        rng = np.random.default_rng([seed, attempt])
        env.reset(rng)
        attempt += 1
        noise_scale = cfg.demo_noise  # std in normalized [-1, 1] action units
        states, clouds, actions = [], [], []
        while not env.success and env.steps < cfg.env.episode_cap:
            obs = env.observe()
            a = es.expert_action(env)
            states.append(obs["state"])
            clouds.append(obs["points"])
            actions.append(a)
            # Execute a jittered action but label the state with the clean
            # expert action: the corpus then covers off-path states paired
            # with the correction the expert would apply there.
            env.step(a + rng.normal(0.0, noise_scale, a.shape))
        if env.success:
            episodes.append({
                "obs_state": np.asarray(states),
                "obs_points": np.asarray(clouds),
                "actions": np.asarray(actions),
            })
    return episodes


def cmd_gen_demos(args):
    cfg = _load_cfg(args)
    count = args.count if args.count is not None else cfg.demo_count
    if count < 1:
        raise ValueError("--count must be >= 1")
    out = args.out or "demos.jsonl"
    episodes = collect_demos(cfg, count, cfg.seed)
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    pc.save_corpus(out, episodes)
    print(f"wrote {len(episodes)} episodes to {out}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    if args.lambda_acr is not None:
        cfg.flow.lambda_acr = args.lambda_acr
    if args.segments is not None:
        cfg.flow.segments_k = args.segments
        cfg.backbone.segments_k = args.segments
    cfg.validate()
    out_dir = args.out or cfg.out_dir
    _, _, path = tr.train(
        cfg, args.corpus, out_dir, max_steps=args.max_steps,
        resume_from=args.resume)
    print(f"checkpoint written to {path}")
    return 0


def cmd_eval(args):
    cfg_over = _load_cfg(args) if args.config else None
    cfg, policy = tr.load_policy(args.checkpoint)
    if cfg_over is not None:
        cfg.eval = cfg_over.eval
        cfg.env = cfg_over.env
    seeds = tuple(cfg.eval.seeds)
    report = _evaluate(policy, cfg, seeds, args.jobs)
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", "eval.json")
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for k in ("sr1", "sr3", "sr5"):
        print(f"{k}: mean {report[k]['mean']:.3f} std {report[k]['std']:.3f}")
    print(f"report written to {out}")
    return 0


def _evaluate(policy, cfg, seeds, jobs):
    if _deterministic() or not jobs or jobs <= 1:
        return es.evaluate_policy(
            policy, cfg.env, seeds=seeds, rounds=cfg.eval.rounds,
            episodes_per_round=cfg.eval.episodes_per_round,
            horizon=cfg.exec_horizon, n_obs=cfg.n_obs)
    # per-seed evaluation is independent; merge single-seed reports
    from concurrent.futures import ThreadPoolExecutor
    one = lambda s: es.evaluate_policy(
        policy, cfg.env, seeds=(s,), rounds=cfg.eval.rounds,
        episodes_per_round=cfg.eval.episodes_per_round,
        horizon=cfg.exec_horizon, n_obs=cfg.n_obs)
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        parts = list(ex.map(one, seeds))
    report = {"per_seed": {}}
    for part in parts:
        report["per_seed"].update(part["per_seed"])
    for key in ("sr1", "sr3", "sr5"):
        vals = [report["per_seed"][str(s)][key] for s in seeds]
        report[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return report


def cmd_bench(args):
    cfg, policy = tr.load_policy(args.checkpoint)
    steps_list = [int(s) for s in args.steps.split(",")]
    if any(s < 1 for s in steps_list):
        raise ValueError("--steps entries must be >= 1")
    env = es.ToyEnv(cfg.env)
    env.reset(np.random.default_rng(cfg.seed))
    obs = env.observe()
    states = np.stack([obs["state"]] * cfg.n_obs)[None]
    clouds = np.stack([obs["points"]] * cfg.n_obs)[None]
    with dc.no_grad():
        cond = policy.encode_condition(states, clouds)
    rows = []
    for n_steps in steps_list:
        times = []
        policy.nfe = 0
        with dc.no_grad():
            for rep in range(args.reps):
                rng = np.random.default_rng([cfg.seed, n_steps, rep])
                t0 = time.perf_counter()
                if n_steps == 1 and cfg.flow.segments_k == 1:
                    policy.infer_one_step(cond, rng)
                else:
                    policy.infer_multi_step(cond, rng, n_steps)
                times.append((time.perf_counter() - t0) * 1e3)
        nfe = policy.nfe // args.reps
        rows.append((n_steps, float(np.median(times)),
                     float(np.percentile(times, 95)), nfe))
    lines = ["n_steps,median_ms,p95_ms,nfe"]
    lines += [f"{s},{med:.3f},{p95:.3f},{nfe}" for s, med, p95, nfe in rows]
    csv = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv)
    print(csv, end="")
    return 0


# ---------------------------------------------------------------------------
# numerical self-checks


def _check_wkv(fault=None):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        b, t, c = rng.integers(1, 5), rng.integers(1, 17), rng.integers(1, 9)
        k = rng.normal(0, 2, (b, t, c))
        v = rng.normal(0, 1, (b, t, c))
        w = rng.uniform(0.01, 3, c)
        u = rng.normal(0, 1, c)
        got = rk.wkv_forward_scan(
            DiffTensor(k, dtype=np.float64), DiffTensor(v, dtype=np.float64), w, u).data
        ref = rk.wkv_direct(k, v, w, u)
        if fault == "wkv":
            got = -got
        denom = np.maximum(np.abs(ref), 1e-12)
        worst = max(worst, float(np.max(np.abs(got - ref) / denom)))
    return worst


def _check_spline(fault=None):
    rng = np.random.default_rng(11)
    grid = gk.SplineGrid()
    xs = np.linspace(grid.lo, grid.hi, 100)
    worst = 0.0
    for _ in range(50):
        coeffs = rng.normal(0, 1, grid.n_bases)
        f = gk.SplineFunction(
            grid=grid, coeffs=DiffTensor(coeffs),
            base_scale=DiffTensor(np.asarray(0.0)),
            spline_scale=DiffTensor(np.asarray(1.0)))
        got = gk.spline_eval(f, DiffTensor(xs, dtype=np.float64)).data
        ref = np.array([gk.de_boor_reference(x, coeffs, grid) for x in xs])
        if fault == "spline":
            got = got + 1e-6
        denom = np.maximum(np.abs(ref), 1e-9)
        worst = max(worst, float(np.max(np.abs(got - ref) / denom)))
    return worst


def _check_grad(fault=None):
    from .backbone import BackboneConfig, VelocityNet

    cfg = BackboneConfig(widths=(8, 16, 32), action_dim=2, horizon=4,
                         cond_dim=12, time_emb_dim=8, time_freqs=4)
    rng = np.random.default_rng(3)
    net = VelocityNet.init(rng, cfg, dtype=np.float64)
    # the output head is zero-initialized, which would zero every gradient
    # of a squared-output loss; perturb it so the check has teeth
    net.out_w.data[...] = 0.1 * rng.standard_normal(net.out_w.shape)
    a = DiffTensor(rng.standard_normal((2, 4, 2)), dtype=np.float64)
    cond = DiffTensor(rng.standard_normal((2, 4)), dtype=np.float64,
                      requires_grad=True)
    t = np.array([0.2, 0.7])
    seg = np.array([0, 1])
    def loss_fn():
        out = net.forward(a, t, seg, cond)
        return dc.sum_(out * out)

    tensors = [p for _, p in net.named()] + [cond]
    err = dc.gradcheck_sampled(loss_fn, tensors, n_samples=300, seed=13)
    if fault == "grad":
        err += 1.0
    return err


def _check_flow(fault=None):
    rng = np.random.default_rng(5)
    b, t, d = 4, 4, 2
    a_src = rng.standard_normal((b, t, d))
    a_tar = rng.standard_normal((b, t, d))
    worst = 0.0
    for k in (1, 2):
        oracle = lambda a_t, tt, seg, cond: (
            (DiffTensor(a_tar, dtype=np.float64) - a_t)
            * (1.0 / (1.0 - np.asarray(tt).reshape(-1, 1, 1))))
        batch = fm.sample_flow_batch(rng, a_tar, k, 1e-2)
        batch = fm.FlowSample(a_src=a_src, a_tar=a_tar, t=batch.t,
                              dt=batch.dt, segment=batch.segment)
        l_mfm, l_end, l_vel, decode, _ = fm.multisegment_loss(
            oracle, oracle, batch, None, None, k, dtype=np.float64)
        worst = max(worst, l_mfm.item(), l_end.item(), l_vel.item(),
                    float(np.max(np.abs(decode.data - a_tar))))
    if fault == "flow":
        worst += 1.0
    return worst


CHECK_SUITES = [
    ("wkv_scan_vs_direct", _check_wkv, 1e-10),
    ("spline_vs_de_boor", _check_spline, 1e-10),
    ("gradient_finite_diff", _check_grad, 1e-4),
    ("flow_identities", _check_flow, 1e-12),
]


def cmd_check(args):
    fault = getattr(args, "inject_fault", None)
    failed = False
    print(f"{'suite':<24} {'max error':>12} {'tolerance':>12} {'result':>8}")
    for name, fn, tol in CHECK_SUITES:
        err = fn(fault)
        ok = err <= tol
        failed = failed or not ok
        print(f"{name:<24} {err:>12.3e} {tol:>12.0e} {'PASS' if ok else 'FAIL':>8}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def _load_cfg(args) -> cf.RunConfig:
    if getattr(args, "config", None):
        cfg = cf.load_config(args.config)
    else:
        cfg = cf.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


def build_parser():
    p = argparse.ArgumentParser(prog="flowkan",
                                description="flow-matching visuomotor policy toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output file or directory")

    g = sub.add_parser("gen-demos", help="record scripted-expert demonstrations")
    common(g)
    g.add_argument("--count", type=int, default=None)
    g.set_defaults(fn=cmd_gen_demos)

    t = sub.add_parser("train", help="train a policy on a demo corpus")
    common(t)
    t.add_argument("corpus", help="JSON-lines demonstration corpus")
    t.add_argument("--lambda-acr", type=float, default=None)
    t.add_argument("--segments", type=int, default=None)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="success-rate evaluation of a checkpoint")
    common(e)
    e.add_argument("checkpoint")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="decode latency benchmark")
    common(b)
    b.add_argument("checkpoint")
    b.add_argument("--steps", default="1,2,10", help="comma-separated step counts")
    b.add_argument("--reps", type=int, default=20)
    b.set_defaults(fn=cmd_bench)

    c = sub.add_parser("check", help="numerical self-checks against oracles")
    c.add_argument("--inject-fault", choices=["wkv", "spline", "grad", "flow"],
                   help=argparse.SUPPRESS)
    c.set_defaults(fn=cmd_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    import zipfile
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError, FloatingPointError, KeyError,
            zipfile.BadZipFile, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
