"""Command-line entry points.

Verbs: pretrain, rollout, retrain, evaluate, report, serve, plus a `world`
helper that writes world definition files. `rollout` runs the budgeted
protocol (collect + per-episode retrain + checkpoints); with
`--method none` it only collects a buffer, and with `--shared-buffer` it
trains on a pre-recorded one.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ExperimentConfig,
    ExperimentResult,
    collect_rollouts,
    evaluate,
    load_experiment,
    pretrain_novice,
    run_experiment,
    save_experiment,
    write_report,
)
from .methods import METHOD_NAMES, HyperParams
from .nets import Checkpoint, load_checkpoint
from .session import load_buffer, save_buffer
from .world import RiverWorld, StartSpec, default_river, sample_start_specs, sinusoid_river, straight_river


def _load_world(path: str | None) -> RiverWorld:
    return RiverWorld.load(path) if path else default_river()


def _hp_from_args(args) -> HyperParams:
    return HyperParams(
        alpha=args.alpha, beta=args.beta, gamma=args.gamma, eta=args.eta,
        lam=args.lam, epochs=args.epochs, k_horizon=args.k, zeta=args.zeta,
        lr=args.lr, eps=args.eps,
    )


def _add_hp_flags(p: argparse.ArgumentParser) -> None:
    hp = HyperParams()
    p.add_argument("--alpha", type=float, default=hp.alpha, help="hybrid mixing weight")
    p.add_argument("--beta", type=float, default=hp.beta, help="BT inverse temperature")
    p.add_argument("--gamma", type=float, default=hp.gamma, help="discount factor")
    p.add_argument("--eta", type=float, default=hp.eta, help="KL gate threshold")
    p.add_argument("--lam", type=float, default=hp.lam, help="FOCOPS greediness")
    p.add_argument("--epochs", "-E", type=int, default=hp.epochs, help="inner retrain epochs")
    p.add_argument("--k", "-K", type=int, default=hp.k_horizon, help="reward-to-go truncation")
    p.add_argument("--zeta", type=float, default=hp.zeta, help="COACH weak positive")
    p.add_argument("--lr", type=float, default=hp.lr, help="learning rate")
    p.add_argument("--eps", type=float, default=hp.eps, help="standardization epsilon")


def cmd_world(args) -> int:
    if args.shape == "straight":
        world = straight_river(length=args.length, width=args.width, seed=args.seed)
    else:
        world = sinusoid_river(length=args.length, width=args.width,
                               amplitude=args.amplitude, period=args.period, seed=args.seed)
    world.save(args.out)
    print(f"wrote {args.out}: {world.num_segments} segments over {world.total_length:.1f} m")
    return 0


def cmd_pretrain(args) -> int:
    world = _load_world(args.world)
    ckpt = pretrain_novice(world, args.seed, bc_steps=args.bc_steps, epsilon=args.epsilon,
                           competence=args.competence)
    ckpt_id = ckpt.save(args.out)
    cov = ckpt.metadata["coverage_fraction"]
    print(f"novice {ckpt_id} saved to {args.out} (default-start coverage {cov:.1%})")
    return 0


def cmd_rollout(args) -> int:
    world = _load_world(args.world)
    if args.overseer == "remote":
        return _serve_from_rollout(args, world)
    params, metadata = load_checkpoint(args.checkpoint)
    novice = Checkpoint(params, metadata)
    out = Path(args.out)

    cfg = ExperimentConfig(
        world=world,
        methods=[args.method] if args.method != "none" else ["SPAR-H"],
        hp=_hp_from_args(args),
        num_episodes=args.episodes,
        seed=args.seed,
        shared_rollouts=args.shared_buffer is not None or args.method == "none",
        overseer_window=args.overseer_window,
    )
    if args.method == "none":
        buffer = collect_rollouts(cfg, novice.params)
        save_buffer(buffer, out)
        stats = [(t.episode_id, t.steps, t.interventions) for t in buffer]
        print(f"collected {len(buffer)} episodes into {out}")
        for ep, steps, iv in stats:
            print(f"  ep{ep}: {steps} steps, {iv} interventions")
        return 0

    if args.shared_buffer is not None:
        shared = load_buffer(args.shared_buffer)
        cfg.shared_rollouts = True
    else:
        shared = collect_rollouts(cfg, novice.params) if cfg.shared_rollouts else None

    result = _run_single_method(cfg, novice, shared)
    save_experiment(result, out)
    summary = result.summary()
    print(f"run saved to {out}")
    for name, stats in summary.items():
        print(f"  {name:10s} mean {stats['mean']:8.2f}  std {stats['std']:7.2f}")
    return 0


def _run_single_method(cfg: ExperimentConfig, novice: Checkpoint, shared) -> ExperimentResult:
    from .harness import derive_seed, run_protocol
    from .methods import LatentCache

    cache = LatentCache(novice.params)
    eval_seeds = [derive_seed(cfg.seed, 600 + i) for i in range(cfg.num_episodes)]
    baseline = evaluate(novice.params, cfg.world, cfg.start_specs, eval_seeds)
    run = run_protocol(cfg, cfg.methods[0], novice, shared_buffer=shared, latent_cache=cache)
    finals = {cfg.methods[0]: evaluate(run.final_params, cfg.world, cfg.start_specs, eval_seeds)}
    return ExperimentResult(cfg, novice, shared, baseline, {cfg.methods[0]: run}, finals)


def _serve_from_rollout(args, world) -> int:
    from .server import ServerConfig, serve

    params, _ = load_checkpoint(args.checkpoint)
    cfg = ServerConfig(
        world=world,
        params=params,
        method=args.method if args.method != "none" else "SPAR-H",
        hp=_hp_from_args(args),
        num_episodes=args.episodes,
        session_seed=args.seed,
        session_dir=Path(args.out),
    )
    print(f"remote-overseer session on ws://127.0.0.1:{args.port}/ws (ctrl-c to stop)")
    serve(cfg, port=args.port)
    return 0


def cmd_retrain(args) -> int:
    from .methods import retrain

    world = _load_world(args.world)  # noqa: F841  (validates the file when given)
    params, metadata = load_checkpoint(args.checkpoint)
    buffer = load_buffer(args.buffer)
    new_params, reports = retrain(args.method, buffer, params, _hp_from_args(args))
    ckpt = Checkpoint(new_params, {
        "method": args.method,
        "episode_index": len(buffer) - 1,
        "creation_seed": metadata.get("creation_seed", 0),
        "hyperparams": _hp_from_args(args).to_dict(),
    })
    ckpt_id = ckpt.save(args.out)
    print(f"retrained {args.method} on {len(buffer)} episodes -> {args.out} ({ckpt_id})")
    if args.loss_log:
        with open(args.loss_log, "w") as fh:
            for rep in reports:
                fh.write(json.dumps(rep.to_json_dict(), sort_keys=True) + "\n")
    return 0


def cmd_evaluate(args) -> int:
    world = _load_world(args.world)
    params, _ = load_checkpoint(args.checkpoint)
    starts = sample_start_specs(world, args.episodes, args.start_seed)
    rewards = evaluate(params, world, starts,
                       seeds=list(range(args.seed, args.seed + args.episodes)),
                       policy_mode=args.policy_mode)
    for start, r in zip(starts, rewards):
        print(f"segment {start.segment_index:3d} offset {start.lateral_offset:+.2f} "
              f"yaw {start.yaw_offset:+6.1f} -> reward {r:.0f}")
    import numpy as np

    print(f"mean {np.mean(rewards):.2f}  std {np.std(rewards):.2f}")
    return 0


def cmd_report(args) -> int:
    result = load_experiment(args.run)
    out = Path(args.out) if args.out else Path(args.run) / "reports"
    write_report(result, out)
    print(f"reports written to {out}")
    return 0


def cmd_serve(args) -> int:
    from .server import ServerConfig, serve

    world = _load_world(args.world)
    params, _ = load_checkpoint(args.checkpoint)
    cfg = ServerConfig(
        world=world,
        params=params,
        method=args.method,
        hp=_hp_from_args(args),
        start=StartSpec(args.start_segment, args.start_offset, args.start_z, args.start_yaw),
        num_episodes=args.episodes,
        session_seed=args.seed,
        policy_mode=args.policy_mode,
        session_dir=Path(args.session_dir) if args.session_dir else None,
        online_retrain_interval=args.retrain_interval,
        decision_timeout=args.decision_timeout,
        timeout_policy=args.timeout_policy,
    )
    print(f"session server on ws://{args.host}:{args.port}/ws (ctrl-c to stop)")
    serve(cfg, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riverspar",
                                     description="HITL preference alignment for river coverage")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("world", help="write a world definition file")
    p.add_argument("--out", required=True)
    p.add_argument("--shape", choices=["straight", "sinusoid"], default="straight")
    p.add_argument("--length", type=float, default=200.0)
    p.add_argument("--width", type=float, default=10.0)
    p.add_argument("--amplitude", type=float, default=8.0)
    p.add_argument("--period", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_world)

    p = sub.add_parser("pretrain", help="behavior-clone the novice from the corrupted oracle")
    p.add_argument("--world", default=None, help="world JSON (default: built-in straight river)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--bc-steps", type=int, default=2000)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--competence", type=float, default=0.3)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("rollout", help="run the HITL protocol (or collect a buffer with --method none)")
    p.add_argument("--world", default=None)
    p.add_argument("--method", default="SPAR-H", choices=list(METHOD_NAMES) + ["none"])
    p.add_argument("--overseer", choices=["scripted", "remote"], default="scripted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--shared-buffer", default=None, help="pre-recorded buffer directory")
    p.add_argument("--checkpoint", required=True, help="novice checkpoint to start from")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--overseer-window", type=int, default=6)
    p.add_argument("--port", type=int, default=8642, help="port for --overseer remote")
    _add_hp_flags(p)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("retrain", help="retrain a checkpoint offline on a buffer")
    p.add_argument("--world", default=None)
    p.add_argument("--buffer", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", required=True, choices=list(METHOD_NAMES))
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log", default=None, help="write per-epoch loss reports (JSONL)")
    _add_hp_flags(p)
    p.set_defaults(fn=cmd_retrain)

    p = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint on sampled starts")
    p.add_argument("--world", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-seed", type=int, default=1)
    p.add_argument("--policy-mode", choices=["greedy", "sampled"], default="greedy")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="regenerate report files from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("serve", help="live HITL session over a WebSocket")
    p.add_argument("--world", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", default="SPAR-H", choices=list(METHOD_NAMES))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8642)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policy-mode", choices=["sampled", "greedy"], default="sampled")
    p.add_argument("--session-dir", default=None)
    p.add_argument("--retrain-interval", type=int, default=None,
                   help="auto-retrain every N executed steps (skipped when the window has no interventions)")
    p.add_argument("--decision-timeout", type=float, default=None)
    p.add_argument("--timeout-policy", choices=["auto_accept", "abort"], default="auto_accept")
    p.add_argument("--start-segment", type=int, default=0)
    p.add_argument("--start-offset", type=float, default=0.0)
    p.add_argument("--start-z", type=float, default=6.0)
    p.add_argument("--start-yaw", type=float, default=0.0)
    _add_hp_flags(p)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
