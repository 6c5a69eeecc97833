"""Budgeted experiment protocol at desk scale.

One experiment: pretrain a novice by behavior cloning a corrupted oracle,
collect five HITL rollouts with the scripted conservative overseer (once,
shared across methods when `shared_rollouts` is set), retrain each method
sequentially per episode on the cumulative buffer, checkpoint after every
episode, evaluate each checkpoint on its episode's start, and evaluate the
final checkpoint on all starts. All seeds are derived from the experiment
seed, so two runs with the same seed are byte-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import bc_policy_loss, reward_fit_loss
from .methods import HyperParams, LatentCache, LossReport, retrain
from .nets import (
    Checkpoint,
    NetParams,
    Optimizer,
    act,
    encode_sequence,
    encode_step,
    init_params,
    initial_latent,
    obs_to_input,
    reward_many,
    snapshot,
)
from .session import (
    ReplayBuffer,
    ScriptedOverseer,
    Trajectory,
    oracle_action,
    run_episode,
    save_buffer,
)
from .validation import ConfigurationError, UsageError, require
from .world import (
    Episode,
    MultiDiscreteAction,
    RiverWorld,
    StartSpec,
    sample_start_specs,
)

MANIFEST_FORMAT_VERSION = 1
DEFAULT_START = StartSpec(segment_index=0, lateral_offset=0.0, z=6.0, yaw_offset=0.0)


def derive_seed(experiment_seed: int, offset: int) -> int:
    return int(experiment_seed) * 1000 + offset


@dataclass
class ExperimentConfig:
    world: RiverWorld
    methods: list[str]
    hp: HyperParams = field(default_factory=HyperParams)
    num_episodes: int = 5
    start_specs: list[StartSpec] | None = None
    seed: int = 0
    eval_seeds: list[int] | None = None
    shared_rollouts: bool = True
    overseer_window: int = 6
    rollout_policy_mode: str = "sampled"
    eval_policy_mode: str = "greedy"
    online_retrain_interval: int | None = None  # server-side auto retrain cadence

    def __post_init__(self):
        require(len(self.methods) > 0, "methods list is empty", ConfigurationError)
        if self.start_specs is None:
            self.start_specs = sample_start_specs(self.world, self.num_episodes,
                                                  derive_seed(self.seed, 1))
        require(len(self.start_specs) == self.num_episodes,
                "need exactly one start spec per episode", ConfigurationError)
        if self.eval_seeds is None:
            self.eval_seeds = [derive_seed(self.seed, 600 + i) for i in range(self.num_episodes)]
        require(len(self.eval_seeds) == self.num_episodes,
                "need exactly one eval seed per episode", ConfigurationError)


# -- novice pretraining ---------------------------------------------------------


def greedy_rollout(params: NetParams, world: RiverWorld, start: StartSpec,
                   seed: int = 0) -> tuple[float, float]:
    """(episodic reward, coverage fraction) of a greedy no-overseer rollout."""
    traj = run_episode(world, params, None, start, seed, policy_mode="greedy")
    coverage = (traj.episodic_reward + 1.0) / world.num_segments  # +1: start segment
    return traj.episodic_reward, coverage


def collect_corrupted_oracle_steps(
    world: RiverWorld,
    params: NetParams,
    seed: int,
    steps: int,
    epsilon: float,
) -> tuple[np.ndarray, list[MultiDiscreteAction], np.ndarray]:
    """Roll the epsilon-corrupted oracle, returning (latents, actions, rewards).

    The demonstrator takes the greedy safe oracle action except with
    probability epsilon, where it executes a uniformly random joint action.
    Cloning targets are the executed actions (the corrupted demonstrator's
    own behavior), reward targets the observed coverage gains. Episodes
    alternate between the default start and seeded sampled starts so the
    clone sees both the canonical route and off-axis recovery states.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    starts = sample_start_specs(world, 128, seed + 1)
    latents, actions, rewards = [], [], []
    episode_idx = 0
    while len(actions) < steps:
        start = DEFAULT_START if episode_idx % 2 == 0 else starts[episode_idx % len(starts)]
        ep = Episode(world, start, seed + episode_idx)
        episode_idx += 1
        z = initial_latent()
        while not ep.terminated and len(actions) < steps:
            obs = ep.observation
            z = encode_step(params, z, obs_to_input(obs))
            best = oracle_action(world, ep.pose, ep.coverage)
            if best is None:
                break
            if rng.random() < epsilon:
                a = MultiDiscreteAction.from_joint_index(int(rng.integers(0, 81)))
            else:
                a = best
            outcome = ep.step(a)
            latents.append(z.copy())
            actions.append(a)
            rewards.append(outcome.reward)
    return np.array(latents), actions, np.array(rewards)


def pretrain_novice(
    world: RiverWorld,
    seed: int,
    bc_steps: int = 2000,
    epsilon: float = 0.3,
    competence: float = 0.3,
    lr: float = 3e-3,
    block_epochs: int = 2,
    max_blocks: int = 300,
) -> Checkpoint:
    """Behavior-clone the heads from a corrupted oracle until the greedy
    policy completes at least `competence` of the river from the default
    start; the reward head is regressed on the observed coverage gains."""
    params = init_params(seed)
    latents, actions, rewards = collect_corrupted_oracle_steps(
        world, params, seed, bc_steps, epsilon
    )
    policy_opt = Optimizer("adam", lr)
    reward_opt = Optimizer("adam", lr)
    coverage = 0.0
    for _ in range(max_blocks):
        for _ in range(block_epochs):
            _, pg = bc_policy_loss(params, latents, actions)
            params = policy_opt.apply(params, pg)
            _, rg = reward_fit_loss(params, latents, actions, rewards)
            params = reward_opt.apply(params, rg)
        _, coverage = greedy_rollout(params, world, DEFAULT_START)
        if coverage >= competence:
            break
    else:
        raise UsageError(
            f"novice reached only {coverage:.1%} coverage after {max_blocks * block_epochs} "
            f"epochs; increase bc_steps or the training budget"
        )
    metadata = {
        "method": "novice",
        "episode_index": -1,
        "creation_seed": seed,
        "hyperparams": {"bc_steps": bc_steps, "epsilon": epsilon, "lr": lr,
                        "competence": competence},
        "coverage_fraction": coverage,
    }
    return Checkpoint(params, metadata)


# -- evaluation -----------------------------------------------------------------


def evaluate(
    params: NetParams,
    world: RiverWorld,
    starts: list[StartSpec],
    seeds: list[int] | None = None,
    policy_mode: str = "greedy",
) -> list[float]:
    """Episodic rewards of overseer-free rollouts from each start."""
    seeds = seeds if seeds is not None else [0] * len(starts)
    require(len(seeds) == len(starts), "need one seed per start")
    return [
        run_episode(world, params, None, start, seed, policy_mode=policy_mode).episodic_reward
        for start, seed in zip(starts, seeds)
    ]


# -- protocol -------------------------------------------------------------------


@dataclass
class ProtocolResult:
    method: str
    checkpoints: list[Checkpoint]
    buffer: ReplayBuffer
    per_checkpoint_rewards: list[float]
    epoch_reports: list[list[LossReport]]

    @property
    def final_params(self) -> NetParams:
        return self.checkpoints[-1].params


def collect_rollouts(
    cfg: ExperimentConfig, params: NetParams, episode_ids: range | None = None
) -> ReplayBuffer:
    """The HITL data source: scripted-overseer episodes from the start specs."""
    buffer = ReplayBuffer()
    overseer = ScriptedOverseer(window=cfg.overseer_window)
    for ep in episode_ids or range(cfg.num_episodes):
        traj = run_episode(
            cfg.world, params, overseer, cfg.start_specs[ep],
            seed=derive_seed(cfg.seed, 10 + ep),
            policy_mode=cfg.rollout_policy_mode, episode_id=ep,
        )
        buffer.append(traj)
    return buffer


def run_protocol(
    cfg: ExperimentConfig,
    method: str,
    novice: Checkpoint,
    shared_buffer: ReplayBuffer | None = None,
    latent_cache: LatentCache | None = None,
) -> ProtocolResult:
    """Sequential per-episode retraining with one checkpoint per episode."""
    if cfg.shared_rollouts:
        require(shared_buffer is not None, "shared_rollouts set but no shared buffer given")
        require(len(shared_buffer) >= cfg.num_episodes,
                f"shared buffer holds {len(shared_buffer)} episodes, need {cfg.num_episodes}")
    params = snapshot(novice.params)
    cache = latent_cache if latent_cache is not None else LatentCache(params)
    overseer = ScriptedOverseer(window=cfg.overseer_window)
    buffer = ReplayBuffer()
    checkpoints: list[Checkpoint] = []
    per_cp_rewards: list[float] = []
    epoch_reports: list[list[LossReport]] = []

    for ep in range(cfg.num_episodes):
        if cfg.shared_rollouts:
            traj = shared_buffer.trajectories[ep]
        else:
            traj = run_episode(
                cfg.world, params, overseer, cfg.start_specs[ep],
                seed=derive_seed(cfg.seed, 10 + ep),
                policy_mode=cfg.rollout_policy_mode, episode_id=ep,
            )
        buffer.append(traj)
        params, reports = retrain(method, buffer, params, cfg.hp, latent_cache=cache)
        epoch_reports.append(reports)
        checkpoints.append(
            Checkpoint(
                params,
                {
                    "method": method,
                    "episode_index": ep,
                    "creation_seed": cfg.seed,
                    "hyperparams": cfg.hp.to_dict(),
                },
            )
        )
        reward = evaluate(
            params, cfg.world, [cfg.start_specs[ep]],
            [derive_seed(cfg.seed, 500 + ep)], cfg.eval_policy_mode,
        )[0]
        per_cp_rewards.append(reward)
    return ProtocolResult(method, checkpoints, buffer, per_cp_rewards, epoch_reports)


@dataclass
class ExperimentResult:
    cfg: ExperimentConfig
    novice: Checkpoint
    shared_buffer: ReplayBuffer | None
    baseline_rewards: list[float]
    runs: dict[str, ProtocolResult]
    final_rewards: dict[str, list[float]]

    def summary(self) -> dict:
        out = {
            "baseline": {
                "mean": float(np.mean(self.baseline_rewards)),
                "std": float(np.std(self.baseline_rewards)),
            }
        }
        for method, rewards in self.final_rewards.items():
            out[method] = {"mean": float(np.mean(rewards)), "std": float(np.std(rewards))}
        return out


def run_experiment(cfg: ExperimentConfig, novice: Checkpoint | None = None) -> ExperimentResult:
    if novice is None:
        novice = pretrain_novice(cfg.world, cfg.seed)
    shared = collect_rollouts(cfg, novice.params) if cfg.shared_rollouts else None
    cache = LatentCache(novice.params)
    eval_seeds = cfg.eval_seeds
    baseline = evaluate(novice.params, cfg.world, cfg.start_specs, eval_seeds, cfg.eval_policy_mode)
    runs: dict[str, ProtocolResult] = {}
    final_rewards: dict[str, list[float]] = {}
    for method in cfg.methods:
        result = run_protocol(cfg, method, novice, shared_buffer=shared, latent_cache=cache)
        runs[method] = result
        final_rewards[method] = evaluate(
            result.final_params, cfg.world, cfg.start_specs, eval_seeds, cfg.eval_policy_mode
        )
    return ExperimentResult(cfg, novice, shared, baseline, runs, final_rewards)


# -- reporting ------------------------------------------------------------------


def intervention_stats(buffer: ReplayBuffer) -> list[dict]:
    """Per-episode rows plus the Overall row (column sums, weighted rate)."""
    rows = []
    for traj in buffer:
        rows.append(
            {
                "episode": traj.episode_id,
                "steps": traj.steps,
                "interventions": traj.interventions,
                "intervention_rate": traj.intervention_rate,
            }
        )
    total_steps = sum(r["steps"] for r in rows)
    total_int = sum(r["interventions"] for r in rows)
    rows.append(
        {
            "episode": "Overall",
            "steps": total_steps,
            "interventions": total_int,
            "intervention_rate": (total_int / total_steps) if total_steps else 0.0,
        }
    )
    return rows


def reward_estimate_dump(params: NetParams, traj: Trajectory) -> list[dict]:
    """R_phi(s_t, a_agent) and R_phi(s_t, a_exec) along a logged episode,
    with latents recomputed from the executed history."""
    if not traj.records:
        return []
    latents = encode_sequence(params, [r.observation for r in traj.records])
    r_agent, _ = reward_many(params, latents, [r.a_agent for r in traj.records])
    r_exec, _ = reward_many(params, latents, [r.a_exec for r in traj.records])
    rows = []
    for i, rec in enumerate(traj.records):
        rows.append(
            {
                "episode": rec.episode_id,
                "t": rec.t,
                "m": rec.m,
                "a_agent": rec.a_agent.joint_index,
                "a_exec": rec.a_exec.joint_index,
                "reward_est_agent": float(r_agent[i]),
                "reward_est_exec": float(r_exec[i]),
                "env_reward": rec.reward,
            }
        )
    return rows


def _write_csv(path: Path, rows: list[dict], fieldnames: list[str]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_report(result: ExperimentResult | None, out_dir: str | Path,
                 dump_episodes: tuple[int, ...] = (0, -1)) -> dict:
    """Emit the report files; returns the manifest dict.

    With no completed runs this still writes headers so downstream tooling
    sees a stable schema.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}

    stats_rows = []
    per_cp_rows = []
    final_rows = []
    if result is not None:
        buffer = result.shared_buffer
        if buffer is None and result.runs:
            buffer = next(iter(result.runs.values())).buffer
        if buffer is not None:
            stats_rows = intervention_stats(buffer)
        num_eps = result.cfg.num_episodes
        baseline_row = {"method": "baseline"}
        for i, r in enumerate(result.baseline_rewards):
            baseline_row[f"cp{i}"] = r
        per_cp_rows.append(baseline_row)
        for method, run in result.runs.items():
            row = {"method": method}
            for i, r in enumerate(run.per_checkpoint_rewards):
                row[f"cp{i}"] = r
            per_cp_rows.append(row)
        summary = result.summary()
        final_rows = [{"method": k, "mean": v["mean"], "std": v["std"]} for k, v in summary.items()]
    else:
        num_eps = 0

    stats_path = out / "intervention_stats.csv"
    _write_csv(stats_path, stats_rows, ["episode", "steps", "interventions", "intervention_rate"])
    files["intervention_stats"] = stats_path.name
    (out / "intervention_stats.json").write_text(json.dumps(stats_rows, sort_keys=True, indent=1) + "\n")

    cp_fields = ["method"] + [f"cp{i}" for i in range(num_eps)]
    cp_path = out / "per_checkpoint_rewards.csv"
    _write_csv(cp_path, per_cp_rows, cp_fields)
    files["per_checkpoint_rewards"] = cp_path.name

    final_path = out / "final_checkpoint.csv"
    _write_csv(final_path, final_rows, ["method", "mean", "std"])
    files["final_checkpoint"] = final_path.name

    if result is not None:
        loss_dir = out / "losses"
        loss_dir.mkdir(exist_ok=True)
        for method, run in result.runs.items():
            if not run.epoch_reports:
                continue  # reloaded runs carry no epoch reports
            lines = []
            for ep, reports in enumerate(run.epoch_reports):
                for rep in reports:
                    d = rep.to_json_dict()
                    d["episode"] = ep
                    lines.append(json.dumps(d, sort_keys=True))
            (loss_dir / f"{method}.jsonl").write_text("\n".join(lines) + "\n")
        files["losses"] = "losses/"

        dump_dir = out / "reward_dumps"
        dump_dir.mkdir(exist_ok=True)
        dump_fields = ["episode", "t", "m", "a_agent", "a_exec",
                       "reward_est_agent", "reward_est_exec", "env_reward"]
        for method, run in result.runs.items():
            for ep_idx in dump_episodes:
                traj = run.buffer.trajectories[ep_idx]
                rows = reward_estimate_dump(run.final_params, traj)
                name = f"{method}_final_ep{traj.episode_id}.csv"
                _write_csv(dump_dir / name, rows, dump_fields)
        files["reward_dumps"] = "reward_dumps/"

    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "seed": result.cfg.seed if result is not None else None,
        "methods": list(result.runs.keys()) if result is not None else [],
        "hyperparams": result.cfg.hp.to_dict() if result is not None else {},
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def save_experiment(result: ExperimentResult, out_dir: str | Path) -> None:
    """Full run directory: manifest, novice, shared buffer, checkpoints, reports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.novice.save(out / "novice.ckpt.json")
    result.cfg.world.save(out / "world.json")
    if result.shared_buffer is not None:
        save_buffer(result.shared_buffer, out / "buffer")
    for method, run in result.runs.items():
        mdir = out / "checkpoints" / method
        mdir.mkdir(parents=True, exist_ok=True)
        for ep, cp in enumerate(run.checkpoints):
            cp.save(mdir / f"cp{ep}.ckpt.json")
        if not result.cfg.shared_rollouts:
            save_buffer(run.buffer, out / "buffers" / method)
    cfg = result.cfg
    run_manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "seed": cfg.seed,
        "methods": list(result.runs.keys()),
        "num_episodes": cfg.num_episodes,
        "hyperparams": cfg.hp.to_dict(),
        "start_specs": [s.to_dict() for s in cfg.start_specs],
        "shared_rollouts": cfg.shared_rollouts,
        "world": "world.json",
        "novice": "novice.ckpt.json",
    }
    (out / "run_manifest.json").write_text(json.dumps(run_manifest, sort_keys=True, indent=1) + "\n")
    write_report(result, out / "reports")


def load_experiment(run_dir: str | Path) -> ExperimentResult:
    """Rebuild an ExperimentResult from a saved run directory.

    Evaluations are recomputed from the stored checkpoints (evaluation is a
    pure function of parameters); per-epoch loss reports are not persisted
    beyond the report files and come back empty.
    """
    from .nets import load_checkpoint
    from .session import load_buffer

    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    require(manifest.get("format_version") == MANIFEST_FORMAT_VERSION,
            f"unsupported run manifest version {manifest.get('format_version')!r}")
    world = RiverWorld.load(run_dir / manifest["world"])
    novice_params, novice_meta = load_checkpoint(run_dir / manifest["novice"])
    novice = Checkpoint(novice_params, novice_meta)
    cfg = ExperimentConfig(
        world=world,
        methods=manifest["methods"],
        hp=HyperParams.from_dict(manifest["hyperparams"]),
        num_episodes=int(manifest["num_episodes"]),
        start_specs=[StartSpec.from_dict(d) for d in manifest["start_specs"]],
        seed=int(manifest["seed"]),
        shared_rollouts=bool(manifest["shared_rollouts"]),
    )
    shared = load_buffer(run_dir / "buffer") if cfg.shared_rollouts else None
    eval_seeds = cfg.eval_seeds
    baseline = evaluate(novice.params, world, cfg.start_specs, eval_seeds, cfg.eval_policy_mode)

    runs: dict[str, ProtocolResult] = {}
    final_rewards: dict[str, list[float]] = {}
    for method in cfg.methods:
        mdir = run_dir / "checkpoints" / method
        checkpoints = []
        for ep in range(cfg.num_episodes):
            p, meta = load_checkpoint(mdir / f"cp{ep}.ckpt.json")
            checkpoints.append(Checkpoint(p, meta))
        buffer = shared if shared is not None else load_buffer(run_dir / "buffers" / method)
        per_cp = [
            evaluate(cp.params, world, [cfg.start_specs[ep]],
                     [derive_seed(cfg.seed, 500 + ep)], cfg.eval_policy_mode)[0]
            for ep, cp in enumerate(checkpoints)
        ]
        runs[method] = ProtocolResult(method, checkpoints, buffer, per_cp, [])
        final_rewards[method] = evaluate(checkpoints[-1].params, world, cfg.start_specs,
                                         eval_seeds, cfg.eval_policy_mode)
    return ExperimentResult(cfg, novice, shared, baseline, runs, final_rewards)
