"""Human-in-the-loop episodes: intervention protocol, logging, preferences.

Each step records the agent's proposal, the overseer's decision, and the
executed action under the override rule (a_exec = a_human when m=1, else
a_agent). Terminal corridor violations that nobody intervened on are
flagged `excluded_from_training` and never reach any loss. Trajectory logs
are JSON Lines, one transition per line, with a schema-versioned header.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nets import NetParams, act, encode_step, initial_latent, obs_to_input
from .validation import SchemaError, UsageError, require
from .world import (
    ALL_ACTIONS,
    IDENTITY_ACTION,
    TERM_CORRIDOR,
    TERM_NONE,
    CoverageState,
    Episode,
    MultiDiscreteAction,
    Observation,
    Pose,
    RiverWorld,
    StartSpec,
    simulate_step,
)

TRAJECTORY_SCHEMA_VERSION = 1

REASON_NONE = "none"
REASON_SAFETY = "safety"
REASON_INEFFICIENCY = "inefficiency"


def latent_fingerprint(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class OverseerDecision:
    intervene: bool
    override_action: MultiDiscreteAction | None = None
    reason: str = REASON_NONE

    def __post_init__(self):
        require(not self.intervene or self.override_action is not None,
                "an intervention must carry an override action")


@dataclass
class TransitionRecord:
    """One HITL step; the unit of all learning."""

    episode_id: int
    t: int
    mask_bits: str
    prev_action: MultiDiscreteAction
    latent_fingerprint: str
    a_agent: MultiDiscreteAction
    a_human: MultiDiscreteAction | None
    a_exec: MultiDiscreteAction
    m: int
    reward: float
    terminated: bool
    termination_reason: str
    excluded_from_training: bool = False

    def __post_init__(self):
        if self.m == 1:
            require(self.a_human is not None and self.a_exec == self.a_human,
                    "m=1 requires a_exec = a_human")
        else:
            require(self.a_exec == self.a_agent, "m=0 requires a_exec = a_agent")
        if self.excluded_from_training:
            require(self.terminated and self.termination_reason == TERM_CORRIDOR and self.m == 0,
                    "only unhandled terminal corridor violations may be excluded")

    @property
    def observation(self) -> Observation:
        return Observation.from_mask_bits(self.mask_bits, self.prev_action)

    def to_json_dict(self) -> dict:
        return {
            "type": "transition",
            "episode_id": self.episode_id,
            "t": self.t,
            "mask": self.mask_bits,
            "prev_action": list(self.prev_action.indices),
            "latent_fingerprint": self.latent_fingerprint,
            "a_agent": list(self.a_agent.indices),
            "a_human": list(self.a_human.indices) if self.a_human is not None else None,
            "a_exec": list(self.a_exec.indices),
            "m": self.m,
            "reward": self.reward,
            "terminated": self.terminated,
            "termination_reason": self.termination_reason,
            "excluded_from_training": self.excluded_from_training,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TransitionRecord":
        human = d.get("a_human")
        return cls(
            episode_id=int(d["episode_id"]),
            t=int(d["t"]),
            mask_bits=d["mask"],
            prev_action=MultiDiscreteAction(*d["prev_action"]),
            latent_fingerprint=d["latent_fingerprint"],
            a_agent=MultiDiscreteAction(*d["a_agent"]),
            a_human=MultiDiscreteAction(*human) if human is not None else None,
            a_exec=MultiDiscreteAction(*d["a_exec"]),
            m=int(d["m"]),
            reward=float(d["reward"]),
            terminated=bool(d["terminated"]),
            termination_reason=d["termination_reason"],
            excluded_from_training=bool(d["excluded_from_training"]),
        )


@dataclass
class Trajectory:
    episode_id: int
    start: StartSpec
    seed: int
    records: list[TransitionRecord] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def interventions(self) -> int:
        return sum(r.m for r in self.records)

    @property
    def intervention_rate(self) -> float:
        return self.interventions / self.steps if self.steps else 0.0

    @property
    def episodic_reward(self) -> float:
        return float(sum(r.reward for r in self.records))

    def totals(self) -> dict:
        return {
            "steps": self.steps,
            "interventions": self.interventions,
            "episodic_reward": self.episodic_reward,
        }


class ReplayBuffer:
    """Append-only collection of trajectories; retraining always sees all."""

    def __init__(self, trajectories: list[Trajectory] | None = None):
        self.trajectories: list[Trajectory] = list(trajectories or [])

    def append(self, traj: Trajectory) -> None:
        self.trajectories.append(traj)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def total_steps(self) -> int:
        return sum(t.steps for t in self.trajectories)

    def total_interventions(self) -> int:
        return sum(t.interventions for t in self.trajectories)


@dataclass(frozen=True)
class PreferencePair:
    """Statewise preference (a_human beats a_agent) at an intervened step."""

    step_ref: tuple[int, int]  # (episode id, time index)
    a_h: MultiDiscreteAction
    a_a: MultiDiscreteAction

    def __post_init__(self):
        require(self.a_h != self.a_a, "preference pair requires distinct actions")


def extract_preferences(buffer: ReplayBuffer) -> list[PreferencePair]:
    """All (m=1, a_h != a_a) records, excluded ones dropped, in (episode, t) order."""
    pairs = []
    for traj in buffer:
        for rec in traj.records:
            if rec.m == 1 and rec.a_human != rec.a_agent and not rec.excluded_from_training:
                pairs.append(PreferencePair((rec.episode_id, rec.t), rec.a_human, rec.a_agent))
    return pairs


# -- overseers ----------------------------------------------------------------


def oracle_action(world: RiverWorld, pose: Pose, cov: CoverageState) -> MultiDiscreteAction | None:
    """Greedy safe action: max one-step coverage gain among corridor-safe
    actions; ties broken by smallest post-step arc distance to the nearest
    unvisited segment (downstream progress), then smallest post-step
    tangent deviation, then lowest joint action index. None when no safe
    action exists.

    The progress key matters only at zero-gain states, where every safe
    action would otherwise tie and index order alone would always pick the
    most-negative motion (a retreat), turning the overseer into a stall.
    """
    unvisited = np.flatnonzero(~cov.visited)
    if unvisited.size:
        centers = (unvisited + 0.5) * world.segment_length
        centers = np.minimum(centers, world.total_length)
    else:
        centers = None

    best = None
    best_key = None
    for action in ALL_ACTIONS:
        probe = simulate_step(world, pose, cov, action)
        if probe.violated:
            continue
        if centers is not None:
            s_after, _, _ = world.locate(probe.pose.x, probe.pose.y)
            frontier = float(np.min(np.abs(centers - s_after)))
        else:
            frontier = 0.0
        key = (-probe.gain, frontier, probe.tangent_deviation, action.joint_index)
        if best_key is None or key < best_key:
            best_key = key
            best = action
    return best


class NeverIntervene:
    def decide(self, world, pose, cov, proposed, recent_gains) -> OverseerDecision:
        return OverseerDecision(False)


class ScriptedOverseer:
    """Conservative scripted overseer.

    Intervenes when the proposed action would exit the corridor (safety) or
    when the last `window` executed steps all produced zero coverage gain
    (inefficiency); the corrective action is the greedy safe oracle action.
    """

    def __init__(self, window: int = 6):
        require(window >= 1, "window must be >= 1")
        self.window = window

    def decide(
        self,
        world: RiverWorld,
        pose: Pose,
        cov: CoverageState,
        proposed: MultiDiscreteAction,
        recent_gains: list[float],
    ) -> OverseerDecision:
        probe = simulate_step(world, pose, cov, proposed)
        if probe.violated:
            safe = oracle_action(world, pose, cov)
            if safe is not None:
                return OverseerDecision(True, safe, REASON_SAFETY)
            return OverseerDecision(False)  # trapped: nothing safer to offer
        if len(recent_gains) >= self.window and all(g == 0.0 for g in recent_gains[-self.window:]):
            safe = oracle_action(world, pose, cov)
            if safe is not None:
                return OverseerDecision(True, safe, REASON_INEFFICIENCY)
        return OverseerDecision(False)


class DecisionScriptOverseer:
    """Replays a fixed decision sequence (offline replay of live sessions)."""

    def __init__(self, decisions: list[OverseerDecision]):
        self.decisions = list(decisions)
        self._next = 0

    def decide(self, world, pose, cov, proposed, recent_gains) -> OverseerDecision:
        require(self._next < len(self.decisions), "decision script exhausted")
        d = self.decisions[self._next]
        self._next += 1
        return d


def run_episode(
    world: RiverWorld,
    params: NetParams,
    overseer,
    start: StartSpec,
    seed: int,
    policy_mode: str = "sampled",
    episode_id: int = 0,
) -> Trajectory:
    """Roll one HITL episode: encode, propose, ask the overseer, execute, log."""
    require(policy_mode in ("sampled", "greedy"), f"unknown policy mode: {policy_mode}")
    rng = np.random.Generator(np.random.PCG64(seed))
    ep = Episode(world, start, seed)
    z = initial_latent()
    traj = Trajectory(episode_id=episode_id, start=start, seed=seed)
    gains: list[float] = []

    while not ep.terminated:
        obs = ep.observation
        z = encode_step(params, z, obs_to_input(obs))
        _, a_agent, _ = act(params, z, rng=rng, greedy=(policy_mode == "greedy"))
        decision = (
            overseer.decide(world, ep.pose, ep.coverage, a_agent, gains)
            if overseer is not None
            else OverseerDecision(False)
        )
        m = 1 if decision.intervene else 0
        a_human = decision.override_action if decision.intervene else None
        a_exec = a_human if m else a_agent
        outcome = ep.step(a_exec)
        excluded = outcome.terminated and outcome.termination_reason == TERM_CORRIDOR and m == 0
        traj.records.append(
            TransitionRecord(
                episode_id=episode_id,
                t=len(traj.records),
                mask_bits=obs.mask_bits(),
                prev_action=obs.prev_action,
                latent_fingerprint=latent_fingerprint(z),
                a_agent=a_agent,
                a_human=a_human,
                a_exec=a_exec,
                m=m,
                reward=outcome.reward,
                terminated=outcome.terminated,
                termination_reason=outcome.termination_reason,
                excluded_from_training=excluded,
            )
        )
        gains.append(outcome.reward)
    return traj


# -- persistence ---------------------------------------------------------------


def trajectory_header(traj: Trajectory) -> dict:
    return {
        "type": "trajectory_header",
        "schema_version": TRAJECTORY_SCHEMA_VERSION,
        "episode_id": traj.episode_id,
        "seed": traj.seed,
        "start": traj.start.to_dict(),
        "totals": traj.totals(),
    }


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    lines = [json.dumps(trajectory_header(traj), sort_keys=True)]
    lines += [json.dumps(r.to_json_dict(), sort_keys=True) for r in traj.records]
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path: str | Path) -> Trajectory:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    require(len(lines) >= 1, f"empty trajectory file: {path}", SchemaError)
    header = json.loads(lines[0])
    if header.get("type") != "trajectory_header":
        raise SchemaError("first line must be a trajectory_header")
    if header.get("schema_version") != TRAJECTORY_SCHEMA_VERSION:
        raise SchemaError(f"unsupported trajectory schema_version: {header.get('schema_version')!r}")
    traj = Trajectory(
        episode_id=int(header["episode_id"]),
        start=StartSpec.from_dict(header["start"]),
        seed=int(header["seed"]),
    )
    for ln in lines[1:]:
        d = json.loads(ln)
        if d.get("type") != "transition":
            raise SchemaError(f"unexpected line type {d.get('type')!r} in trajectory file")
        traj.records.append(TransitionRecord.from_json_dict(d))
    stored = header.get("totals", {})
    if stored != traj.totals():
        raise SchemaError(f"stored totals {stored} disagree with records {traj.totals()}")
    return traj


BUFFER_MANIFEST = "buffer_manifest.json"


def save_buffer(buffer: ReplayBuffer, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for traj in buffer:
        name = f"ep_{traj.episode_id:03d}.jsonl"
        save_trajectory(traj, directory / name)
        names.append(name)
    manifest = {"format_version": TRAJECTORY_SCHEMA_VERSION, "episodes": names}
    (directory / BUFFER_MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_buffer(directory: str | Path) -> ReplayBuffer:
    directory = Path(directory)
    manifest_path = directory / BUFFER_MANIFEST
    require(manifest_path.exists(), f"no buffer manifest under {directory}", SchemaError)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != TRAJECTORY_SCHEMA_VERSION:
        raise SchemaError(f"unsupported buffer format_version: {manifest.get('format_version')!r}")
    return ReplayBuffer([load_trajectory(directory / name) for name in manifest["episodes"]])


def replay_decisions(traj: Trajectory) -> list[OverseerDecision]:
    """Decision script that forces each logged executed action.

    Replaying through run_episode with this script reproduces the logged
    rewards and terminations regardless of the policy parameters, which is
    what makes live sessions auditable even when retraining changed the
    policy mid-episode.
    """
    return [OverseerDecision(True, r.a_exec, REASON_NONE) for r in traj.records]
