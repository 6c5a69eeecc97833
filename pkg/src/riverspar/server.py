"""Live HITL session endpoint.

One operator session over a WebSocket carrying JSON text frames. The step
loop is strictly turn-based: the server sends an action_proposal (with
per-branch probabilities and reward estimates for all 81 joint actions)
and blocks until the operator's decision answers that proposal's sequence
number; every proposal is executed exactly once. Server messages carry
strictly increasing sequence numbers per session. A disconnect pauses the
session; reconnecting with the session id resumes it and re-issues the
pending proposal. Retraining (on demand or every N executed steps when at
least one of those steps was an intervention) runs the configured method
on the cumulative session buffer while the rollout is paused.

Session logs are ordinary trajectory logs, so live sessions replay through
run_episode with a decision-script overseer.
"""

from __future__ import annotations

import asyncio
import json
import secrets
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from aiohttp import WSMsgType, web

from .methods import HyperParams, LossReport, retrain
from .nets import (
    Checkpoint,
    NetParams,
    act,
    encode_step,
    initial_latent,
    obs_to_input,
    reward_all_actions,
)
from .session import (
    ReplayBuffer,
    Trajectory,
    TransitionRecord,
    latent_fingerprint,
    save_trajectory,
)
from .validation import require
from .world import Episode, MultiDiscreteAction, RiverWorld, StartSpec

PROTOCOL_FORMAT_VERSION = 1

CFG_KEY = web.AppKey("cfg", object)
STATE_KEY = web.AppKey("state", object)


@dataclass
class AppState:
    """Mutable per-app session holder (aiohttp app keys are set once)."""

    session: "Session | None" = None
    connected: bool = False

MSG_TYPES = (
    "hello", "state_update", "action_proposal", "decision", "step_result",
    "retrain_request", "retrain_progress", "checkpoint_saved", "error",
)


@dataclass
class ServerConfig:
    world: RiverWorld
    params: NetParams
    method: str = "SPAR-H"
    hp: HyperParams = field(default_factory=HyperParams)
    start: StartSpec = field(default_factory=StartSpec)
    num_episodes: int = 1
    session_seed: int = 0
    policy_mode: str = "sampled"
    session_dir: Path | None = None
    online_retrain_interval: int | None = None
    decision_timeout: float | None = None  # None: wait forever (turn-based)
    timeout_policy: str = "auto_accept"  # or "abort"

    def __post_init__(self):
        require(self.timeout_policy in ("auto_accept", "abort"),
                f"unknown timeout policy: {self.timeout_policy}")
        require(self.policy_mode in ("sampled", "greedy"),
                f"unknown policy mode: {self.policy_mode}")


def _pose_dict(pose) -> dict:
    return {"x": pose.x, "y": pose.y, "z": pose.z, "yaw": pose.yaw}


class Session:
    """State of one live HITL session."""

    def __init__(self, cfg: ServerConfig):
        self.cfg = cfg
        self.id = secrets.token_hex(8)
        self.seq = 0
        self.rng = np.random.Generator(np.random.PCG64(cfg.session_seed))
        self.params = cfg.params
        self.episode_index = 0
        self.completed: list[Trajectory] = []
        self.records: list[TransitionRecord] = []
        self.markers: list[dict] = []
        self.pending: dict | None = None  # proposal awaiting its decision
        self.steps_since_retrain = 0
        self.interventions_since_retrain = 0
        self.retrain_count = 0
        self.finished = False
        self._begin_episode()

    def _begin_episode(self):
        self.episode = Episode(self.cfg.world, self.cfg.start,
                               self.cfg.session_seed + self.episode_index)
        self.z = initial_latent()
        self.gains: list[float] = []
        self.records = []
        self.markers = []

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def envelope(self, msg_type: str, payload: dict) -> dict:
        return {
            "format_version": PROTOCOL_FORMAT_VERSION,
            "type": msg_type,
            "session_id": self.id,
            "seq": self.next_seq(),
            "payload": payload,
        }

    # -- protocol payloads -------------------------------------------------

    def hello_payload(self) -> dict:
        cfg = self.cfg
        return {
            "world": {
                "spline": [[float(x), float(y)] for x, y in cfg.world.spline],
                "width": cfg.world.width,
                "corridor_half_width": cfg.world.corridor_half_width,
                "num_segments": cfg.world.num_segments,
                "segment_length": cfg.world.segment_length,
                "total_length": cfg.world.total_length,
            },
            "method": cfg.method,
            "hyperparams": cfg.hp.to_dict(),
            "num_episodes": cfg.num_episodes,
            "online_retrain_interval": cfg.online_retrain_interval,
            "policy_mode": cfg.policy_mode,
        }

    def state_payload(self) -> dict:
        ep = self.episode
        return {
            "episode_id": self.episode_index,
            "t": ep.t,
            "pose": _pose_dict(ep.pose),
            "mask": ep.observation.mask_bits(),
            "coverage_count": ep.coverage.count,
            "visited": "".join("1" if v else "0" for v in ep.coverage.visited),
            "terminated": ep.terminated,
            "trajectory": list(self.markers),
            "finished": self.finished,
        }

    def make_proposal(self) -> dict:
        obs = self.episode.observation
        self.z = encode_step(self.params, self.z, obs_to_input(obs))
        dist, action, _ = act(
            self.params, self.z,
            rng=self.rng, greedy=(self.cfg.policy_mode == "greedy"),
        )
        msg = self.envelope("action_proposal", {
            "t": self.episode.t,
            "proposal": list(action.indices),
            "branch_probs": dist.probs.tolist(),
            "reward_estimates": reward_all_actions(self.params, self.z).tolist(),
            "pose": _pose_dict(self.episode.pose),
            "coverage_count": self.episode.coverage.count,
        })
        self.pending = {
            "seq": msg["seq"],
            "action": action,
            "obs": obs,
            "z": self.z.copy(),
        }
        return msg

    def execute_decision(self, intervene: bool, override: MultiDiscreteAction | None) -> dict:
        """Apply the overseer's decision to the pending proposal."""
        require(self.pending is not None, "no proposal is pending")
        pend = self.pending
        self.pending = None
        a_agent: MultiDiscreteAction = pend["action"]
        m = 1 if intervene else 0
        a_human = override if intervene else None
        a_exec = a_human if m else a_agent
        obs = pend["obs"]
        outcome = self.episode.step(a_exec)
        excluded = (outcome.terminated and outcome.termination_reason == "corridor_violation"
                    and m == 0)
        rec = TransitionRecord(
            episode_id=self.episode_index,
            t=len(self.records),
            mask_bits=obs.mask_bits(),
            prev_action=obs.prev_action,
            latent_fingerprint=latent_fingerprint(pend["z"]),
            a_agent=a_agent,
            a_human=a_human,
            a_exec=a_exec,
            m=m,
            reward=outcome.reward,
            terminated=outcome.terminated,
            termination_reason=outcome.termination_reason,
            excluded_from_training=excluded,
        )
        self.records.append(rec)
        self.gains.append(outcome.reward)
        self.markers.append({"t": rec.t, "m": m,
                             "x": self.episode.pose.x, "y": self.episode.pose.y})
        self.steps_since_retrain += 1
        self.interventions_since_retrain += m
        return self.envelope("step_result", {
            "t": rec.t,
            "answers_seq": pend["seq"],
            "executed": list(a_exec.indices),
            "m": m,
            "reward": outcome.reward,
            "terminated": outcome.terminated,
            "termination_reason": outcome.termination_reason,
            "pose": _pose_dict(self.episode.pose),
            "mask": self.episode.observation.mask_bits(),
            "coverage_count": self.episode.coverage.count,
            "segment_entered": outcome.segment_entered,
        })

    def session_buffer(self) -> ReplayBuffer:
        buf = ReplayBuffer(list(self.completed))
        if self.records:
            buf.append(Trajectory(self.episode_index, self.cfg.start,
                                  self.cfg.session_seed + self.episode_index,
                                  list(self.records)))
        return buf

    def auto_retrain_due(self) -> bool:
        n = self.cfg.online_retrain_interval
        if n is None or self.steps_since_retrain < n:
            return False
        # windows without interventions never trigger a retrain
        due = self.interventions_since_retrain > 0
        self.steps_since_retrain = 0
        self.interventions_since_retrain = 0
        return due

    def run_retrain(self) -> tuple[list[LossReport], str | None]:
        buf = self.session_buffer()
        self.params, reports = retrain(self.cfg.method, buf, self.params, self.cfg.hp)
        self.retrain_count += 1
        path = None
        if self.cfg.session_dir is not None:
            self.cfg.session_dir.mkdir(parents=True, exist_ok=True)
            path = self.cfg.session_dir / f"retrain_{self.retrain_count:03d}.ckpt.json"
            Checkpoint(self.params, {
                "method": self.cfg.method,
                "episode_index": self.episode_index,
                "creation_seed": self.cfg.session_seed,
                "hyperparams": self.cfg.hp.to_dict(),
                "retrain_index": self.retrain_count,
            }).save(path)
        return reports, str(path) if path else None

    def finish_episode(self) -> None:
        traj = Trajectory(self.episode_index, self.cfg.start,
                          self.cfg.session_seed + self.episode_index, list(self.records))
        self.completed.append(traj)
        if self.cfg.session_dir is not None:
            self.cfg.session_dir.mkdir(parents=True, exist_ok=True)
            save_trajectory(traj, self.cfg.session_dir / f"ep_{self.episode_index:03d}.jsonl")
        self.episode_index += 1
        if self.episode_index >= self.cfg.num_episodes:
            self.finished = True
        else:
            self._begin_episode()


def parse_action(indices) -> MultiDiscreteAction:
    require(isinstance(indices, (list, tuple)) and len(indices) == 4,
            "override must be a list of 4 branch indices")
    return MultiDiscreteAction(*(int(i) for i in indices))


def build_app(cfg: ServerConfig) -> web.Application:
    app = web.Application()
    app[CFG_KEY] = cfg
    app[STATE_KEY] = AppState()
    app.router.add_get("/ws", _ws_handler)
    return app


async def _send(ws, msg: dict) -> None:
    await ws.send_str(json.dumps(msg, sort_keys=True))


async def _ws_handler(request: web.Request) -> web.WebSocketResponse:
    ws = web.WebSocketResponse(heartbeat=30.0)
    await ws.prepare(request)
    app = request.app
    cfg: ServerConfig = app[CFG_KEY]
    state: AppState = app[STATE_KEY]

    if state.connected:
        await ws.send_str(json.dumps({
            "format_version": PROTOCOL_FORMAT_VERSION, "type": "error",
            "session_id": None, "seq": 0,
            "payload": {"message": "session already has an operator"},
        }))
        await ws.close()
        return ws

    state.connected = True
    try:
        await _session_loop(state, ws, cfg)
    finally:
        state.connected = False
    return ws


async def _recv_json(ws, timeout: float | None):
    msg = await ws.receive(timeout=timeout)
    if msg.type in (WSMsgType.CLOSE, WSMsgType.CLOSING, WSMsgType.CLOSED, WSMsgType.ERROR):
        return None
    if msg.type != WSMsgType.TEXT:
        raise ValueError(f"unexpected frame type {msg.type}")
    return json.loads(msg.data)


async def _session_loop(state: AppState, ws, cfg: ServerConfig) -> None:
    # handshake: the client speaks first so reconnects can name their session
    first = await _recv_json(ws, None)
    if first is None:
        return
    if first.get("type") != "hello":
        await _send(ws, {"format_version": PROTOCOL_FORMAT_VERSION, "type": "error",
                         "session_id": None, "seq": 0,
                         "payload": {"message": "expected hello"}})
        await ws.close()
        return

    session: Session | None = state.session
    requested = (first.get("payload") or {}).get("session_id")
    if session is None or (requested and requested != session.id) or (requested is None and session is not None and session.finished):
        session = Session(cfg)
        state.session = session
    await _send(ws, session.envelope("hello", session.hello_payload()))
    await _send(ws, session.envelope("state_update", session.state_payload()))

    if session.finished:
        await ws.close()
        return

    # re-issue or issue the proposal awaiting a decision
    if session.pending is not None:
        session.pending = None  # the old seq died with the old connection
    await _send(ws, session.make_proposal())

    while not session.finished:
        try:
            incoming = await _recv_json(ws, cfg.decision_timeout)
        except (asyncio.TimeoutError, TimeoutError):
            if cfg.timeout_policy == "abort":
                await _send(ws, session.envelope("error", {"message": "decision timeout; aborting"}))
                await ws.close()
                return
            incoming = {"type": "decision",
                        "payload": {"answers_seq": session.pending["seq"],
                                    "intervene": False}}
        if incoming is None:  # disconnect: pause, keep session resumable
            return

        msg_type = incoming.get("type")
        payload = incoming.get("payload") or {}

        if msg_type == "retrain_request":
            await _run_and_report_retrain(ws, session)
            continue

        if msg_type != "decision":
            await _send(ws, session.envelope("error", {"message": f"unexpected message type {msg_type!r}"}))
            continue

        ok, err = _validate_decision(session, payload)
        if not ok:
            await _send(ws, session.envelope("error", {"message": err}))
            await _send(ws, session.make_proposal())  # re-send, new sequence
            continue

        intervene = bool(payload["intervene"])
        override = parse_action(payload["override"]) if intervene else None
        result = session.execute_decision(intervene, override)
        await _send(ws, result)

        if session.episode.terminated:
            session.finish_episode()
            await _send(ws, session.envelope("state_update", session.state_payload()))
            if session.finished:
                break
            await _send(ws, session.make_proposal())
            continue

        if session.auto_retrain_due():
            await _run_and_report_retrain(ws, session)

        await _send(ws, session.make_proposal())

    await ws.close()


def _validate_decision(session: Session, payload: dict) -> tuple[bool, str]:
    if session.pending is None:
        return False, "no proposal is pending"
    answers = payload.get("answers_seq")
    if answers != session.pending["seq"]:
        return False, f"decision answers seq {answers}, pending proposal is {session.pending['seq']}"
    if "intervene" not in payload:
        return False, "decision lacks the intervene flag"
    if payload["intervene"]:
        try:
            parse_action(payload.get("override"))
        except Exception as e:
            return False, f"bad override: {e}"
    return True, ""


async def _run_and_report_retrain(ws, session: Session) -> None:
    if not session.session_buffer().total_steps():
        await _send(ws, session.envelope("error", {"message": "nothing to retrain on"}))
        return
    reports, path = session.run_retrain()
    for rep in reports:
        await _send(ws, session.envelope("retrain_progress", {
            "epoch": rep.epoch,
            "of": len(reports),
            "report": rep.to_json_dict(),
        }))
    await _send(ws, session.envelope("checkpoint_saved", {
        "path": path,
        "retrain_index": session.retrain_count,
    }))


def serve(cfg: ServerConfig, host: str = "127.0.0.1", port: int = 8642) -> None:
    """Run the session endpoint until interrupted (CLI entry)."""
    web.run_app(build_app(cfg), host=host, port=port, print=lambda *a: None)
