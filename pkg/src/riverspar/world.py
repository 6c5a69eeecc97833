"""Desk-scale river-following POMDP.

The river is a polyline centerline discretized into fixed arc-length
segments; visiting an unvisited segment pays unit reward (the marginal gain
of a cardinality coverage utility, so revisits pay zero). The agent flies a
multi-discrete body-frame action inside a 3-D corridor extruded from the
centerline and observes a 16x16 first-person binary water mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .validation import ConfigurationError, SchemaError, UsageError, require

WORLD_FORMAT_VERSION = 1

MASK_SHAPE = (16, 16)
CAMERA_PITCH_DEG = -15.0
CAMERA_HFOV_DEG = 90.0

VERTICAL_DELTAS = (-1.0, 0.0, 1.0)
YAW_DELTAS = (-15.0, 0.0, 15.0)
FORWARD_DELTAS = (-1.0, 0.0, 1.0)
LATERAL_DELTAS = (-0.5, 0.0, 0.5)
NUM_BRANCHES = 4
BRANCH_SIZE = 3
NUM_JOINT_ACTIONS = BRANCH_SIZE ** NUM_BRANCHES  # 81

TERM_NONE = "none"
TERM_CORRIDOR = "corridor_violation"
TERM_TRAVERSAL = "full_traversal"
TERM_STEP_LIMIT = "step_limit"
TERMINATION_REASONS = (TERM_NONE, TERM_CORRIDOR, TERM_TRAVERSAL, TERM_STEP_LIMIT)


def normalize_yaw(yaw_deg: float) -> float:
    """Wrap an angle in degrees to [-180, 180)."""
    return float((float(yaw_deg) + 180.0) % 360.0 - 180.0)


@dataclass(frozen=True)
class MultiDiscreteAction:
    """One index per branch: vertical, yaw, forward, lateral (each in 0..2)."""

    vertical: int = 1
    yaw: int = 1
    forward: int = 1
    lateral: int = 1

    def __post_init__(self):
        for name in ("vertical", "yaw", "forward", "lateral"):
            idx = getattr(self, name)
            if not isinstance(idx, (int, np.integer)) or not 0 <= int(idx) <= 2:
                raise UsageError(f"action branch {name} must be an index in 0..2, got {idx!r}")
            object.__setattr__(self, name, int(idx))

    @property
    def indices(self) -> tuple[int, int, int, int]:
        return (self.vertical, self.yaw, self.forward, self.lateral)

    @property
    def joint_index(self) -> int:
        v, y, f, l = self.indices
        return ((v * 3 + y) * 3 + f) * 3 + l

    @classmethod
    def from_joint_index(cls, idx: int) -> "MultiDiscreteAction":
        require(0 <= int(idx) < NUM_JOINT_ACTIONS, f"joint index out of range: {idx}")
        idx = int(idx)
        l = idx % 3
        f = (idx // 3) % 3
        y = (idx // 9) % 3
        v = idx // 27
        return cls(v, y, f, l)

    @property
    def deltas(self) -> tuple[float, float, float, float]:
        """(vertical m, yaw deg, forward m, lateral m) displacement."""
        return (
            VERTICAL_DELTAS[self.vertical],
            YAW_DELTAS[self.yaw],
            FORWARD_DELTAS[self.forward],
            LATERAL_DELTAS[self.lateral],
        )

    def one_hot(self) -> np.ndarray:
        vec = np.zeros(NUM_BRANCHES * BRANCH_SIZE, dtype=np.float64)
        for b, idx in enumerate(self.indices):
            vec[b * BRANCH_SIZE + idx] = 1.0
        return vec


IDENTITY_ACTION = MultiDiscreteAction(1, 1, 1, 1)
ALL_ACTIONS = tuple(MultiDiscreteAction.from_joint_index(i) for i in range(NUM_JOINT_ACTIONS))


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float
    yaw: float  # degrees in [-180, 180)

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))


@dataclass
class CoverageState:
    """Visited flags over the segment ground set; monotone within an episode."""

    visited: np.ndarray

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.visited))

    def copy(self) -> "CoverageState":
        return CoverageState(self.visited.copy())


@dataclass(frozen=True)
class Observation:
    mask: np.ndarray  # (16, 16) uint8 in {0, 1}
    prev_action: MultiDiscreteAction

    def mask_bits(self) -> str:
        """Row-major 256-character '0'/'1' string (log encoding)."""
        return "".join("1" if b else "0" for b in self.mask.reshape(-1))

    @classmethod
    def from_mask_bits(cls, bits: str, prev_action: MultiDiscreteAction) -> "Observation":
        require(len(bits) == 256 and set(bits) <= {"0", "1"},
                "mask bitstring must be 256 chars of 0/1", SchemaError)
        mask = np.frombuffer(bits.encode("ascii"), dtype=np.uint8) - ord("0")
        return cls(mask.reshape(MASK_SHAPE).astype(np.uint8), prev_action)


@dataclass(frozen=True)
class StepOutcome:
    observation: Observation
    reward: float
    terminated: bool
    termination_reason: str
    segment_entered: int | None


@dataclass
class RiverWorld:
    """Corridor geometry over a polyline centerline.

    `spline` holds ordered 2-D control points in meters. Derived fields
    (segment table, cumulative arc lengths) are computed on construction.
    """

    spline: np.ndarray
    width: float = 10.0
    corridor_half_width: float = 7.0
    z_min: float = 2.0
    z_max: float = 10.0
    segment_length: float = 1.0
    yaw_limit_deg: float = 90.0
    step_limit: int = 600
    seed: int = 0

    # derived, filled by __post_init__
    total_length: float = field(init=False, repr=False)
    num_segments: int = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.spline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ConfigurationError("spline must be an (N>=2, 2) array of control points")
        seg_vec = np.diff(pts, axis=0)
        seg_len = np.linalg.norm(seg_vec, axis=1)
        if np.any(seg_len <= 0):
            raise ConfigurationError("spline has repeated consecutive control points")
        if self.segment_length <= 0:
            raise ConfigurationError("segment_length must be > 0")
        if self.width <= 0:
            raise ConfigurationError("width must be > 0")
        if self.corridor_half_width < self.width / 2:
            raise ConfigurationError("corridor_half_width must be >= width/2")
        if not self.z_min < self.z_max:
            raise ConfigurationError("z_min must be < z_max")
        if self.yaw_limit_deg <= 0 or self.step_limit < 1:
            raise ConfigurationError("yaw_limit_deg must be > 0 and step_limit >= 1")

        self.spline = pts
        self._seg_start = pts[:-1]
        self._seg_vec = seg_vec
        self._seg_len = seg_len
        self._seg_unit = seg_vec / seg_len[:, None]
        self._cum_len = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.total_length = float(self._cum_len[-1])
        self.num_segments = int(math.ceil(self.total_length / self.segment_length - 1e-12))

    # -- arc-length parameterization ------------------------------------

    def point_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.total_length))
        i = min(int(np.searchsorted(self._cum_len, s, side="right")) - 1, len(self._seg_len) - 1)
        i = max(i, 0)
        return self._seg_start[i] + (s - self._cum_len[i]) * self._seg_unit[i]

    def tangent_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.total_length))
        i = min(int(np.searchsorted(self._cum_len, s, side="right")) - 1, len(self._seg_len) - 1)
        i = max(i, 0)
        return self._seg_unit[i]

    def tangent_angle_deg(self, s: float) -> float:
        t = self.tangent_at(s)
        return normalize_yaw(math.degrees(math.atan2(t[1], t[0])))

    def segment_of(self, s: float) -> int:
        """Arc-length bin index; the final bin is closed at total_length."""
        return min(int(s / self.segment_length), self.num_segments - 1)

    def segment_center(self, index: int) -> np.ndarray:
        require(0 <= index < self.num_segments, f"segment index out of range: {index}")
        lo = index * self.segment_length
        hi = min((index + 1) * self.segment_length, self.total_length)
        return self.point_at((lo + hi) / 2.0)

    def segment_tangent(self, index: int) -> np.ndarray:
        require(0 <= index < self.num_segments, f"segment index out of range: {index}")
        lo = index * self.segment_length
        hi = min((index + 1) * self.segment_length, self.total_length)
        return self.tangent_at((lo + hi) / 2.0)

    def locate_many(self, points_xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project (M, 2) points onto the centerline.

        Returns (arc_length s, lateral distance, beyond-ends flag). Points
        whose perpendicular foot falls before the first or after the last
        control point are flagged `beyond`.
        """
        p = np.atleast_2d(np.asarray(points_xy, dtype=np.float64))
        d = p[:, None, :] - self._seg_start[None, :, :]  # (M, S, 2)
        t_raw = np.einsum("msd,sd->ms", d, self._seg_vec) / (self._seg_len**2)[None, :]
        t = np.clip(t_raw, 0.0, 1.0)
        proj = self._seg_start[None] + t[..., None] * self._seg_vec[None]
        dist2 = np.sum((p[:, None, :] - proj) ** 2, axis=2)
        nearest = np.argmin(dist2, axis=1)
        rows = np.arange(p.shape[0])
        s = self._cum_len[nearest] + t[rows, nearest] * self._seg_len[nearest]
        lateral = np.sqrt(dist2[rows, nearest])
        beyond = ((nearest == 0) & (t_raw[:, 0] < 0.0)) | (
            (nearest == len(self._seg_len) - 1) & (t_raw[:, -1] > 1.0)
        )
        return s, lateral, beyond

    def locate(self, x: float, y: float) -> tuple[float, float, bool]:
        s, lat, beyond = self.locate_many(np.array([[x, y]]))
        return float(s[0]), float(lat[0]), bool(beyond[0])

    def inside_corridor(self, x: float, y: float, z: float) -> bool:
        s, lat, beyond = self.locate(x, y)
        return (not beyond) and lat <= self.corridor_half_width and self.z_min <= z <= self.z_max

    def water_at(self, points_xy: np.ndarray) -> np.ndarray:
        """True where a ground point lies within width/2 of the centerline."""
        _, lat, _ = self.locate_many(points_xy)
        return lat <= self.width / 2.0

    # -- serialization ----------------------------------------------------

    def to_config(self) -> dict:
        return {
            "format_version": WORLD_FORMAT_VERSION,
            "spline": [[float(x), float(y)] for x, y in self.spline],
            "width": self.width,
            "corridor_half_width": self.corridor_half_width,
            "z_min": self.z_min,
            "z_max": self.z_max,
            "segment_length": self.segment_length,
            "yaw_limit_deg": self.yaw_limit_deg,
            "step_limit": self.step_limit,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "RiverWorld":
        version = cfg.get("format_version")
        if version != WORLD_FORMAT_VERSION:
            raise SchemaError(f"unsupported world format_version: {version!r}")
        return cls(
            spline=np.asarray(cfg["spline"], dtype=np.float64),
            width=float(cfg["width"]),
            corridor_half_width=float(cfg["corridor_half_width"]),
            z_min=float(cfg["z_min"]),
            z_max=float(cfg["z_max"]),
            segment_length=float(cfg["segment_length"]),
            yaw_limit_deg=float(cfg["yaw_limit_deg"]),
            step_limit=int(cfg.get("step_limit", 600)),
            seed=int(cfg.get("seed", 0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_config(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RiverWorld":
        try:
            cfg = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise SchemaError(f"world file is not valid JSON: {e}") from e
        return cls.from_config(cfg)


def straight_river(length: float = 200.0, width: float = 10.0, **kwargs) -> RiverWorld:
    spline = np.array([[0.0, 0.0], [float(length), 0.0]])
    return RiverWorld(spline=spline, width=width, **kwargs)


def sinusoid_river(
    length: float = 200.0,
    width: float = 10.0,
    amplitude: float = 8.0,
    period: float = 100.0,
    sample_spacing: float = 0.5,
    **kwargs,
) -> RiverWorld:
    """Sinusoidal centerline trimmed to the requested arc length."""
    xs = [0.0]
    ys = [0.0]
    total = 0.0
    x = 0.0
    while total < length:
        x_next = x + sample_spacing
        y_next = amplitude * math.sin(2.0 * math.pi * x_next / period)
        d = math.hypot(x_next - x, y_next - ys[-1])
        if total + d >= length:
            f = (length - total) / d
            xs.append(x + f * (x_next - x))
            ys.append(ys[-1] + f * (y_next - ys[-1]))
            total = length
            break
        xs.append(x_next)
        ys.append(y_next)
        total += d
        x = x_next
    return RiverWorld(spline=np.column_stack([xs, ys]), width=width, **kwargs)


def default_river() -> RiverWorld:
    """Straight 200 m default world.

    A curved centerline makes arc-length projection advance by !=1 m per
    1 m body step at nonzero lateral offset, which lets a greedy one-step
    policy skip segments irrecoverably; the default stays straight so the
    safe oracle can always fully traverse.
    """
    return straight_river()


@dataclass(frozen=True)
class StartSpec:
    segment_index: int = 0
    lateral_offset: float = 0.0
    z: float = 6.0
    yaw_offset: float = 0.0

    def to_dict(self) -> dict:
        return {
            "segment_index": self.segment_index,
            "lateral_offset": self.lateral_offset,
            "z": self.z,
            "yaw_offset": self.yaw_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StartSpec":
        return cls(
            segment_index=int(d["segment_index"]),
            lateral_offset=float(d["lateral_offset"]),
            z=float(d["z"]),
            yaw_offset=float(d["yaw_offset"]),
        )


def sample_start_specs(
    world: RiverWorld,
    n: int,
    seed: int,
    max_segment_frac: float = 0.3,
    max_lateral: float = 2.0,
    max_yaw_offset: float = 30.0,
) -> list[StartSpec]:
    """Seeded start sampler (the initial-state distribution)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    hi = max(1, int(world.num_segments * max_segment_frac))
    specs = []
    for _ in range(n):
        specs.append(
            StartSpec(
                segment_index=int(rng.integers(0, hi)),
                lateral_offset=float(rng.uniform(-max_lateral, max_lateral)),
                z=float(rng.uniform(world.z_min + 2.0, world.z_max - 2.0)),
                yaw_offset=float(rng.uniform(-max_yaw_offset, max_yaw_offset)),
            )
        )
    return specs


def marginal_gain(segment_id: int, cov: CoverageState) -> float:
    """Coverage marginal gain of a segment: 1 if unvisited, else 0."""
    require(0 <= int(segment_id) < cov.visited.shape[0],
            f"segment id out of range: {segment_id}")
    return 0.0 if cov.visited[int(segment_id)] else 1.0


def render_mask(world: RiverWorld, pose: Pose) -> np.ndarray:
    """Cast one ray per mask cell onto the z=0 plane; 1 where it hits water.

    Pinhole camera at the pose, pitched 15 degrees down, 90 degree
    horizontal FOV with square aspect; rays parallel to or away from the
    water plane read 0.
    """
    require(pose.z > 0, "camera must be above the water plane")
    yaw = math.radians(pose.yaw)
    pitch = math.radians(CAMERA_PITCH_DEG)
    fwd = np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), math.sin(pitch)])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    up = np.cross(right, fwd)

    n = MASK_SHAPE[0]
    half_tan = math.tan(math.radians(CAMERA_HFOV_DEG / 2.0))
    centers = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    u = centers[None, :]  # columns, left -> right
    v = centers[:, None]  # rows, top -> bottom
    dirs = (
        fwd[None, None, :]
        + half_tan * u[..., None] * right[None, None, :]
        - half_tan * v[..., None] * up[None, None, :]
    )

    dz = dirs[..., 2]
    mask = np.zeros(MASK_SHAPE, dtype=np.uint8)
    hitting = dz < -1e-12
    if np.any(hitting):
        t = -pose.z / dz[hitting]
        pts = np.stack([pose.x + t * dirs[..., 0][hitting], pose.y + t * dirs[..., 1][hitting]], axis=1)
        mask[hitting] = world.water_at(pts).astype(np.uint8)
    return mask


def reset(
    world: RiverWorld, start: StartSpec, seed: int = 0
) -> tuple[Pose, CoverageState, Observation]:
    """Place the agent per the start spec and mark its segment visited.

    Transitions are deterministic; `seed` is recorded by callers for
    bookkeeping and drives nothing here.
    """
    require(0 <= start.segment_index < world.num_segments,
            f"start segment out of range: {start.segment_index}", ConfigurationError)
    require(abs(start.yaw_offset) <= world.yaw_limit_deg,
            "start yaw_offset exceeds yaw limit", ConfigurationError)
    lo = start.segment_index * world.segment_length
    hi = min((start.segment_index + 1) * world.segment_length, world.total_length)
    s = (lo + hi) / 2.0
    base = world.point_at(s)
    tangent = world.tangent_at(s)
    normal = np.array([-tangent[1], tangent[0]])  # left of travel direction
    xy = base + start.lateral_offset * normal
    pose = Pose(
        x=float(xy[0]),
        y=float(xy[1]),
        z=float(start.z),
        yaw=normalize_yaw(world.tangent_angle_deg(s) + start.yaw_offset),
    )
    if not world.inside_corridor(pose.x, pose.y, pose.z):
        raise ConfigurationError("start position lies outside the corridor")

    cov = CoverageState(np.zeros(world.num_segments, dtype=bool))
    s_proj, _, _ = world.locate(pose.x, pose.y)
    cov.visited[world.segment_of(s_proj)] = True
    obs = Observation(render_mask(world, pose), IDENTITY_ACTION)
    return pose, cov, obs


@dataclass(frozen=True)
class ProbeResult:
    """Render-free preview of one transition (used by oracle action search)."""

    pose: Pose
    violated: bool
    segment: int | None
    gain: float
    full_traversal: bool
    tangent_deviation: float  # |yaw - local tangent| after clamping, degrees


def simulate_step(
    world: RiverWorld, pose: Pose, cov: CoverageState, action: MultiDiscreteAction
) -> ProbeResult:
    """Apply the kinematics of one action without rendering or mutating cov.

    Translation uses the pre-step yaw; the yaw increment is applied after
    and then clamped to within yaw_limit_deg of the local tangent at the
    new position. Leaving the corridor volume (laterally, vertically, or
    past either end of the centerline) counts as a violation.
    """
    dv, dyaw, dfwd, dlat = action.deltas
    yaw_rad = math.radians(pose.yaw)
    heading = np.array([math.cos(yaw_rad), math.sin(yaw_rad)])
    left = np.array([-heading[1], heading[0]])
    xy = np.array([pose.x, pose.y]) + dfwd * heading + dlat * left
    z = pose.z + dv
    yaw = normalize_yaw(pose.yaw + dyaw)

    s, lateral, beyond = world.locate(float(xy[0]), float(xy[1]))
    violated = beyond or lateral > world.corridor_half_width or not (world.z_min <= z <= world.z_max)
    if violated:
        return ProbeResult(Pose(float(xy[0]), float(xy[1]), z, yaw), True, None, 0.0, False, 0.0)

    tangent_deg = world.tangent_angle_deg(s)
    dev = normalize_yaw(yaw - tangent_deg)
    if abs(dev) > world.yaw_limit_deg:
        dev = math.copysign(world.yaw_limit_deg, dev)
        yaw = normalize_yaw(tangent_deg + dev)

    seg = world.segment_of(s)
    gain = marginal_gain(seg, cov)
    remaining = cov.visited.shape[0] - cov.count
    full = (remaining == 1 and gain == 1.0) or remaining == 0
    return ProbeResult(Pose(float(xy[0]), float(xy[1]), z, yaw), False, seg, gain, full, abs(dev))


def step(
    world: RiverWorld, pose: Pose, cov: CoverageState, action: MultiDiscreteAction
) -> tuple[Pose, CoverageState, StepOutcome]:
    """One transition: body-frame translation, yaw, clamp, coverage reward."""
    probe = simulate_step(world, pose, cov, action)
    new_pose = probe.pose
    if probe.violated:
        obs = Observation(
            render_mask(world, new_pose) if new_pose.z > 0 else np.zeros(MASK_SHAPE, np.uint8), action
        )
        return new_pose, cov.copy(), StepOutcome(obs, 0.0, True, TERM_CORRIDOR, None)

    new_cov = cov.copy()
    new_cov.visited[probe.segment] = True
    done = bool(new_cov.visited.all())
    obs = Observation(render_mask(world, new_pose), action)
    reason = TERM_TRAVERSAL if done else TERM_NONE
    return new_pose, new_cov, StepOutcome(obs, probe.gain, done, reason, probe.segment)


class Episode:
    """Stateful rollout wrapper over the pure transition functions.

    Tracks the step count against the world's step limit, the previous
    executed action for observations, and refuses steps after termination.
    """

    def __init__(self, world: RiverWorld, start: StartSpec, seed: int = 0):
        self.world = world
        self.start = start
        self.seed = int(seed)
        self.pose, self.coverage, self.observation = reset(world, start, seed)
        self.t = 0
        self.terminated = False
        self.termination_reason = TERM_NONE

    def step(self, action: MultiDiscreteAction) -> StepOutcome:
        require(not self.terminated, "episode already terminated")
        self.pose, self.coverage, outcome = step(self.world, self.pose, self.coverage, action)
        self.t += 1
        if not outcome.terminated and self.t >= self.world.step_limit:
            outcome = replace(outcome, terminated=True, termination_reason=TERM_STEP_LIMIT)
        self.observation = outcome.observation
        self.terminated = outcome.terminated
        self.termination_reason = outcome.termination_reason
        return outcome
