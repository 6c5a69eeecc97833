"""Recurrent policy/reward network with hand-written gradients.

A single frozen GRU consumes (mask bits, previous-action one-hot) and feeds
two trainable tanh MLP heads: a policy head producing 4x3 branch logits and
a reward head scoring (latent, action one-hot) pairs. The encoder is never
trained, so no backpropagation through time exists anywhere; all gradients
are analytic and flow only into the heads.

Everything is float64. Gradients are plain dicts keyed "policy.w1",
"reward.b2", ... so optimizers, clipping, and finite-difference checks can
iterate tensors uniformly.
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import SchemaError, UsageError, check_finite, require
from .world import (
    BRANCH_SIZE,
    NUM_BRANCHES,
    MultiDiscreteAction,
    Observation,
)

MASK_BITS = 256
ACTION_BITS = NUM_BRANCHES * BRANCH_SIZE  # 12
INPUT_DIM = MASK_BITS + ACTION_BITS  # 268
HIDDEN_DIM = 64
POLICY_OUT = ACTION_BITS
REWARD_IN = HIDDEN_DIM + ACTION_BITS

CHECKPOINT_FORMAT_VERSION = 1
GRAD_CLIP_NORM = 10.0


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GruParams:
    wz: np.ndarray
    uz: np.ndarray
    bz: np.ndarray
    wr: np.ndarray
    ur: np.ndarray
    br: np.ndarray
    wh: np.ndarray
    uh: np.ndarray
    bh: np.ndarray


@dataclass
class HeadParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class NetParams:
    gru: GruParams
    policy: HeadParams
    reward: HeadParams
    frozen_encoder: bool = True
    hidden_dim: int = HIDDEN_DIM
    input_dim: int = INPUT_DIM


TENSOR_KEYS = (
    "gru.wz", "gru.uz", "gru.bz",
    "gru.wr", "gru.ur", "gru.br",
    "gru.wh", "gru.uh", "gru.bh",
    "policy.w1", "policy.b1", "policy.w2", "policy.b2",
    "reward.w1", "reward.b1", "reward.w2", "reward.b2",
)


def get_tensor(params: NetParams, key: str) -> np.ndarray:
    group, name = key.split(".")
    return getattr(getattr(params, group), name)


def params_to_tensors(params: NetParams) -> dict[str, np.ndarray]:
    return {k: get_tensor(params, k) for k in TENSOR_KEYS}


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))  # sign fix keeps the draw deterministic


def _scaled_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(seed: int = 0) -> NetParams:
    """Fresh network: random frozen GRU, scaled-uniform heads, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    gru = GruParams(
        wz=_scaled_uniform(rng, (HIDDEN_DIM, INPUT_DIM), INPUT_DIM),
        uz=_orthogonal(rng, HIDDEN_DIM),
        bz=np.zeros(HIDDEN_DIM),
        wr=_scaled_uniform(rng, (HIDDEN_DIM, INPUT_DIM), INPUT_DIM),
        ur=_orthogonal(rng, HIDDEN_DIM),
        br=np.zeros(HIDDEN_DIM),
        wh=_scaled_uniform(rng, (HIDDEN_DIM, INPUT_DIM), INPUT_DIM),
        uh=_orthogonal(rng, HIDDEN_DIM),
        bh=np.zeros(HIDDEN_DIM),
    )
    policy = HeadParams(
        w1=_scaled_uniform(rng, (HIDDEN_DIM, HIDDEN_DIM), HIDDEN_DIM),
        b1=np.zeros(HIDDEN_DIM),
        w2=_scaled_uniform(rng, (POLICY_OUT, HIDDEN_DIM), HIDDEN_DIM),
        b2=np.zeros(POLICY_OUT),
    )
    reward = HeadParams(
        w1=_scaled_uniform(rng, (HIDDEN_DIM, REWARD_IN), REWARD_IN),
        b1=np.zeros(HIDDEN_DIM),
        w2=_scaled_uniform(rng, (1, HIDDEN_DIM), HIDDEN_DIM),
        b2=np.zeros(1),
    )
    return NetParams(gru=gru, policy=policy, reward=reward)


def snapshot(params: NetParams) -> NetParams:
    return copy.deepcopy(params)


def params_equal(a: NetParams, b: NetParams) -> bool:
    return all(np.array_equal(get_tensor(a, k), get_tensor(b, k)) for k in TENSOR_KEYS)


# -- encoder ---------------------------------------------------------------


def obs_to_input(obs: Observation) -> np.ndarray:
    """268-vector: 256 row-major mask bits then the 12-bit action one-hot."""
    return np.concatenate([obs.mask.reshape(-1).astype(np.float64), obs.prev_action.one_hot()])


def initial_latent() -> np.ndarray:
    return np.zeros(HIDDEN_DIM)


def encode_step(params: NetParams, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Standard GRU cell; h' = (1-u)*h + u*h_cand."""
    require(x.shape == (params.input_dim,), f"encoder input must have length {params.input_dim}, got {x.shape}")
    require(h_prev.shape == (params.hidden_dim,), f"latent must have length {params.hidden_dim}, got {h_prev.shape}")
    g = params.gru
    r = sigmoid(g.wr @ x + g.ur @ h_prev + g.br)
    u = sigmoid(g.wz @ x + g.uz @ h_prev + g.bz)
    h_cand = np.tanh(g.wh @ x + g.uh @ (r * h_prev) + g.bh)
    return (1.0 - u) * h_prev + u * h_cand


def encode_sequence(params: NetParams, observations: list[Observation]) -> np.ndarray:
    """Latents z_t for each observation, rolled from the zero state."""
    h = initial_latent()
    out = np.empty((len(observations), params.hidden_dim))
    for t, obs in enumerate(observations):
        h = encode_step(params, h, obs_to_input(obs))
        out[t] = h
    return out


# -- heads -----------------------------------------------------------------


def head_forward(head: HeadParams, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Two-layer tanh MLP on a batch (N, in) -> (N, out); returns a cache."""
    hidden = np.tanh(x @ head.w1.T + head.b1)
    out = hidden @ head.w2.T + head.b2
    return out, (x, hidden)


def head_backward(head: HeadParams, cache: tuple, d_out: np.ndarray) -> dict[str, np.ndarray]:
    x, hidden = cache
    d_hidden = (d_out @ head.w2) * (1.0 - hidden**2)
    return {
        "w2": d_out.T @ hidden,
        "b2": d_out.sum(axis=0),
        "w1": d_hidden.T @ x,
        "b1": d_hidden.sum(axis=0),
    }


def prefix_grads(prefix: str, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def add_grads(*grad_dicts: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for g in grad_dicts:
        for k, v in g.items():
            out[k] = out[k] + v if k in out else v
    return out


def policy_logits(params: NetParams, latents: np.ndarray) -> tuple[np.ndarray, tuple]:
    """(N, 4, 3) branch logits for a batch of latents."""
    z = np.atleast_2d(latents)
    flat, cache = head_forward(params.policy, z)
    return flat.reshape(-1, NUM_BRANCHES, BRANCH_SIZE), cache


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class ActionDistribution:
    """Factorized categorical over the 4 branches."""

    logits: np.ndarray  # (4, 3)
    log_probs: np.ndarray = field(init=False)

    def __post_init__(self):
        require(self.logits.shape == (NUM_BRANCHES, BRANCH_SIZE),
                f"logits must be (4, 3), got {self.logits.shape}")
        self.log_probs = log_softmax(self.logits)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def joint_log_prob(self, action: MultiDiscreteAction) -> float:
        return float(sum(self.log_probs[b, idx] for b, idx in enumerate(action.indices)))

    def sample(self, rng: np.random.Generator) -> MultiDiscreteAction:
        idxs = []
        for b in range(NUM_BRANCHES):
            cum = np.cumsum(self.probs[b])
            idxs.append(int(np.searchsorted(cum, rng.random(), side="right").clip(0, BRANCH_SIZE - 1)))
        return MultiDiscreteAction(*idxs)

    def greedy(self) -> MultiDiscreteAction:
        return MultiDiscreteAction(*(int(i) for i in np.argmax(self.logits, axis=-1)))

    def joint_log_prob_table(self) -> np.ndarray:
        """Log-probability of all 81 joint actions, in joint-index order."""
        lp = self.log_probs
        table = lp[0][:, None, None, None] + lp[1][None, :, None, None] \
            + lp[2][None, None, :, None] + lp[3][None, None, None, :]
        return table.reshape(-1)


def act(
    params: NetParams,
    z: np.ndarray,
    rng: np.random.Generator | None = None,
    greedy: bool = False,
) -> tuple[ActionDistribution, MultiDiscreteAction, float]:
    """Sample (or argmax) an action from the policy head at latent z."""
    logits, _ = policy_logits(params, z)
    dist = ActionDistribution(logits[0])
    if greedy:
        action = dist.greedy()
    else:
        require(rng is not None, "sampled mode needs a random generator")
        action = dist.sample(rng)
    return dist, action, dist.joint_log_prob(action)


def reward_inputs(latents: np.ndarray, actions: list[MultiDiscreteAction]) -> np.ndarray:
    z = np.atleast_2d(latents)
    onehots = np.stack([a.one_hot() for a in actions])
    return np.concatenate([z, onehots], axis=1)


def reward_many(params: NetParams, latents: np.ndarray, actions: list[MultiDiscreteAction]) -> tuple[np.ndarray, tuple]:
    x = reward_inputs(latents, actions)
    out, cache = head_forward(params.reward, x)
    return out[:, 0], cache


def reward_estimate(params: NetParams, z: np.ndarray, action: MultiDiscreteAction) -> float:
    values, _ = reward_many(params, z[None, :], [action])
    return float(values[0])


def reward_all_actions(params: NetParams, z: np.ndarray) -> np.ndarray:
    """Reward estimates for all 81 joint actions at one latent."""
    from .world import ALL_ACTIONS

    z_rep = np.repeat(z[None, :], len(ALL_ACTIONS), axis=0)
    values, _ = reward_many(params, z_rep, list(ALL_ACTIONS))
    return values


# -- optimizers --------------------------------------------------------------


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = GRAD_CLIP_NORM) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}
    return grads


class Optimizer:
    """Plain SGD or Adam over the trainable head tensors.

    State is keyed by tensor name; the frozen GRU never appears. `apply`
    returns a new NetParams (the GRU tensors are shared, the updated heads
    are copies) and raises if any gradient is non-finite.
    """

    def __init__(self, kind: str = "adam", lr: float = 3e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        require(kind in ("sgd", "adam"), f"unknown optimizer kind: {kind}")
        self.kind = kind
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def apply(self, params: NetParams, grads: dict[str, np.ndarray]) -> NetParams:
        for key in grads:
            require(not key.startswith("gru."), f"gradient produced for frozen tensor {key}")
            if not np.all(np.isfinite(grads[key])):
                raise UsageError(f"non-finite gradient for tensor {key}")
        grads = clip_gradients(grads)

        new = NetParams(
            gru=params.gru,
            policy=copy.deepcopy(params.policy),
            reward=copy.deepcopy(params.reward),
            frozen_encoder=params.frozen_encoder,
            hidden_dim=params.hidden_dim,
            input_dim=params.input_dim,
        )
        if self.kind == "adam":
            self.t += 1
        for key, g in grads.items():
            group, name = key.split(".")
            tensor = getattr(getattr(new, group), name)
            if self.kind == "sgd":
                tensor -= self.lr * g
            else:
                m = self.m.setdefault(key, np.zeros_like(g))
                v = self.v.setdefault(key, np.zeros_like(g))
                m[...] = self.beta1 * m + (1 - self.beta1) * g
                v[...] = self.beta2 * v + (1 - self.beta2) * g * g
                m_hat = m / (1 - self.beta1**self.t)
                v_hat = v / (1 - self.beta2**self.t)
                tensor -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return new


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    params: NetParams
    metadata: dict

    def save(self, path: str | Path) -> str:
        payload = checkpoint_payload(self.params, self.metadata)
        Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")
        return payload["metadata"]["checkpoint_id"]

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        params, metadata = load_checkpoint(path)
        return cls(params, metadata)


def _encode_tensor(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "dtype": "float64",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_tensor(entry: dict) -> np.ndarray:
    require(entry.get("dtype") == "float64", f"unsupported tensor dtype {entry.get('dtype')!r}", SchemaError)
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(entry["shape"]).copy()


def checkpoint_payload(params: NetParams, metadata: dict) -> dict:
    tensors = {k: _encode_tensor(v) for k, v in params_to_tensors(params).items()}
    meta = dict(metadata)
    meta.pop("checkpoint_id", None)
    meta["frozen_encoder"] = params.frozen_encoder
    digest_src = json.dumps({"tensors": tensors, "metadata": meta}, sort_keys=True)
    meta["checkpoint_id"] = hashlib.sha256(digest_src.encode()).hexdigest()[:16]
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "riverspar-checkpoint",
        "tensors": tensors,
        "metadata": meta,
    }


def save_checkpoint(params: NetParams, path: str | Path, metadata: dict | None = None) -> str:
    return Checkpoint(params, metadata or {}).save(path)


def load_checkpoint(path: str | Path) -> tuple[NetParams, dict]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"checkpoint is not valid JSON: {e}") from e
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise SchemaError(f"unsupported checkpoint format_version: {payload.get('format_version')!r}")
    if payload.get("kind") != "riverspar-checkpoint":
        raise SchemaError(f"not a checkpoint file: kind={payload.get('kind')!r}")
    tensors = payload["tensors"]
    missing = [k for k in TENSOR_KEYS if k not in tensors]
    require(not missing, f"checkpoint missing tensors: {missing}", SchemaError)

    def head(prefix: str) -> HeadParams:
        return HeadParams(*(_decode_tensor(tensors[f"{prefix}.{n}"]) for n in ("w1", "b1", "w2", "b2")))

    gru = GruParams(*(_decode_tensor(tensors[f"gru.{n}"]) for n in ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")))
    metadata = payload.get("metadata", {})
    params = NetParams(gru=gru, policy=head("policy"), reward=head("reward"),
                       frozen_encoder=bool(metadata.get("frozen_encoder", True)))
    for k in TENSOR_KEYS:
        check_finite(k, get_tensor(params, k))
    return params, metadata
