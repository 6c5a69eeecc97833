"""Learning objectives and their analytic gradients.

Every loss returns `(value, grads)` where grads is a dict keyed like
"policy.w1". Policy-path losses touch only `policy.*` tensors and the
reward-path BT loss touches only `reward.*`, so gradient masking between
the two heads is structural rather than enforced by flags. Pair-based
losses exploit that both actions of a statewise pair share one latent, so
d(log pi(a_h) - log pi(a_a))/dlogits reduces to onehot(a_h) - onehot(a_a).

The FOCOPS surrogate computes its KL gate on the full batch, then
recomputes the forward pass on the gate-passing subset only; steps beyond
the KL threshold therefore contribute bitwise-exactly nothing to either
the loss or the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import (
    NetParams,
    head_backward,
    log_softmax,
    policy_logits,
    prefix_grads,
    reward_many,
)
from .validation import UsageError, require
from .world import BRANCH_SIZE, NUM_BRANCHES, MultiDiscreteAction


def _softplus(x: np.ndarray | float) -> np.ndarray | float:
    return np.logaddexp(0.0, x)


def _sigmoid_scalar(x: np.ndarray | float) -> np.ndarray | float:
    return np.where(np.asarray(x) >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _check_loss(value: float, name: str) -> float:
    if not np.isfinite(value):
        raise UsageError(f"non-finite loss in {name}")
    return float(value)


def _branch_indices(actions: list[MultiDiscreteAction]) -> np.ndarray:
    return np.array([a.indices for a in actions], dtype=np.int64)  # (N, 4)


def _one_hots(actions: list[MultiDiscreteAction]) -> np.ndarray:
    out = np.zeros((len(actions), NUM_BRANCHES, BRANCH_SIZE))
    idx = _branch_indices(actions)
    rows = np.arange(len(actions))[:, None]
    branches = np.arange(NUM_BRANCHES)[None, :]
    out[rows, branches, idx] = 1.0
    return out


def _joint_log_probs(log_probs: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Sum of per-branch log-probs of chosen indices; (N,4,3),(N,4) -> (N,)."""
    rows = np.arange(log_probs.shape[0])[:, None]
    branches = np.arange(NUM_BRANCHES)[None, :]
    return log_probs[rows, branches, idx].sum(axis=1)


# -- Bradley-Terry core ------------------------------------------------------


def bt_nll(score_pos: float, score_neg: float, beta: float = 1.0) -> tuple[float, float, float]:
    """-log sigma(beta * (score_pos - score_neg)) and d/dscore_pos, d/dscore_neg."""
    require(beta > 0, "beta must be > 0")
    margin = beta * (float(score_pos) - float(score_neg))
    loss = float(_softplus(-margin))
    slope = float(_sigmoid_scalar(-margin))  # sigma(-margin) = 1 - sigma(margin)
    return _check_loss(loss, "bt_nll"), -beta * slope, beta * slope


# -- preference losses -------------------------------------------------------


def spar_p_loss(
    params: NetParams,
    latents: np.ndarray,
    preferred: list[MultiDiscreteAction],
    rejected: list[MultiDiscreteAction],
) -> tuple[float, dict[str, np.ndarray]]:
    """BT negative log-likelihood on policy joint log-probs at paired states."""
    if len(preferred) == 0:
        return 0.0, {}
    logits, cache = policy_logits(params, latents)
    lp = log_softmax(logits)
    delta = _joint_log_probs(lp, _branch_indices(preferred)) - _joint_log_probs(lp, _branch_indices(rejected))
    loss = float(np.sum(_softplus(-delta)))
    g = np.asarray(_sigmoid_scalar(-delta))  # (N,)
    d_logits = g[:, None, None] * (_one_hots(rejected) - _one_hots(preferred))
    grads = head_backward(params.policy, cache, d_logits.reshape(len(preferred), -1))
    return _check_loss(loss, "spar_p_loss"), prefix_grads("policy", grads)


def spar_r_loss(
    params: NetParams,
    latents: np.ndarray,
    preferred: list[MultiDiscreteAction],
    rejected: list[MultiDiscreteAction],
) -> tuple[float, dict[str, np.ndarray]]:
    """BT negative log-likelihood on the immediate-reward head."""
    if len(preferred) == 0:
        return 0.0, {}
    r_pos, cache_pos = reward_many(params, latents, preferred)
    r_neg, cache_neg = reward_many(params, latents, rejected)
    delta = r_pos - r_neg
    loss = float(np.sum(_softplus(-delta)))
    g = np.asarray(_sigmoid_scalar(-delta))
    grads_pos = head_backward(params.reward, cache_pos, (-g)[:, None])
    grads_neg = head_backward(params.reward, cache_neg, g[:, None])
    grads = {k: grads_pos[k] + grads_neg[k] for k in grads_pos}
    return _check_loss(loss, "spar_r_loss"), prefix_grads("reward", grads)


def spar_d_loss(
    params: NetParams,
    ref_params: NetParams,
    latents: np.ndarray,
    preferred: list[MultiDiscreteAction],
    rejected: list[MultiDiscreteAction],
    beta: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Reference-normalized statewise preference loss (DPO-style)."""
    require(beta > 0, "beta must be > 0")
    if len(preferred) == 0:
        return 0.0, {}
    logits, cache = policy_logits(params, latents)
    lp = log_softmax(logits)
    ref_logits, _ = policy_logits(ref_params, latents)
    lq = log_softmax(ref_logits)
    idx_h = _branch_indices(preferred)
    idx_a = _branch_indices(rejected)
    margin = beta * (
        (_joint_log_probs(lp, idx_h) - _joint_log_probs(lq, idx_h))
        - (_joint_log_probs(lp, idx_a) - _joint_log_probs(lq, idx_a))
    )
    loss = float(np.sum(_softplus(-margin)))
    g = np.asarray(_sigmoid_scalar(-margin))
    d_logits = (beta * g)[:, None, None] * (_one_hots(rejected) - _one_hots(preferred))
    grads = head_backward(params.policy, cache, d_logits.reshape(len(preferred), -1))
    return _check_loss(loss, "spar_d_loss"), prefix_grads("policy", grads)


# -- reward-to-go advantages -------------------------------------------------


@dataclass
class AdvantageBatch:
    """Truncated discounted returns standardized within one episode batch."""

    returns: np.ndarray
    mean: float
    std: float
    advantages: np.ndarray
    kls: np.ndarray | None = field(default=None)
    ratios: np.ndarray | None = field(default=None)

    def __len__(self) -> int:
        return self.returns.shape[0]


def advantages(rewards: np.ndarray | list[float], gamma: float, k: int, eps: float = 1e-8) -> AdvantageBatch:
    """K-step reward-to-go with per-batch standardization (population std)."""
    require(0.0 <= gamma <= 1.0, "gamma must be in [0, 1]")
    require(k >= 1, "K must be >= 1")
    require(eps > 0, "eps must be > 0")
    r = np.asarray(rewards, dtype=np.float64)
    t_len = r.shape[0]
    if t_len == 0:
        return AdvantageBatch(np.zeros(0), 0.0, 0.0, np.zeros(0))
    powers = gamma ** np.arange(min(k, t_len))
    returns = np.empty(t_len)
    for t in range(t_len):
        k_t = min(k, t_len - t)
        returns[t] = float(np.dot(powers[:k_t], r[t : t + k_t]))
    mean = float(returns.mean())
    std = float(returns.std())
    adv = (returns - mean) / (std + eps)
    return AdvantageBatch(returns, mean, std, adv)


# -- trust-region surrogate ----------------------------------------------------


@dataclass
class FocopsResult:
    loss: float
    grads: dict[str, np.ndarray]
    kls: np.ndarray
    ratios: np.ndarray
    gate: np.ndarray  # True where KL_t <= eta (step participates)

    @property
    def rejected(self) -> int:
        return int(np.count_nonzero(~self.gate))


def _per_branch_kl_and_logp(
    params: NetParams, ref_params: NetParams, latents: np.ndarray, idx: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    logits, _ = policy_logits(params, latents)
    lp = log_softmax(logits)
    ref_logits, _ = policy_logits(ref_params, latents)
    lq = log_softmax(ref_logits)
    p = np.exp(lp)
    kl_branch = np.sum(p * (lp - lq), axis=2)  # (N, 4)
    kls = kl_branch.sum(axis=1)
    log_rho = _joint_log_probs(lp, idx) - _joint_log_probs(lq, idx)
    return kls, np.exp(log_rho), lp, lq, kl_branch


def focops_loss(
    params: NetParams,
    ref_params: NetParams,
    latents: np.ndarray,
    exec_actions: list[MultiDiscreteAction],
    adv: AdvantageBatch,
    eta: float,
    lam: float,
) -> FocopsResult:
    """Mean over gate-passing steps of KL_t - rho_t * A_t / lambda.

    KL_t is the exact divergence of the factorized joints (sum of the four
    per-branch categorical KLs) from the current policy to the frozen
    reference, rho_t the importance ratio of the executed action.
    """
    require(eta > 0 and lam > 0, "eta and lambda must be > 0")
    n = len(exec_actions)
    require(len(adv) == n and latents.shape[0] == n,
            f"steps ({n}), latents ({latents.shape[0]}) and advantages ({len(adv)}) must align")
    if n == 0:
        return FocopsResult(0.0, {}, np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool))

    idx = _branch_indices(exec_actions)
    kls, ratios, _, _, _ = _per_branch_kl_and_logp(params, ref_params, latents, idx)
    gate = kls <= eta
    if not np.any(gate):
        return FocopsResult(0.0, {}, kls, ratios, gate)

    # Recompute on the gated subset so excluded steps leave no numeric trace.
    sub = np.flatnonzero(gate)
    z_sub = latents[sub]
    idx_sub = idx[sub]
    a_vals = adv.advantages[sub]
    logits, cache = policy_logits(params, z_sub)
    lp = log_softmax(logits)
    ref_logits, _ = policy_logits(ref_params, z_sub)
    lq = log_softmax(ref_logits)
    p = np.exp(lp)
    delta = lp - lq
    kl_branch = np.sum(p * delta, axis=2)  # (M, 4)
    kl_sub = kl_branch.sum(axis=1)
    rho_sub = np.exp(_joint_log_probs(lp, idx_sub) - _joint_log_probs(lq, idx_sub))

    m = sub.shape[0]
    loss = float(np.mean(kl_sub - rho_sub * a_vals / lam))

    onehot = np.zeros_like(p)
    rows = np.arange(m)[:, None]
    branches = np.arange(NUM_BRANCHES)[None, :]
    onehot[rows, branches, idx_sub] = 1.0
    d_kl = p * (delta - kl_branch[:, :, None])
    d_rho = (rho_sub * a_vals / lam)[:, None, None] * (onehot - p)
    d_logits = (d_kl - d_rho) / m
    grads = head_backward(params.policy, cache, d_logits.reshape(m, -1))
    return FocopsResult(_check_loss(loss, "focops_loss"), prefix_grads("policy", grads), kls, ratios, gate)


def spar_h_loss(
    params: NetParams,
    ref_params: NetParams,
    pair_latents: np.ndarray,
    preferred: list[MultiDiscreteAction],
    rejected: list[MultiDiscreteAction],
    step_latents: np.ndarray,
    exec_actions: list[MultiDiscreteAction],
    adv: AdvantageBatch,
    alpha: float,
    eta: float,
    lam: float,
) -> tuple[float, dict[str, np.ndarray], dict]:
    """Direct BT term on intervened pairs plus alpha * FOCOPS on the rest.

    With alpha = 0 the surrogate term is skipped outright so losses and
    gradients match spar_p_loss bit for bit.
    """
    direct, grads = spar_p_loss(params, pair_latents, preferred, rejected)
    info = {"direct": direct, "rl": 0.0, "gate_rejected": 0}
    if alpha == 0.0:
        return direct, grads, info
    rl = focops_loss(params, ref_params, step_latents, exec_actions, adv, eta, lam)
    info["rl"] = rl.loss
    info["gate_rejected"] = rl.rejected
    total = direct + alpha * rl.loss
    combined = dict(grads)
    for k, v in rl.grads.items():
        combined[k] = combined[k] + alpha * v if k in combined else alpha * v
    return _check_loss(total, "spar_h_loss"), combined, info


# -- imitation and evaluative baselines ---------------------------------------


def iwr_loss(
    params: NetParams,
    latents: np.ndarray,
    exec_actions: list[MultiDiscreteAction],
    intervened: np.ndarray,
) -> tuple[float, dict[str, np.ndarray], float]:
    """Behavior cloning of executed actions with takeover steps upweighted
    by (#non-intervened / #intervened); degenerate batches fall back to 1.
    """
    n = len(exec_actions)
    if n == 0:
        return 0.0, {}, 1.0
    m = np.asarray(intervened, dtype=bool)
    n_pos = int(np.count_nonzero(m))
    n_neg = n - n_pos
    takeover_w = (n_neg / n_pos) if (n_pos > 0 and n_neg > 0) else 1.0
    weights = np.where(m, takeover_w, 1.0)

    logits, cache = policy_logits(params, latents)
    lp = log_softmax(logits)
    idx = _branch_indices(exec_actions)
    loss = float(np.sum(weights * -_joint_log_probs(lp, idx)))
    onehot = _one_hots(exec_actions)
    d_logits = weights[:, None, None] * (np.exp(lp) - onehot)
    grads = head_backward(params.policy, cache, d_logits.reshape(n, -1))
    return _check_loss(loss, "iwr_loss"), prefix_grads("policy", grads), float(takeover_w)


def hg_dagger_loss(
    params: NetParams,
    latents: np.ndarray,
    human_actions: list[MultiDiscreteAction],
) -> tuple[float, dict[str, np.ndarray]]:
    """Behavior cloning of overseer actions on gated (intervened) steps only."""
    n = len(human_actions)
    if n == 0:
        return 0.0, {}
    logits, cache = policy_logits(params, latents)
    lp = log_softmax(logits)
    idx = _branch_indices(human_actions)
    loss = float(np.sum(-_joint_log_probs(lp, idx)))
    d_logits = np.exp(lp) - _one_hots(human_actions)
    grads = head_backward(params.policy, cache, d_logits.reshape(n, -1))
    return _check_loss(loss, "hg_dagger_loss"), prefix_grads("policy", grads)


def coach_step_grads(
    params: NetParams,
    latent: np.ndarray,
    proposed: MultiDiscreteAction,
    feedback: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Descent gradients of -f * log pi(a_proposed | s) for one step.

    Applying SGD to these implements the evaluative ascent
    theta += lr * f * grad log pi(a | s).
    """
    logits, cache = policy_logits(params, latent[None, :])
    lp = log_softmax(logits)
    idx = _branch_indices([proposed])
    loss = float(-feedback * _joint_log_probs(lp, idx)[0])
    d_logits = feedback * (np.exp(lp) - _one_hots([proposed]))
    grads = head_backward(params.policy, cache, d_logits.reshape(1, -1))
    return _check_loss(loss, "coach_step"), prefix_grads("policy", grads)


# -- pretraining losses --------------------------------------------------------


def bc_policy_loss(
    params: NetParams,
    latents: np.ndarray,
    label_actions: list[MultiDiscreteAction],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean joint NLL of label actions (novice behavior cloning)."""
    n = len(label_actions)
    require(n > 0, "behavior cloning needs at least one example")
    logits, cache = policy_logits(params, latents)
    lp = log_softmax(logits)
    idx = _branch_indices(label_actions)
    loss = float(np.mean(-_joint_log_probs(lp, idx)))
    d_logits = (np.exp(lp) - _one_hots(label_actions)) / n
    grads = head_backward(params.policy, cache, d_logits.reshape(n, -1))
    return _check_loss(loss, "bc_policy_loss"), prefix_grads("policy", grads)


def reward_fit_loss(
    params: NetParams,
    latents: np.ndarray,
    actions: list[MultiDiscreteAction],
    targets: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error of the reward head against observed rewards."""
    n = len(actions)
    require(n > 0, "reward regression needs at least one example")
    values, cache = reward_many(params, latents, actions)
    resid = values - np.asarray(targets, dtype=np.float64)
    loss = float(np.mean(resid**2))
    grads = head_backward(params.reward, cache, (2.0 * resid / n)[:, None])
    return _check_loss(loss, "reward_fit_loss"), prefix_grads("reward", grads)
