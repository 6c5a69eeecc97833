"""The seven retraining methods as sklearn-style estimators.

Each method is a `BaseEstimator`: hyperparameters in `__init__` (so
`get_params` / `set_params` / `clone` compose with the wider ecosystem),
learning in `fit(buffer, init=...)`, fitted state in `params_` and
`reports_`, greedy action prediction in `predict`.

One `fit` call is one retraining round: snapshot the reference policy,
then run E full-batch epochs over the cumulative buffer (no subsampling).
Excluded terminal transitions never reach any loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import losses
from .losses import AdvantageBatch, advantages
from .nets import (
    NetParams,
    Optimizer,
    act,
    encode_sequence,
    encode_step,
    initial_latent,
    obs_to_input,
    reward_many,
    snapshot,
)
from .session import PreferencePair, ReplayBuffer, Trajectory, extract_preferences
from .validation import UsageError, require
from .world import MultiDiscreteAction, Observation

METHOD_NAMES = ("SPAR-P", "SPAR-R", "SPAR-D", "SPAR-H", "IWR", "HG-DAgger", "COACH")


@dataclass(frozen=True)
class HyperParams:
    """One record shared by every method; spec-symbol names in to_dict."""

    alpha: float = 1.0   # hybrid mixing weight
    beta: float = 1.0    # BT inverse temperature (SPAR-D margin scale)
    gamma: float = 0.99  # discount
    eta: float = 0.05    # KL gate threshold
    lam: float = 1.5     # FOCOPS greediness
    epochs: int = 10     # inner retrain epochs E
    k_horizon: int = 32  # reward-to-go truncation K
    zeta: float = 0.1    # COACH weak positive
    lr: float = 3e-3
    eps: float = 1e-8    # standardization guard

    def __post_init__(self):
        require(self.beta > 0, "beta must be > 0")
        require(0.0 <= self.gamma <= 1.0, "gamma must be in [0, 1]")
        require(self.eta > 0, "eta must be > 0")
        require(self.lam > 0, "lambda must be > 0")
        require(self.epochs >= 1, "E must be >= 1")
        require(self.k_horizon >= 1, "K must be >= 1")
        require(self.eps > 0, "eps must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {
            "alpha": d["alpha"], "beta": d["beta"], "gamma": d["gamma"],
            "eta": d["eta"], "lambda": d["lam"], "E": d["epochs"],
            "K": d["k_horizon"], "zeta": d["zeta"], "lr": d["lr"], "eps": d["eps"],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(
            alpha=float(d.get("alpha", 1.0)), beta=float(d.get("beta", 1.0)),
            gamma=float(d.get("gamma", 0.99)), eta=float(d.get("eta", 0.05)),
            lam=float(d.get("lambda", 1.5)), epochs=int(d.get("E", 10)),
            k_horizon=int(d.get("K", 32)), zeta=float(d.get("zeta", 0.1)),
            lr=float(d.get("lr", 3e-3)), eps=float(d.get("eps", 1e-8)),
        )


@dataclass
class LossReport:
    """Per-epoch diagnostics, exported as JSON lines."""

    method: str
    epoch: int
    direct: float = 0.0
    reward_bt: float = 0.0
    rl: float = 0.0
    n_intervened: int = 0
    n_non_intervened: int = 0
    gate_rejected: int = 0
    pair_margin: float | None = None  # mean R(a_h) - R(a_a) after the epoch's reward update

    def __post_init__(self):
        require(self.n_intervened >= 0 and self.n_non_intervened >= 0 and self.gate_rejected >= 0,
                "counts must be non-negative")

    @property
    def total_steps(self) -> int:
        return self.n_intervened + self.n_non_intervened

    def to_json_dict(self) -> dict:
        return {
            "method": self.method, "epoch": self.epoch,
            "direct": self.direct, "reward_bt": self.reward_bt, "rl": self.rl,
            "n_intervened": self.n_intervened, "n_non_intervened": self.n_non_intervened,
            "gate_rejected": self.gate_rejected, "pair_margin": self.pair_margin,
        }


class LatentCache:
    """Per-trajectory latents under a frozen encoder.

    Latents depend only on the (frozen) GRU and the observation history, so
    one cache can serve a whole experiment run across methods and epochs.
    """

    def __init__(self, params: NetParams):
        self.params = params
        self._cache: dict[int, np.ndarray] = {}

    def trajectory_latents(self, traj: Trajectory) -> np.ndarray:
        key = id(traj)
        if key not in self._cache:
            obs = [r.observation for r in traj.records]
            self._cache[key] = encode_sequence(self.params, obs)
        return self._cache[key]


class TrainingView:
    """Index of one buffer for the losses: latents, pairs, masked step sets."""

    def __init__(self, buffer: ReplayBuffer, cache: LatentCache):
        require(len(buffer) > 0, "buffer is empty")
        self.buffer = buffer
        self.cache = cache

        self.pairs: list[PreferencePair] = extract_preferences(buffer)
        pair_lat, rl_lat, all_lat = [], [], []
        self.preferred: list[MultiDiscreteAction] = []
        self.rejected: list[MultiDiscreteAction] = []
        self.rl_actions: list[MultiDiscreteAction] = []
        self.rl_episode_slices: list[slice] = []
        self.all_actions_exec: list[MultiDiscreteAction] = []
        self.all_actions_agent: list[MultiDiscreteAction] = []
        self.all_m: list[int] = []
        self.human_latents: list[np.ndarray] = []
        self.human_actions: list[MultiDiscreteAction] = []

        for traj in buffer:
            lat = cache.trajectory_latents(traj)
            start = len(self.rl_actions)
            for i, rec in enumerate(traj.records):
                if rec.excluded_from_training:
                    continue
                self.all_actions_exec.append(rec.a_exec)
                self.all_actions_agent.append(rec.a_agent)
                self.all_m.append(rec.m)
                all_lat.append(lat[i])
                if rec.m == 1:
                    self.human_latents.append(lat[i])
                    self.human_actions.append(rec.a_human)
                    if rec.a_human != rec.a_agent:
                        pair_lat.append(lat[i])
                        self.preferred.append(rec.a_human)
                        self.rejected.append(rec.a_agent)
                else:
                    self.rl_actions.append(rec.a_exec)
                    rl_lat.append(lat[i])
            self.rl_episode_slices.append(slice(start, len(self.rl_actions)))

        dim = cache.params.hidden_dim
        self.pair_latents = np.array(pair_lat).reshape(-1, dim)
        self.rl_latents = np.array(rl_lat).reshape(-1, dim)
        self.all_latents = np.array(all_lat).reshape(-1, dim)
        self.human_latents_arr = np.array(self.human_latents).reshape(-1, dim)
        self.n_intervened = int(sum(self.all_m))
        self.n_non_intervened = len(self.all_m) - self.n_intervened

    def pair_margin(self, params: NetParams) -> float | None:
        if not self.pairs:
            return None
        r_pos, _ = reward_many(params, self.pair_latents, self.preferred)
        r_neg, _ = reward_many(params, self.pair_latents, self.rejected)
        return float(np.mean(r_pos - r_neg))

    def rl_advantages(self, params: NetParams, hp: HyperParams) -> AdvantageBatch:
        """Per-episode reward-to-go advantages over non-intervened steps,
        standardized within each episode, concatenated in buffer order."""
        returns, means, stds, advs = [], [], [], []
        for sl in self.rl_episode_slices:
            actions = self.rl_actions[sl]
            if not actions:
                continue
            rewards, _ = reward_many(params, self.rl_latents[sl], actions)
            batch = advantages(rewards, hp.gamma, hp.k_horizon, hp.eps)
            returns.append(batch.returns)
            advs.append(batch.advantages)
            means.append(batch.mean)
            stds.append(batch.std)
        if not returns:
            return AdvantageBatch(np.zeros(0), 0.0, 0.0, np.zeros(0))
        cat = np.concatenate(returns)
        return AdvantageBatch(cat, float(np.mean(means)), float(np.mean(stds)), np.concatenate(advs))


class HitlRetrainer(BaseEstimator):
    """Base class: the E-epoch full-batch retraining loop."""

    method_name = ""

    def __init__(self, alpha=1.0, beta=1.0, gamma=0.99, eta=0.05, lam=1.5,
                 epochs=10, k_horizon=32, zeta=0.1, lr=3e-3, eps=1e-8):
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.eta = eta
        self.lam = lam
        self.epochs = epochs
        self.k_horizon = k_horizon
        self.zeta = zeta
        self.lr = lr
        self.eps = eps

    def hyperparams(self) -> HyperParams:
        return HyperParams(alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                           eta=self.eta, lam=self.lam, epochs=self.epochs,
                           k_horizon=self.k_horizon, zeta=self.zeta, lr=self.lr, eps=self.eps)

    def fit(self, buffer: ReplayBuffer, init: NetParams | None = None,
            latent_cache: LatentCache | None = None) -> "HitlRetrainer":
        require(init is not None, "fit needs init=<NetParams> to retrain from")
        require(len(buffer) > 0, "buffer is empty")
        hp = self.hyperparams()
        params = snapshot(init)
        ref = snapshot(init)  # frozen reference at retrain start
        cache = latent_cache if latent_cache is not None else LatentCache(params)
        view = TrainingView(buffer, cache)

        self._policy_opt = Optimizer(self._policy_opt_kind(), hp.lr)
        self._reward_opt = Optimizer("adam", hp.lr)
        self.reports_ = []
        for epoch in range(hp.epochs):
            params, report = self._epoch(epoch, params, ref, view, hp)
            self.reports_.append(report)
        self.params_ = params
        self.ref_params_ = ref
        return self

    def predict(self, observations: list[Observation]) -> list[MultiDiscreteAction]:
        """Greedy actions along an observation sequence (after fit)."""
        require(hasattr(self, "params_"), "estimator is not fitted")
        z = initial_latent()
        out = []
        for obs in observations:
            z = encode_step(self.params_, z, obs_to_input(obs))
            _, action, _ = act(self.params_, z, greedy=True)
            out.append(action)
        return out

    def _policy_opt_kind(self) -> str:
        return "adam"

    def _report(self, epoch: int, view: TrainingView, **kw) -> LossReport:
        return LossReport(method=self.method_name, epoch=epoch,
                          n_intervened=view.n_intervened,
                          n_non_intervened=view.n_non_intervened, **kw)

    def _epoch(self, epoch, params, ref, view, hp):
        raise NotImplementedError


class SparP(HitlRetrainer):
    """Direct statewise preference: BT on policy joint log-probs (m=1 pairs)."""

    method_name = "SPAR-P"

    def _epoch(self, epoch, params, ref, view, hp):
        loss, grads = losses.spar_p_loss(params, view.pair_latents, view.preferred, view.rejected)
        if grads:
            params = self._policy_opt.apply(params, grads)
        return params, self._report(epoch, view, direct=loss)


class SparR(HitlRetrainer):
    """Preference-trained reward head plus trust-region policy updates.

    The learning signal originates entirely in the preference pairs, so a
    zero-intervention buffer performs no update at all.
    """

    method_name = "SPAR-R"

    def _epoch(self, epoch, params, ref, view, hp):
        if not view.pairs:
            return params, self._report(epoch, view)
        bt_loss, bt_grads = losses.spar_r_loss(params, view.pair_latents, view.preferred, view.rejected)
        params = self._reward_opt.apply(params, bt_grads)
        adv = view.rl_advantages(params, hp)
        rl = losses.focops_loss(params, ref, view.rl_latents, view.rl_actions, adv, hp.eta, hp.lam)
        if rl.grads:
            params = self._policy_opt.apply(params, rl.grads)
        return params, self._report(epoch, view, reward_bt=bt_loss, rl=rl.loss,
                                    gate_rejected=rl.rejected, pair_margin=view.pair_margin(params))


class SparH(HitlRetrainer):
    """Hybrid: direct BT on pairs + alpha * FOCOPS on non-intervened steps,
    with the reward head refreshed by BT before advantages each epoch."""

    method_name = "SPAR-H"

    def _epoch(self, epoch, params, ref, view, hp):
        bt_loss = 0.0
        if view.pairs:
            bt_loss, bt_grads = losses.spar_r_loss(params, view.pair_latents, view.preferred, view.rejected)
            params = self._reward_opt.apply(params, bt_grads)
        if hp.alpha == 0.0:
            n_rl = len(view.rl_actions)  # placeholder; the surrogate term is skipped
            adv = AdvantageBatch(np.zeros(n_rl), 0.0, 0.0, np.zeros(n_rl))
        else:
            adv = view.rl_advantages(params, hp)
        total, grads, info = losses.spar_h_loss(
            params, ref, view.pair_latents, view.preferred, view.rejected,
            view.rl_latents, view.rl_actions, adv, hp.alpha, hp.eta, hp.lam,
        )
        if grads:
            params = self._policy_opt.apply(params, grads)
        return params, self._report(epoch, view, direct=info["direct"], reward_bt=bt_loss,
                                    rl=info["rl"], gate_rejected=info["gate_rejected"],
                                    pair_margin=view.pair_margin(params))


class SparD(HitlRetrainer):
    """Reference-normalized direct preference (DPO-style); the reference is
    re-snapshotted at each epoch boundary."""

    method_name = "SPAR-D"

    def _epoch(self, epoch, params, ref, view, hp):
        epoch_ref = snapshot(params)
        loss, grads = losses.spar_d_loss(params, epoch_ref, view.pair_latents,
                                         view.preferred, view.rejected, hp.beta)
        if grads:
            params = self._policy_opt.apply(params, grads)
        return params, self._report(epoch, view, direct=loss)


class IWR(HitlRetrainer):
    """Intervention-weighted behavior cloning of executed actions."""

    method_name = "IWR"

    def _epoch(self, epoch, params, ref, view, hp):
        m = np.array(view.all_m, dtype=bool)
        loss, grads, _ = losses.iwr_loss(params, view.all_latents, view.all_actions_exec, m)
        if grads:
            params = self._policy_opt.apply(params, grads)
        return params, self._report(epoch, view, direct=loss)


class HGDagger(HitlRetrainer):
    """Behavior cloning of the overseer on gated (intervened) steps only."""

    method_name = "HG-DAgger"

    def _epoch(self, epoch, params, ref, view, hp):
        loss, grads = losses.hg_dagger_loss(params, view.human_latents_arr, view.human_actions)
        if grads:
            params = self._policy_opt.apply(params, grads)
        return params, self._report(epoch, view, direct=loss)


class COACH(HitlRetrainer):
    """Evaluative per-step ascent on the agent's proposals with binary labels
    f in {-1, zeta}: -1 on intervened steps, the weak positive otherwise.
    Plain SGD, no eligibility traces."""

    method_name = "COACH"

    def _policy_opt_kind(self) -> str:
        return "sgd"

    def _epoch(self, epoch, params, ref, view, hp):
        total = 0.0
        for i, (a_agent, m) in enumerate(zip(view.all_actions_agent, view.all_m)):
            f = -1.0 if m == 1 else hp.zeta
            loss, grads = losses.coach_step_grads(params, view.all_latents[i], a_agent, f)
            params = self._policy_opt.apply(params, grads)
            total += loss
        return params, self._report(epoch, view, direct=total)


METHODS: dict[str, type[HitlRetrainer]] = {
    cls.method_name: cls for cls in (SparP, SparR, SparD, SparH, IWR, HGDagger, COACH)
}


def make_method(name: str, hp: HyperParams | None = None) -> HitlRetrainer:
    if name not in METHODS:
        raise UsageError(f"unknown method {name!r}; choose from {sorted(METHODS)}")
    hp = hp or HyperParams()
    return METHODS[name](alpha=hp.alpha, beta=hp.beta, gamma=hp.gamma, eta=hp.eta,
                         lam=hp.lam, epochs=hp.epochs, k_horizon=hp.k_horizon,
                         zeta=hp.zeta, lr=hp.lr, eps=hp.eps)


def retrain(
    method: str,
    buffer: ReplayBuffer,
    params: NetParams,
    hp: HyperParams | None = None,
    latent_cache: LatentCache | None = None,
) -> tuple[NetParams, list[LossReport]]:
    """Run E epochs of one method over the full cumulative buffer."""
    est = make_method(method, hp)
    est.fit(buffer, init=params, latent_cache=latent_cache)
    return est.params_, est.reports_
