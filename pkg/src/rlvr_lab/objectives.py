"""Group-level losses, scores, advantages and KL estimates.

Everything here is a pure function of per-rollout log-probabilities and
rewards. Each loss returns its exact gradient with respect to the current
policy's sequence log-probabilities, so the trainer only has to pull that
vector back through the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

REWARD_GRID = 0.05
GRPO_EPS = 1e-6

MARGIN_MODES = ("reward_scaled", "constant", "none")
OBJECTIVES = ("mnce", "softmax", "pairwise_random", "pairwise_all", "grpo", "dapo_pg", "group_dpo")
CONTRASTIVE = ("mnce", "softmax", "pairwise_random", "pairwise_all", "group_dpo")


class ObjectiveError(ValueError):
    pass


@dataclass
class RolloutRecord:
    tokens: list[int]
    reward: float
    logprob_old: float
    token_logprobs_old: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass
class RolloutGroup:
    prompt_id: str
    records: list[RolloutRecord]
    r_max: float
    positive_indices: list[int]
    negative_indices: list[int]
    rho: float

    @classmethod
    def from_records(cls, prompt_id: str, records: list[RolloutRecord]) -> "RolloutGroup":
        r_max, pos, neg, rho = partition_group([r.reward for r in records])
        return cls(prompt_id, records, r_max, pos, neg, rho)

    @property
    def K(self) -> int:
        return len(self.records)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records])

    @property
    def logprob_old(self) -> np.ndarray:
        return np.array([r.logprob_old for r in self.records])


@dataclass(frozen=True)
class ObjectiveConfig:
    beta: float = 0.1
    alpha: float = 0.5
    margin_mode: str = "reward_scaled"
    objective: str = "mnce"

    def __post_init__(self):
        if self.beta <= 0:
            raise ObjectiveError("beta must be > 0")
        if self.alpha < 0:
            raise ObjectiveError("alpha must be >= 0")
        if self.margin_mode not in MARGIN_MODES:
            raise ObjectiveError(f"margin_mode must be one of {MARGIN_MODES}")
        if self.objective not in OBJECTIVES:
            raise ObjectiveError(f"objective must be one of {OBJECTIVES}")

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.margin_mode == "none" else self.alpha


@dataclass
class GroupLoss:
    """Loss value plus its gradient w.r.t. each rollout's log pi_theta.

    For token-level objectives ``token_grads`` holds the per-token gradient and
    ``grad_wrt_logprob_theta`` its per-rollout row sums.
    """

    value: float
    grad_wrt_logprob_theta: np.ndarray
    per_positive_values: list[float] = field(default_factory=list)
    token_grads: list[np.ndarray] | None = None


def quantize_reward(r: float) -> float:
    return round(round(r / REWARD_GRID) * REWARD_GRID, 10)


def partition_group(rewards: Sequence[float]) -> tuple[float, list[int], list[int], float]:
    """Split a group into max-reward positives and the remaining negatives.

    Rewards are snapped to a 0.05 grid before comparison. Indices are 0-based.
    """
    if len(rewards) == 0:
        raise ObjectiveError("empty group")
    q = [quantize_reward(float(r)) for r in rewards]
    r_max = max(q)
    pos = [i for i, r in enumerate(q) if r == r_max]
    neg = [i for i, r in enumerate(q) if r != r_max]
    return r_max, pos, neg, len(pos) / len(q)


def margin(r_max: float, reward: float, config: ObjectiveConfig) -> float:
    r_max_q, reward_q = quantize_reward(r_max), quantize_reward(reward)
    if reward_q > r_max_q:
        raise ObjectiveError("reward exceeds group max")
    if config.margin_mode == "none":
        return 0.0
    if config.margin_mode == "constant":
        return 0.0 if reward_q == r_max_q else 1.0
    return r_max_q - reward_q


def score(logprob_theta: float, logprob_old: float, margin_value: float,
          config: ObjectiveConfig) -> float:
    return config.beta * (logprob_theta - logprob_old) + config.effective_alpha * margin_value


def base_score(logprob_theta: float, logprob_old: float, config: ObjectiveConfig) -> float:
    """Log-ratio score without the margin shift."""
    return config.beta * (logprob_theta - logprob_old)


def group_margins(group: RolloutGroup, config: ObjectiveConfig) -> np.ndarray:
    return np.array([margin(group.r_max, r.reward, config) for r in group.records])


def group_scores(group: RolloutGroup, logprob_theta: np.ndarray,
                 config: ObjectiveConfig) -> np.ndarray:
    return (config.beta * (logprob_theta - group.logprob_old)
            + config.effective_alpha * group_margins(group, config))


def _check_k(group: RolloutGroup, logprob_theta: np.ndarray) -> np.ndarray:
    logprob_theta = np.asarray(logprob_theta, dtype=np.float64)
    if logprob_theta.shape != (group.K,):
        raise ObjectiveError(
            f"logprob vector has shape {logprob_theta.shape}, group has K={group.K}"
        )
    return logprob_theta


def _contrast(s: np.ndarray, positives: list[int],
              normalizers: list[np.ndarray]) -> tuple[float, np.ndarray, list[float]]:
    """Mean over positives of -log softmax(s[norm])[p], with gradient w.r.t. s."""
    grad = np.zeros_like(s)
    per_pos = []
    w = 1.0 / len(positives)
    for p, idx in zip(positives, normalizers):
        z = s[idx]
        zmax = z.max()
        e = np.exp(z - zmax)
        tot = e.sum()
        per_pos.append(float(zmax + np.log(tot) - s[p]))
        grad[idx] += w * (e / tot)
        grad[p] -= w
    return float(np.mean(per_pos)), grad, per_pos


def mnce_loss(group: RolloutGroup, logprob_theta: np.ndarray,
              config: ObjectiveConfig) -> GroupLoss:
    """Each positive contrasted against itself plus every negative."""
    logprob_theta = _check_k(group, logprob_theta)
    if not group.negative_indices:
        return GroupLoss(0.0, np.zeros(group.K), [0.0] * len(group.positive_indices))
    s = group_scores(group, logprob_theta, config)
    neg = set(group.negative_indices)
    norms = [np.array([i for i in range(group.K) if i == p or i in neg])
             for p in group.positive_indices]
    value, gs, per_pos = _contrast(s, group.positive_indices, norms)
    return GroupLoss(value, config.beta * gs, per_pos)


def softmax_contrastive_loss(group: RolloutGroup, logprob_theta: np.ndarray,
                             config: ObjectiveConfig) -> GroupLoss:
    """Each positive contrasted against the whole group, other positives included."""
    logprob_theta = _check_k(group, logprob_theta)
    if not group.negative_indices:
        return GroupLoss(0.0, np.zeros(group.K), [0.0] * len(group.positive_indices))
    s = group_scores(group, logprob_theta, config)
    everyone = np.arange(group.K)
    norms = [everyone for _ in group.positive_indices]
    value, gs, per_pos = _contrast(s, group.positive_indices, norms)
    return GroupLoss(value, config.beta * gs, per_pos)


def _log_sigmoid(x: float) -> float:
    return -float(np.logaddexp(0.0, -x))


def _sigmoid(x: float) -> float:
    return float(np.exp(-np.logaddexp(0.0, -x)))


def pairwise_dpo_loss(group: RolloutGroup, logprob_theta: np.ndarray,
                      config: ObjectiveConfig, pair_mode: str = "all",
                      rng_seed: int = 0) -> GroupLoss:
    """DPO-style -log sigmoid(s_p - s_n) over one random pair or all pairs."""
    logprob_theta = _check_k(group, logprob_theta)
    if not group.negative_indices:
        raise ObjectiveError("no negatives for pairwise objective")
    if pair_mode == "random":
        rng = np.random.default_rng(rng_seed)
        p = group.positive_indices[int(rng.integers(len(group.positive_indices)))]
        n = group.negative_indices[int(rng.integers(len(group.negative_indices)))]
        pairs = [(p, n)]
    elif pair_mode == "all":
        pairs = [(p, n) for p in group.positive_indices for n in group.negative_indices]
    else:
        raise ObjectiveError(f"unknown pair_mode {pair_mode!r}")
    s = group_scores(group, logprob_theta, config)
    gs = np.zeros(group.K)
    total = 0.0
    w = 1.0 / len(pairs)
    for p, n in pairs:
        gap = s[p] - s[n]
        total -= _log_sigmoid(gap)
        sig = _sigmoid(-gap)
        gs[p] -= w * sig
        gs[n] += w * sig
    value = total / len(pairs)
    per_pos = []
    for p in group.positive_indices:
        mine = [(a, b) for a, b in pairs if a == p]
        if mine:
            per_pos.append(float(np.mean([-_log_sigmoid(s[a] - s[b]) for a, b in mine])))
    return GroupLoss(value, config.beta * gs, per_pos)


def grpo_advantage(rewards: Sequence[float], eps: float = GRPO_EPS) -> np.ndarray:
    """Within-group standardized reward (population std)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ObjectiveError("grpo_advantage needs at least 2 rewards")
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + eps)


def clipped_pg_loss(group: RolloutGroup,
                    logprob_theta_tokens: Sequence[np.ndarray],
                    logprob_old_tokens: Sequence[np.ndarray],
                    advantages: np.ndarray,
                    clip_low: float = 0.2,
                    clip_high: float = 0.2,
                    norm_mode: str = "sequence") -> GroupLoss:
    """PPO-style clipped surrogate with per-token importance ratios."""
    if len(logprob_theta_tokens) != group.K or len(logprob_old_tokens) != group.K:
        raise ObjectiveError("per-token log-prob lists must have one entry per rollout")
    if not (0 < clip_low < 1 and 0 < clip_high < 1):
        raise ObjectiveError("clip_low and clip_high must lie in (0, 1)")
    if norm_mode not in ("sequence", "token"):
        raise ObjectiveError(f"unknown norm_mode {norm_mode!r}")
    advantages = np.asarray(advantages, dtype=np.float64)
    lo, hi = 1.0 - clip_low, 1.0 + clip_high
    total_tokens = sum(len(x) for x in logprob_theta_tokens)
    per_seq, token_grads = [], []
    value = 0.0
    for i in range(group.K):
        new = np.asarray(logprob_theta_tokens[i], dtype=np.float64)
        old = np.asarray(logprob_old_tokens[i], dtype=np.float64)
        if new.shape != old.shape:
            raise ObjectiveError(f"rollout {i}: token log-prob length mismatch")
        A = advantages[i]
        ratio = np.exp(new - old)
        unclipped = ratio * A
        clipped = np.clip(ratio, lo, hi) * A
        obj = np.minimum(unclipped, clipped)
        # gradient flows only where the unclipped branch is selected
        active = unclipped <= clipped
        g = np.where(active, -A * ratio, 0.0)
        if norm_mode == "sequence":
            scale = 1.0 / (group.K * max(len(new), 1))
        else:
            scale = 1.0 / max(total_tokens, 1)
        value += -obj.sum() * scale
        token_grads.append(g * scale)
        per_seq.append(float(-obj.mean()) if len(obj) else 0.0)
    grad = np.array([tg.sum() for tg in token_grads])
    return GroupLoss(float(value), grad, [per_seq[p] for p in group.positive_indices],
                     token_grads)


def kl_estimate(logprob_theta, logprob_old):
    """Single-sample estimate (rho - 1) - log rho of KL(pi_old || pi_theta).

    Works elementwise on arrays. Assumes the sample came from pi_old.
    """
    u = np.asarray(logprob_theta, dtype=np.float64) - np.asarray(logprob_old, dtype=np.float64)
    out = np.expm1(u) - u
    return float(out) if out.ndim == 0 else out


def kl_estimate_grad(logprob_theta, logprob_old):
    """Derivative of :func:`kl_estimate` w.r.t. ``logprob_theta``."""
    u = np.asarray(logprob_theta, dtype=np.float64) - np.asarray(logprob_old, dtype=np.float64)
    return np.expm1(u)


def contrastive_loss(group: RolloutGroup, logprob_theta: np.ndarray,
                     config: ObjectiveConfig, rng_seed: int = 0) -> GroupLoss:
    """Dispatch to the contrastive objective named in ``config``."""
    name = config.objective
    if name == "mnce":
        return mnce_loss(group, logprob_theta, config)
    if name == "softmax":
        return softmax_contrastive_loss(group, logprob_theta, config)
    if name == "pairwise_random":
        return pairwise_dpo_loss(group, logprob_theta, config, "random", rng_seed)
    if name in ("pairwise_all", "group_dpo"):
        return pairwise_dpo_loss(group, logprob_theta, config, "all", rng_seed)
    raise ObjectiveError(f"{name!r} is not a contrastive objective")


def rence_loss(group: RolloutGroup, logprob_theta: np.ndarray, kl_coef: float,
               config: ObjectiveConfig, rng_seed: int = 0) -> GroupLoss:
    """Negative per-prompt objective: contrastive loss + kl_coef * mean KL estimate."""
    logprob_theta = _check_k(group, logprob_theta)
    base = contrastive_loss(group, logprob_theta, config, rng_seed)
    if kl_coef == 0.0:
        return base
    old = group.logprob_old
    kl = kl_estimate(logprob_theta, old)
    value = base.value + kl_coef * float(np.mean(kl))
    grad = base.grad_wrt_logprob_theta + kl_coef * kl_estimate_grad(logprob_theta, old) / group.K
    return GroupLoss(value, grad, base.per_positive_values)
