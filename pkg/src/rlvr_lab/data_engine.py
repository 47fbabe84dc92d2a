"""Prompt selection for one training iteration.

Rollouts for each candidate prompt are sampled from the frozen anchor, the
prompt is classified by its positive ratio, and accepted groups go onto a
working stack until ``B`` are available. Overflow is cached for the next call
and mastered prompts are dropped from the dataloader for good.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from rlvr_lab import policy as pol
from rlvr_lab.objectives import RolloutGroup, RolloutRecord
from rlvr_lab.seeding import derive_seed
from rlvr_lab.tasks import Problem, RewardBreakdown
from rlvr_lab.tasks import reward as default_reward

log = logging.getLogger(__name__)

MASTERED, ACCEPT, REJECT = "mastered", "accept", "reject"
DEFAULT_MAX_SWEEPS = 10
# top verifier reward; a uniform group below it was failed by every rollout
SOLVED_REWARD = 1.0

RewardFn = Callable[[Problem, Sequence[int]], "float | RewardBreakdown"]
Sampler = Callable[[pol.PolicyParams, list, float, int], list[pol.Trajectory]]


class InsufficientPromptsError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {json.dumps(diagnostics, sort_keys=True)}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class FilterConfig:
    t_hard: float = 0.0
    t_easy: float = 0.5
    t_master: float = 0.8

    def __post_init__(self):
        if not 0 <= self.t_hard < 1:
            raise ValueError("t_hard must lie in [0, 1)")
        if not 0 < self.t_easy <= 1:
            raise ValueError("t_easy must lie in (0, 1]")
        if not 0 < self.t_master <= 1:
            raise ValueError("t_master must lie in (0, 1]")
        if self.t_hard >= self.t_easy:
            raise ValueError("t_hard must be < t_easy")


def classify_prompt(rho: float, config: FilterConfig) -> str:
    if rho > config.t_master:
        return MASTERED
    if config.t_hard < rho <= config.t_easy:
        return ACCEPT
    return REJECT


@dataclass
class CacheEntry:
    problem: Problem
    group: RolloutGroup
    anchor_version: int


@dataclass
class PromptPoolState:
    dataset: Sequence[Problem]
    seed: int = 0
    order: list[int] = field(default_factory=list)
    cursor: int = 0
    consumed_epochs: int = 0
    cache: list[CacheEntry] = field(default_factory=list)
    # prompt_id -> iteration at which it was mastered (insertion ordered)
    mastered: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.order:
            self.order = self._permutation(0)

    def _permutation(self, epoch: int) -> list[int]:
        rng = np.random.default_rng(derive_seed(self.seed, "epoch", epoch))
        return [int(i) for i in rng.permutation(len(self.dataset))]

    def copy(self) -> "PromptPoolState":
        return PromptPoolState(self.dataset, self.seed, list(self.order), self.cursor,
                               self.consumed_epochs, list(self.cache), dict(self.mastered))

    def active_count(self) -> int:
        return sum(1 for p in self.dataset if p.prompt_id not in self.mastered)

    def draw(self, n: int) -> tuple[list[Problem], int]:
        """Next ``n`` unmastered prompts; returns them with the number of slots scanned."""
        if self.active_count() == 0:
            return [], 0
        out, scanned = [], 0
        while len(out) < n:
            if self.cursor >= len(self.order):
                self.consumed_epochs += 1
                self.order = self._permutation(self.consumed_epochs)
                self.cursor = 0
            prob = self.dataset[self.order[self.cursor]]
            self.cursor += 1
            scanned += 1
            if prob.prompt_id not in self.mastered:
                out.append(prob)
        return out, scanned


@dataclass
class TrainBatch:
    entries: list[tuple[Problem, RolloutGroup]]
    stats: dict = field(default_factory=dict)


def _as_reward(value: "float | RewardBreakdown") -> float:
    return float(value.reward if isinstance(value, RewardBreakdown) else value)


def rollout_groups(anchor: pol.PolicyParams, problems: Sequence[Problem], K: int,
                   temperature: float, seed: int, reward_fn: RewardFn = default_reward,
                   sampler: Sampler = pol.sample_batch) -> list[RolloutGroup]:
    """Sample ``K`` rollouts per problem in one batched call and score them."""
    prompts = [list(p.prompt_tokens) for p in problems for _ in range(K)]
    trajs = sampler(anchor, prompts, temperature, seed)
    groups = []
    for j, prob in enumerate(problems):
        records = []
        for t in trajs[j * K:(j + 1) * K]:
            r = _as_reward(reward_fn(prob, t.gen_tokens))
            records.append(RolloutRecord(list(t.gen_tokens), r, float(t.total_logprob),
                                         np.asarray(t.per_token_logprobs, dtype=np.float64)))
        groups.append(RolloutGroup.from_records(prob.prompt_id, records))
    return groups


def assemble_batch(pool: PromptPoolState, anchor_policy: pol.PolicyParams, B: int, K: int,
                   temperature: float, seed: int, filter: FilterConfig,
                   reward_fn: RewardFn = default_reward, *,
                   anchor_version: int = 0, strict_cache: bool = False,
                   max_sweeps: int = DEFAULT_MAX_SWEEPS, iteration: int = 0,
                   sampler: Sampler = pol.sample_batch,
                   mastery_needs_solve: bool = True) -> tuple[TrainBatch, PromptPoolState]:
    """Fill a batch of ``B`` accepted (prompt, group) pairs.

    The cache is drained first; afterwards candidate batches of ``B`` prompts
    come from the dataloader. Returns the batch and the updated pool state;
    the input state is left untouched.

    A group where every rollout got the same sub-maximal reward also has
    ``rho == 1``. With ``mastery_needs_solve`` (the default) such a prompt is
    only rejected for this call instead of being pruned for good; set it to
    False to prune on ``rho`` alone.
    """
    state = pool.copy()
    stack: list[CacheEntry] = []
    stats = {"accepted": 0, "rejected": 0, "mastered": 0, "from_cache": 0,
             "cache_discarded": 0, "rollouts": 0, "examined": 0,
             "rho_sum": 0.0, "reward_sum": 0.0, "zero_max_groups": 0,
             "unsolved_uniform": 0}
    n_active = state.active_count()
    if n_active == 0 and not state.cache:
        raise InsufficientPromptsError("insufficient trainable prompts",
                                       {"reason": "every prompt is mastered",
                                        "mastered": len(state.mastered)})
    scanned_total = 0
    draw_idx = 0
    while len(stack) < B:
        if state.cache:
            cached, state.cache = state.cache, []
            for entry in cached:
                if strict_cache and entry.anchor_version != anchor_version:
                    stats["cache_discarded"] += 1
                    continue
                stack.append(entry)
                stats["from_cache"] += 1
            continue
        n_active = state.active_count()
        if n_active == 0 or scanned_total >= max_sweeps * max(n_active, 1):
            examined = max(stats["examined"], 1)
            raise InsufficientPromptsError("insufficient trainable prompts", {
                "stack": len(stack), "B": B, "sweeps": scanned_total / max(n_active, 1),
                "acceptance_rate": stats["accepted"] / examined,
                "mastery_rate": stats["mastered"] / examined,
                "rejection_rate": stats["rejected"] / examined,
                "active_prompts": n_active,
            })
        candidates, scanned = state.draw(B)
        scanned_total += scanned
        groups = rollout_groups(anchor_policy, candidates, K, temperature,
                                derive_seed(seed, "draw", draw_idx), reward_fn, sampler)
        draw_idx += 1
        stats["rollouts"] += K * len(candidates)
        for prob, group in zip(candidates, groups):
            stats["examined"] += 1
            stats["rho_sum"] += group.rho
            stats["reward_sum"] += float(group.rewards.mean())
            verdict = classify_prompt(group.rho, filter)
            if verdict == MASTERED and mastery_needs_solve and group.r_max < SOLVED_REWARD:
                verdict = REJECT
                stats["unsolved_uniform"] += 1
            if verdict == MASTERED:
                state.mastered.setdefault(prob.prompt_id, iteration)
                stats["mastered"] += 1
            elif verdict == ACCEPT:
                stack.append(CacheEntry(prob, group, anchor_version))
                stats["accepted"] += 1
                if group.r_max < 1.0:
                    stats["zero_max_groups"] += 1
            else:
                stats["rejected"] += 1
    state.cache = stack[B:]
    stats["cached_overflow"] = len(state.cache)
    stats["sweeps"] = scanned_total / max(n_active, 1)
    entries = [(e.problem, e.group) for e in stack[:B]]
    return TrainBatch(entries, stats), state


def write_mastered(path: str | Path, mastered: dict[str, int]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for pid, it in mastered.items():
            f.write(json.dumps({"prompt_id": pid, "iteration": it}) + "\n")
    tmp.replace(path)


def read_mastered(path: str | Path) -> dict[str, int]:
    out: dict[str, int] = {}
    p = Path(path)
    if not p.exists():
        return out
    for line in p.read_text("utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["prompt_id"]] = int(rec.get("iteration", 0))
    return out
