"""Supervised warm start from a deliberately unreliable demonstrator.

RL needs a policy that already emits boxed answers some of the time. This
module fits the policy to demonstrations that are correct only with a
family-dependent probability, wrong-but-boxed otherwise, and sometimes not
boxed at all. The resulting policy solves a fraction of problems, leaving room
for reward-driven training to sharpen it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rlvr_lab import policy as pol
from rlvr_lab.optim import AdamW, clip_grad_norm
from rlvr_lab.tasks import Problem, TokenTable, answer_tokens, canonical_int, default_table

log = logging.getLogger(__name__)

DEFAULT_CORRECT_RATE = {"add": 0.45, "sub": 0.4, "mul_mod": 0.35, "chain": 0.3}


@dataclass
class WarmStartConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 0.0
    correct_rate: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_CORRECT_RATE))
    unboxed_rate: float = 0.25
    max_offset: int = 3
    seed: int = 0


def default_arch(table: TokenTable | None = None, **overrides) -> pol.Arch:
    table = table or default_table()
    kw = dict(mode="neural", vocab_size=len(table), max_len=24, embed_dim=64,
              n_layers=1, hidden_dim=256, pad_id=table.pad_id, eos_id=table.eos_id)
    kw.update(overrides)
    return pol.Arch(**kw)


def demonstration(problem: Problem, rng: np.random.Generator, config: WarmStartConfig,
                  table: TokenTable | None = None) -> list[int]:
    table = table or default_table()
    family = problem.difficulty_tag.split("-")[0]
    truth = canonical_int(problem.answer)
    u = rng.random()
    p_ok = config.correct_rate.get(family, 0.4)
    if u < p_ok:
        value = truth
    else:
        off = int(rng.integers(1, config.max_offset + 1)) * (1 if rng.random() < 0.5 else -1)
        value = truth + off
    toks = answer_tokens(value, table)
    if rng.random() < config.unboxed_rate:
        toks = toks[1:-2] + [table.eos_id]
    return toks


def warm_start(params: pol.PolicyParams, problems: Sequence[Problem],
               config: WarmStartConfig, table: TokenTable | None = None) -> pol.PolicyParams:
    """Teacher-forced maximum likelihood on noisy demonstrations."""
    rng = np.random.default_rng(config.seed)
    opt = AdamW(config.lr, weight_decay=config.weight_decay)
    values = params.values.copy()
    for step in range(config.steps):
        idx = rng.integers(len(problems), size=config.batch_size)
        batch = [problems[i] for i in idx]
        gens = [demonstration(p, rng, config, table) for p in batch]
        cur = pol.PolicyParams(params.arch, values)
        lp, mask, vjp = pol.logprob_with_vjp(cur, [p.prompt_tokens for p in batch], gens)
        n_tok = mask.sum()
        grad = -vjp(np.ones_like(lp)) / n_tok
        grad, _ = clip_grad_norm(grad, 1.0)
        values = opt.step(values, grad)
        if step % 250 == 0:
            log.info("warm start step %d nll/token %.4f", step, -lp.sum() / n_tok)
    return pol.PolicyParams(params.arch, values, meta={"warm_start_steps": config.steps})
