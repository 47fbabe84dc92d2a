"""Training loop, presets and evaluation.

One iteration: snapshot the anchor, assemble a filtered batch, run
``n_update`` AdamW steps over minibatches of it, then update the KL
coefficient and emit a metrics record.

Run directory layout::

    run_dir/
      config.txt          effective config (flat key=value)
      manifest.json       written by the CLI
      metrics.jsonl       one IterationMetrics record per line (deterministic)
      timing.jsonl        wall-clock seconds per iteration
      mastered.jsonl      mastered prompt ids
      checkpoints/iter_NNNNNN/{policy.ckpt,optimizer.npz,state.json}
      final.ckpt
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from rlvr_lab import policy as pol
from rlvr_lab.data_engine import (CacheEntry, FilterConfig, InsufficientPromptsError,
                                  PromptPoolState, assemble_batch, write_mastered)
from rlvr_lab.kl_controller import KlControllerState, update_kl_coef
from rlvr_lab.objectives import (CONTRASTIVE, GroupLoss, ObjectiveConfig, RolloutGroup,
                                 RolloutRecord, clipped_pg_loss, contrastive_loss,
                                 grpo_advantage, kl_estimate, kl_estimate_grad, rence_loss)
from rlvr_lab.optim import AdamW, clip_grad_norm
from rlvr_lab.seeding import derive_seed
from rlvr_lab.tasks import Problem, make_problem
from rlvr_lab.tasks import reward as task_reward

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class KlConfig:
    adaptive: bool = True
    kl_coef0: float = 0.001
    target_kl: float = 0.01
    horizon: int = 6400
    clip_width: float = 0.2
    # used when adaptive is off; 0 disables the penalty
    fixed_coef: float = 0.0


@dataclass(frozen=True)
class PgConfig:
    clip_low: float = 0.2
    clip_high: float = 0.2
    norm_mode: str = "sequence"


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    kl: KlConfig = field(default_factory=KlConfig)
    pg: PgConfig = field(default_factory=PgConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    K: int = 8
    B: int = 128
    minibatch_size: int = 8
    n_update: int = 16
    temperature: float = 1.0
    max_iterations: int = 200
    seed: int = 0
    strict_cache: bool = False
    mastery_needs_solve: bool = True
    max_sweeps: int = 10
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_repeats: int = 1
    eval_temperature: float = 0.7

    def __post_init__(self):
        if self.K < 1 or self.B < 1 or self.minibatch_size < 1:
            raise ValueError("K, B and minibatch_size must be positive")
        if self.B % self.minibatch_size:
            raise ValueError("B must be divisible by minibatch_size")
        if self.n_update < 1:
            raise ValueError("n_update must be >= 1")
        if self.pg.norm_mode not in ("sequence", "token"):
            raise ValueError("pg.norm_mode must be 'sequence' or 'token'")


# ---------------------------------------------------------------------------
# presets

PRESET_NAMES = ("rence", "grpo", "dapo", "semi_online_dpo", "rence_no_kl", "rence_no_margin",
                "rence_const_margin", "rence_iterative", "softmax_variant",
                "pairwise_random", "pairwise_all")
PRESET_ALIASES = {"mnce": "rence_no_margin", "softmax": "softmax_variant"}
ITERATIVE_SYNC = 128


def configure_preset(name: str) -> TrainConfig:
    """Desk-scale configuration for a named method or ablation."""
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")
    base = TrainConfig()
    no_kl = KlConfig(adaptive=False, fixed_coef=0.0)
    no_filter = FilterConfig(t_hard=0.0, t_easy=1.0, t_master=1.0)
    zv = FilterConfig(t_hard=0.0, t_easy=0.99, t_master=1.0)
    obj = base.objective
    if name == "rence":
        return base
    if name == "rence_no_kl":
        return replace(base, kl=no_kl)
    if name == "rence_no_margin":
        return replace(base, objective=replace(obj, alpha=0.0))
    if name == "rence_const_margin":
        return replace(base, objective=replace(obj, margin_mode="constant"))
    if name == "rence_iterative":
        factor = ITERATIVE_SYNC // base.n_update
        return replace(base, kl=no_kl, n_update=ITERATIVE_SYNC, B=base.B * factor,
                       max_iterations=max(1, base.max_iterations // factor))
    if name == "softmax_variant":
        return replace(base, objective=replace(obj, objective="softmax", alpha=0.0))
    if name == "pairwise_random":
        return replace(base, objective=replace(obj, objective="pairwise_random", alpha=0.0))
    if name == "pairwise_all":
        return replace(base, objective=replace(obj, objective="pairwise_all", alpha=0.0))
    if name == "semi_online_dpo":
        return replace(base, objective=replace(obj, objective="group_dpo", alpha=0.0),
                       filter=zv, kl=no_kl)
    if name == "grpo":
        return replace(base, objective=replace(obj, objective="grpo", alpha=0.0),
                       filter=no_filter, kl=no_kl, n_update=4,
                       pg=PgConfig(clip_low=0.2, clip_high=0.2, norm_mode="sequence"))
    # dapo
    return replace(base, objective=replace(obj, objective="dapo_pg", alpha=0.0),
                   filter=zv, kl=no_kl,
                   pg=PgConfig(clip_low=0.2, clip_high=0.28, norm_mode="token"))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    per_repeat: list[float]
    mean: float
    std: float
    per_problem: list[dict]

    def to_json(self) -> dict:
        return asdict(self)


def evaluate(params: pol.PolicyParams, eval_dataset: Sequence[Problem], repeats: int = 4,
             temperature: float = 0.7, seed: int = 0, chunk: int = 512) -> EvalReport:
    """pass@1 per repeat (fraction with reward 1), their mean and population std."""
    if not eval_dataset:
        raise ValueError("empty eval set")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    solved = np.zeros((repeats, len(eval_dataset)), dtype=bool)
    for r in range(repeats):
        for start in range(0, len(eval_dataset), chunk):
            part = eval_dataset[start:start + chunk]
            trajs = pol.sample_batch(params, [list(p.prompt_tokens) for p in part], temperature,
                                     derive_seed(seed, "eval", r, start))
            for j, (prob, t) in enumerate(zip(part, trajs)):
                solved[r, start + j] = task_reward(prob, t.gen_tokens).reward == 1.0
    per_repeat = [float(x) for x in solved.mean(axis=1)]
    per_problem = [{"prompt_id": p.prompt_id, "difficulty_tag": p.difficulty_tag,
                    "solved": int(solved[:, i].sum()), "repeats": repeats,
                    "per_repeat": [int(x) for x in solved[:, i]]}
                   for i, p in enumerate(eval_dataset)]
    return EvalReport(per_repeat, float(np.mean(per_repeat)), float(np.std(per_repeat)),
                      per_problem)


# ---------------------------------------------------------------------------
# losses over a minibatch


def group_objective(config: TrainConfig, group: RolloutGroup, token_lp: list[np.ndarray],
                    kl_coef: float, pair_seed: int) -> GroupLoss:
    """Loss for one group; ``token_grads`` is always filled for the pullback."""
    name = config.objective.objective
    seq_lp = np.array([t.sum() for t in token_lp])
    if name in CONTRASTIVE:
        if not group.negative_indices and name in ("pairwise_random", "pairwise_all",
                                                   "group_dpo"):
            gl = GroupLoss(0.0, np.zeros(group.K))
            if kl_coef:
                gl = _add_kl(gl, group, seq_lp, kl_coef)
        else:
            gl = rence_loss(group, seq_lp, kl_coef, config.objective, pair_seed)
        gl.token_grads = [np.full(len(t), g) for t, g in zip(token_lp, gl.grad_wrt_logprob_theta)]
        return gl
    adv = grpo_advantage(group.rewards) if group.K >= 2 else np.zeros(group.K)
    old = [r.token_logprobs_old for r in group.records]
    gl = clipped_pg_loss(group, token_lp, old, adv, config.pg.clip_low, config.pg.clip_high,
                         config.pg.norm_mode)
    if kl_coef:
        klg = kl_coef * kl_estimate_grad(seq_lp, group.logprob_old) / group.K
        gl.value += kl_coef * float(np.mean(kl_estimate(seq_lp, group.logprob_old)))
        gl.token_grads = [tg + k for tg, k in zip(gl.token_grads, klg)]
        gl.grad_wrt_logprob_theta = gl.grad_wrt_logprob_theta + klg * np.array(
            [len(t) for t in token_lp])
    return gl


def _add_kl(gl: GroupLoss, group: RolloutGroup, seq_lp: np.ndarray, kl_coef: float) -> GroupLoss:
    value = gl.value + kl_coef * float(np.mean(kl_estimate(seq_lp, group.logprob_old)))
    grad = gl.grad_wrt_logprob_theta + kl_coef * kl_estimate_grad(seq_lp, group.logprob_old) / group.K
    return GroupLoss(value, grad, gl.per_positive_values)


def _flatten_entries(entries):
    prompts, gens = [], []
    for prob, group in entries:
        for rec in group.records:
            prompts.append(list(prob.prompt_tokens))
            gens.append(rec.tokens)
    return prompts, gens


def _split_rows(values: np.ndarray, mask: np.ndarray) -> list[np.ndarray]:
    return [values[i, mask[i]] for i in range(values.shape[0])]


def batch_loss(config: TrainConfig, params: pol.PolicyParams, entries, kl_coef: float,
               pair_seeds: Sequence[int]) -> float:
    """Mean group loss (no gradient) over ``entries``."""
    prompts, gens = _flatten_entries(entries)
    rows = pol.batch_logprobs(params, prompts, gens)
    total, k0 = 0.0, 0
    for (prob, group), ps in zip(entries, pair_seeds):
        total += group_objective(config, group, rows[k0:k0 + group.K], kl_coef, ps).value
        k0 += group.K
    return total / len(entries)


def minibatch_step(config: TrainConfig, params: pol.PolicyParams, entries, kl_coef: float,
                   pair_seeds: Sequence[int]) -> tuple[float, np.ndarray, float]:
    """Mean loss, its parameter gradient and the mean per-rollout KL estimate."""
    prompts, gens = _flatten_entries(entries)
    lp, mask, vjp = pol.logprob_with_vjp(params, prompts, gens)
    rows = _split_rows(lp, mask)
    weights = np.zeros_like(lp)
    total, kls, k0 = 0.0, [], 0
    m = len(entries)
    for (prob, group), ps in zip(entries, pair_seeds):
        token_lp = rows[k0:k0 + group.K]
        gl = group_objective(config, group, token_lp, kl_coef, ps)
        total += gl.value
        for i, tg in enumerate(gl.token_grads):
            weights[k0 + i, :len(tg)] = tg / m
        kls.extend(kl_estimate(np.array([t.sum() for t in token_lp]), group.logprob_old))
        k0 += group.K
    return total / m, vjp(weights), float(np.mean(kls))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class IterationMetrics:
    iteration: int
    mean_reward: float
    mean_rho: float
    batch_rho: float
    accepted: int
    mastered: int
    rejected: int
    from_cache: int
    rollouts: int
    mastered_total: int
    zero_max_groups: int
    unsolved_uniform: int
    loss: float
    loss_start: float
    loss_end: float
    kl: float
    kl_coef: float
    grad_norm: float
    mean_len: float
    max_len: int
    eval_pass1: float | None = None
    wall_seconds: float = 0.0

    def to_record(self) -> dict:
        """JSON record for metrics.jsonl; wall-clock time is kept out of it."""
        d = asdict(self)
        d.pop("wall_seconds")
        return d


@dataclass
class TrainState:
    params: pol.PolicyParams
    optimizer: AdamW
    kl: KlControllerState | None
    pool: PromptPoolState
    iteration: int = 0
    best_eval: float | None = None


def _kl_coef(state: TrainState, config: TrainConfig) -> float:
    return state.kl.kl_coef if state.kl is not None else config.kl.fixed_coef


def init_state(config: TrainConfig, dataset: Sequence[Problem],
               initial_params: pol.PolicyParams) -> TrainState:
    o = config.optim
    kl = (KlControllerState(config.kl.kl_coef0, config.kl.target_kl, config.kl.horizon,
                            config.kl.clip_width) if config.kl.adaptive else None)
    pool = PromptPoolState(dataset, seed=derive_seed(config.seed, "data"))
    return TrainState(pol.clone_params(initial_params),
                      AdamW(o.lr, o.beta1, o.beta2, o.weight_decay), kl, pool)


def train_iteration(config: TrainConfig, state: TrainState, iteration: int,
                    reward_fn=task_reward, eval_dataset: Sequence[Problem] | None = None
                    ) -> tuple[TrainState, IterationMetrics]:
    t0 = time.perf_counter()
    anchor = pol.clone_params(state.params)
    batch, pool = assemble_batch(
        state.pool, anchor, config.B, config.K, config.temperature,
        derive_seed(config.seed, "rollout", iteration), config.filter, reward_fn,
        anchor_version=iteration, strict_cache=config.strict_cache,
        max_sweeps=config.max_sweeps, iteration=iteration,
        mastery_needs_solve=config.mastery_needs_solve)
    entries = batch.entries
    pair_seeds = [derive_seed(config.seed, "pair", iteration, k) for k in range(len(entries))]
    kl_coef = _kl_coef(state, config)
    loss_start = batch_loss(config, anchor, entries, kl_coef=0.0, pair_seeds=pair_seeds)

    order = np.random.default_rng(derive_seed(config.seed, "shuffle", iteration)).permutation(
        len(entries))
    n_mb = len(entries) // config.minibatch_size
    values = state.params.values
    losses, norms, last_kl = [], [], 0.0
    for step in range(config.n_update):
        j = step % n_mb
        idx = order[j * config.minibatch_size:(j + 1) * config.minibatch_size]
        mb = [entries[i] for i in idx]
        cur = pol.PolicyParams(anchor.arch, values)
        loss, grad, last_kl = minibatch_step(config, cur, mb, kl_coef, [pair_seeds[i] for i in idx])
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDivergedError(
                f"non-finite loss or gradient at iteration {iteration}, step {step}")
        grad, norm = clip_grad_norm(grad, config.optim.grad_clip_norm)
        values = state.optimizer.step(values, grad)
        losses.append(loss)
        norms.append(norm)
    params = pol.PolicyParams(anchor.arch, values, meta={"iteration": iteration})
    loss_end = batch_loss(config, params, entries, kl_coef=0.0, pair_seeds=pair_seeds)

    kl_state = state.kl
    if kl_state is not None:
        kl_state = update_kl_coef(kl_state, max(last_kl, 0.0), config.B * config.K)

    lengths = [r.length for _, g in entries for r in g.records]
    rewards = [r.reward for _, g in entries for r in g.records]
    st = batch.stats
    eval_pass1 = None
    new_state = TrainState(params, state.optimizer, kl_state, pool, iteration, state.best_eval)
    if eval_dataset and config.eval_every and iteration % config.eval_every == 0:
        eval_pass1 = evaluate(params, eval_dataset, config.eval_repeats,
                              config.eval_temperature, derive_seed(config.seed, "eval")).mean
    metrics = IterationMetrics(
        iteration=iteration,
        mean_reward=float(np.mean(rewards)),
        mean_rho=st["rho_sum"] / max(st["examined"], 1),
        batch_rho=float(np.mean([g.rho for _, g in entries])),
        accepted=st["accepted"], mastered=st["mastered"], rejected=st["rejected"],
        from_cache=st["from_cache"], rollouts=st["rollouts"],
        mastered_total=len(pool.mastered), zero_max_groups=st["zero_max_groups"],
        unsolved_uniform=st["unsolved_uniform"],
        loss=float(np.mean(losses)), loss_start=loss_start, loss_end=loss_end,
        kl=last_kl, kl_coef=kl_coef, grad_norm=float(np.mean(norms)),
        mean_len=float(np.mean(lengths)), max_len=int(max(lengths)),
        eval_pass1=eval_pass1, wall_seconds=time.perf_counter() - t0)
    return new_state, metrics


def iterate_training(config: TrainConfig, state: TrainState, reward_fn=task_reward,
                     eval_dataset: Sequence[Problem] | None = None,
                     run_dir: Path | None = None) -> Iterator[tuple[TrainState, IterationMetrics]]:
    """Yield ``(state, metrics)`` after every iteration until ``max_iterations``."""
    for it in range(state.iteration + 1, config.max_iterations + 1):
        try:
            state, m = train_iteration(config, state, it, reward_fn, eval_dataset)
        except TrainingDivergedError:
            if run_dir is not None:
                save_checkpoint(run_dir / "checkpoints" / f"abort_iter_{it:06d}", state)
            raise
        if run_dir is not None:
            with open(run_dir / "metrics.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(m.to_record(), sort_keys=True) + "\n")
            with open(run_dir / "timing.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps({"iteration": it, "wall_seconds": m.wall_seconds}) + "\n")
            write_mastered(run_dir / "mastered.jsonl", state.pool.mastered)
            if m.eval_pass1 is not None and (state.best_eval is None
                                             or m.eval_pass1 > state.best_eval):
                state.best_eval = m.eval_pass1
                pol.save_params(state.params, run_dir / "best.ckpt")
            if config.checkpoint_every and it % config.checkpoint_every == 0:
                save_checkpoint(run_dir / "checkpoints" / f"iter_{it:06d}", state)
        yield state, m


def train(config: TrainConfig, dataset: Sequence[Problem], initial_params: pol.PolicyParams,
          run_dir: str | Path | None = None, eval_dataset: Sequence[Problem] | None = None,
          reward_fn=task_reward, resume_from: str | Path | None = None,
          on_iteration: Callable[[IterationMetrics], None] | None = None,
          ) -> tuple[pol.PolicyParams, list[IterationMetrics]]:
    """Run training; returns final parameters and the metrics stream."""
    if not dataset:
        raise ValueError("empty training dataset")
    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state = load_checkpoint(resume_from, config, dataset)
        if run_path is not None:
            _truncate_metrics(run_path, state.iteration)
    else:
        state = init_state(config, dataset, initial_params)
        if run_path is not None:
            for name in ("metrics.jsonl", "timing.jsonl"):
                (run_path / name).write_text("")
    metrics = []
    for state, m in iterate_training(config, state, reward_fn, eval_dataset, run_path):
        metrics.append(m)
        log.info("iter %d reward %.3f rho %.3f loss %.4f->%.4f kl %.4g coef %.4g",
                 m.iteration, m.mean_reward, m.mean_rho, m.loss_start, m.loss_end, m.kl,
                 m.kl_coef)
        if on_iteration is not None:
            on_iteration(m)
    if run_path is not None:
        pol.save_params(state.params, run_path / "final.ckpt")
    return state.params, metrics


def _truncate_metrics(run_path: Path, iteration: int) -> None:
    for name in ("metrics.jsonl", "timing.jsonl"):
        p = run_path / name
        if p.exists():
            keep = [ln for ln in p.read_text("utf-8").splitlines()
                    if ln.strip() and json.loads(ln)["iteration"] <= iteration]
            p.write_text("".join(ln + "\n" for ln in keep))


# ---------------------------------------------------------------------------
# checkpoints


def _group_to_json(prob: Problem, group: RolloutGroup, version: int) -> dict:
    return {
        "problem": {**prob.to_json()},
        "anchor_version": version,
        "records": [{"tokens": r.tokens, "reward": r.reward, "logprob_old": r.logprob_old,
                     "token_logprobs_old": [float(x) for x in r.token_logprobs_old]}
                    for r in group.records],
    }


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    pol.save_params(state.params, path / "policy.ckpt")
    opt = state.optimizer
    np.savez(path / "optimizer.npz", step_count=np.array(opt.step_count),
             m=opt.m if opt.m is not None else np.zeros(0),
             v=opt.v if opt.v is not None else np.zeros(0))
    pool = state.pool
    doc = {
        "iteration": state.iteration,
        "best_eval": state.best_eval,
        "kl": None if state.kl is None else asdict(state.kl),
        "pool": {"seed": pool.seed, "order": pool.order, "cursor": pool.cursor,
                 "consumed_epochs": pool.consumed_epochs,
                 "mastered": [[k, v] for k, v in pool.mastered.items()],
                 "cache": [_group_to_json(e.problem, e.group, e.anchor_version)
                           for e in pool.cache]},
    }
    tmp = path / "state.json.tmp"
    tmp.write_text(json.dumps(doc, sort_keys=True), "utf-8")
    tmp.replace(path / "state.json")


def load_checkpoint(path: str | Path, config: TrainConfig,
                    dataset: Sequence[Problem]) -> TrainState:
    path = Path(path)
    params = pol.load_params(path / "policy.ckpt")
    o = config.optim
    opt = AdamW(o.lr, o.beta1, o.beta2, o.weight_decay)
    with np.load(path / "optimizer.npz") as z:
        m, v = z["m"], z["v"]
        opt.load_state_dict({"step_count": int(z["step_count"]),
                             "m": m if m.size else None, "v": v if v.size else None})
    doc = json.loads((path / "state.json").read_text("utf-8"))
    p = doc["pool"]
    cache = []
    for c in p["cache"]:
        pr = c["problem"]
        prob = make_problem(pr["prompt_id"], pr["prompt_text"], pr["answer"], pr["difficulty_tag"])
        recs = [RolloutRecord(r["tokens"], r["reward"], r["logprob_old"],
                              np.array(r["token_logprobs_old"], dtype=np.float64))
                for r in c["records"]]
        cache.append(CacheEntry(prob, RolloutGroup.from_records(prob.prompt_id, recs),
                                c["anchor_version"]))
    pool = PromptPoolState(dataset, p["seed"], list(p["order"]), p["cursor"],
                           p["consumed_epochs"], cache, {k: v for k, v in p["mastered"]})
    kl = None if doc["kl"] is None else KlControllerState(**doc["kl"])
    return TrainState(params, opt, kl, pool, doc["iteration"], doc["best_eval"])
