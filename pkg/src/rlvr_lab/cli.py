"""Command-line entry point: ``rlvr-lab <command> [options]``.

Commands
--------
gen-data        write a synthetic arithmetic dataset (JSON lines)
warm-start      supervised warm start of a fresh policy on noisy demonstrations
train           run RL training from a preset or a key=value config file
eval            pass@1 (avg@repeats) of a checkpoint on a dataset
ablate          run several presets on shared data/seeds and tabulate them
export-metrics  convert a run's metrics.jsonl to CSV

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from collections import Counter, defaultdict
from pathlib import Path
from typing import Sequence

from rlvr_lab import config as cfgmod
from rlvr_lab import policy as pol
from rlvr_lab import tasks
from rlvr_lab.data_engine import InsufficientPromptsError
from rlvr_lab.seeding import derive_seed
from rlvr_lab.trainer import (PRESET_ALIASES, PRESET_NAMES, TrainConfig, TrainingDivergedError,
                              configure_preset, evaluate, train)
from rlvr_lab.warmstart import WarmStartConfig, default_arch, warm_start

log = logging.getLogger("rlvr_lab")

RUN_DIR_ENV = "RLVR_LAB_RUN_DIR"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def blob_hash(data: bytes) -> str:
    """Content hash in the format git uses for blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_json_atomic(path: Path, doc: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", "utf-8")
    tmp.replace(path)


def default_run_root() -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "runs"))


def _table(path: str | None) -> tasks.TokenTable:
    return tasks.TokenTable.load(path) if path else tasks.default_table()


def _table_bytes(path: str | None) -> bytes:
    if path:
        return Path(path).read_bytes()
    from importlib import resources
    return resources.files("rlvr_lab").joinpath("token_table.json").read_bytes()


def _load_dataset(path: str, table: tasks.TokenTable) -> list[tasks.Problem]:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset not found: {path}")
    return tasks.load_dataset(p, table)


def _check_arch(params: pol.PolicyParams, table: tasks.TokenTable) -> None:
    a = params.arch
    if a.vocab_size != len(table) or a.pad_id != table.pad_id or a.eos_id != table.eos_id:
        raise pol.PolicyError(
            f"checkpoint arch (vocab {a.vocab_size}, pad {a.pad_id}, eos {a.eos_id}) does not "
            f"match token table (vocab {len(table)}, pad {table.pad_id}, eos {table.eos_id})")


def _family(tag: str) -> str:
    return tag.split("-")[0]


def _resolve_config(preset: str | None, config_file: str | None,
                    overrides: Sequence[str]) -> tuple[TrainConfig, str]:
    if preset and config_file:
        raise UsageError("--preset and --config are mutually exclusive")
    if config_file:
        if not Path(config_file).exists():
            raise UsageError(f"config file not found: {config_file}")
        base, label = cfgmod.load(config_file), f"config:{config_file}"
    else:
        name = preset or "rence"
        try:
            base = configure_preset(name)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        label = name
    try:
        return cfgmod.apply_overrides(base, [cfgmod.parse_assignment(s) for s in overrides]), label
    except cfgmod.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _initial_params(init: str | None, dataset, table, seed: int) -> pol.PolicyParams:
    if init:
        params = pol.load_params(init)
        _check_arch(params, table)
        return params
    log.info("no --init checkpoint given; running the default warm start")
    arch = default_arch(table)
    ws = WarmStartConfig(seed=derive_seed(seed, "warm_start"))
    return warm_start(pol.init_params(arch, derive_seed(seed, "init")), dataset, ws, table)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    families = tuple(f for f in args.families.split(",") if f)
    try:
        lo, _, hi = args.digits.partition("-")
        digits = (int(lo), int(hi or lo))
    except ValueError:
        raise UsageError(f"--digits must look like 1 or 1-2, got {args.digits!r}") from None
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    spec = tasks.TaskSpec(families=families, digits=digits, count=args.count, seed=args.seed)
    try:
        problems = tasks.generate_dataset(spec, _table(args.token_table))
    except tasks.TaskError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    tasks.write_dataset(problems, out)
    counts = Counter(_family(p.difficulty_tag) for p in problems)
    summary = {"path": str(out), "count": len(problems), "families": dict(sorted(counts.items())),
               "distinct_prompts": len({p.prompt_text for p in problems}),
               "sha1": blob_hash(out.read_bytes())}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_warm_start(args) -> int:
    table = _table(args.token_table)
    data = _load_dataset(args.data, table)
    arch = default_arch(table, n_layers=args.layers, embed_dim=args.embed_dim,
                        hidden_dim=args.hidden_dim, max_len=args.max_len)
    ws = WarmStartConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    t0 = time.perf_counter()
    params = warm_start(pol.init_params(arch, derive_seed(args.seed, "init")), data, ws, table)
    pol.save_params(params, args.out)
    print(json.dumps({"checkpoint": str(args.out), "param_count": arch.param_count(),
                      "seconds": round(time.perf_counter() - t0, 1)}))
    return EXIT_OK


def _run_training(config: TrainConfig, label: str, data_path: str, eval_path: str | None,
                  run_dir: Path, init: str | None, resume: str | None,
                  token_table: str | None) -> dict:
    table = _table(token_table)
    dataset = _load_dataset(data_path, table)
    eval_set = _load_dataset(eval_path, table) if eval_path else None
    run_dir.mkdir(parents=True, exist_ok=True)
    config_text = cfgmod.render(config)
    (run_dir / "config.txt").write_text(config_text, "utf-8")
    data_hash = blob_hash(Path(data_path).read_bytes())
    manifest = {
        "run_id": blob_hash((config_text + data_hash).encode())[:12],
        "preset": label,
        "config": config_text,
        "dataset": {"path": str(data_path), "sha1": data_hash},
        "eval_dataset": ({"path": str(eval_path), "sha1": blob_hash(Path(eval_path).read_bytes())}
                         if eval_path else None),
        "token_table_sha1": blob_hash(_table_bytes(token_table)),
        "init": init, "resume": resume,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "finished": None, "status": "running", "summary": None,
    }
    write_json_atomic(run_dir / "manifest.json", manifest)
    t0 = time.perf_counter()
    try:
        initial = (pol.load_params(Path(resume) / "policy.ckpt") if resume
                   else _initial_params(init, dataset, table, config.seed))
        _check_arch(initial, table)
        final, metrics = train(config, dataset, initial, run_dir, eval_set, resume_from=resume)
        summary = {"iterations": len(metrics), "seconds": round(time.perf_counter() - t0, 1)}
        if metrics:
            last = metrics[-1].to_record()
            summary.update(last_iteration=last)
        if eval_set is not None:
            report = evaluate(final, eval_set, config.eval_repeats, config.eval_temperature,
                              derive_seed(config.seed, "final_eval"))
            summary["eval"] = {"pass1": report.mean, "std": report.std,
                               "per_repeat": report.per_repeat}
        manifest.update(status="finished", summary=summary)
        return manifest
    except Exception as exc:
        manifest.update(status="failed", summary={"error": f"{type(exc).__name__}: {exc}"})
        raise
    finally:
        manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        write_json_atomic(run_dir / "manifest.json", manifest)


def cmd_train(args) -> int:
    config, label = _resolve_config(args.preset, args.config, args.set)
    run_dir = Path(args.run_dir) if args.run_dir else default_run_root() / label.replace(":", "_")
    manifest = _run_training(config, label, args.data, args.eval_data, run_dir, args.init,
                             args.resume, args.token_table)
    print(json.dumps({"run_dir": str(run_dir), **(manifest["summary"] or {})}, sort_keys=True))
    return EXIT_OK


def format_report(rows: list[dict], repeats: int) -> str:
    head = f"{'split':<10} {'n':>5}  pass@1 (avg@{repeats})"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['split']:<10} {r['n']:>5}  {100 * r['mean']:.1f} ({100 * r['std']:.1f})")
    return "\n".join(lines)


def eval_rows(report, problems) -> list[dict]:
    """Overall and per-family pass@1: mean and population std over repeats."""
    import numpy as np
    by_split: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(problems):
        by_split[_family(p.difficulty_tag)].append(i)
    rows = [{"split": "all", "n": len(problems), "mean": report.mean, "std": report.std,
             "per_repeat": report.per_repeat}]
    for split in sorted(by_split):
        solved = np.array([report.per_problem[i]["per_repeat"] for i in by_split[split]])
        per_repeat = [float(x) for x in solved.mean(axis=0)]
        rows.append({"split": split, "n": len(by_split[split]), "mean": float(np.mean(per_repeat)),
                     "std": float(np.std(per_repeat)), "per_repeat": per_repeat})
    return rows


def cmd_eval(args) -> int:
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    table = _table(args.token_table)
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    params = pol.load_params(args.checkpoint)
    _check_arch(params, table)
    problems = _load_dataset(args.data, table)
    report = evaluate(params, problems, args.repeats, args.temperature, args.seed)
    rows = eval_rows(report, problems)
    doc = {"checkpoint": str(args.checkpoint), "dataset": str(args.data), "repeats": args.repeats,
           "temperature": args.temperature, "seed": args.seed, "splits": rows}
    if args.json_out:
        write_json_atomic(Path(args.json_out), {**doc, "per_problem": report.per_problem})
    print(format_report(rows, args.repeats))
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


ABLATE_COLUMNS = ["preset", "seed", "status", "eval_pass1", "eval_std", "iterations",
                  "final_mean_reward", "final_kl_coef", "seconds", "run_dir", "error"]


def cmd_ablate(args) -> int:
    presets = [p for item in args.presets for p in item.split(",") if p]
    if not presets:
        raise UsageError("at least one preset is required")
    for p in presets:
        if PRESET_ALIASES.get(p, p) not in PRESET_NAMES:
            raise UsageError(f"unknown preset {p!r}; valid presets: {', '.join(PRESET_NAMES)}")
    root = Path(args.run_dir) if args.run_dir else default_run_root() / "ablate"
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for preset in presets:
        for seed in args.seeds:
            config, label = _resolve_config(preset, None, [*args.set, f"seed={seed}"])
            run_dir = root / f"{preset}_seed{seed}"
            row = {"preset": preset, "seed": seed, "run_dir": str(run_dir)}
            try:
                m = _run_training(config, label, args.data, args.eval_data, run_dir, args.init,
                                  None, args.token_table)
                s = m["summary"]
                last = s.get("last_iteration", {})
                row.update(status="ok", iterations=s["iterations"], seconds=s["seconds"],
                           final_mean_reward=last.get("mean_reward"),
                           final_kl_coef=last.get("kl_coef"),
                           eval_pass1=s.get("eval", {}).get("pass1"),
                           eval_std=s.get("eval", {}).get("std"))
            except Exception as exc:  # a failed run is reported, the sweep goes on
                log.error("run %s seed %d failed: %s", preset, seed, exc)
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, ABLATE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r.get(k, "") for k in ABLATE_COLUMNS})
    (root / "comparison.csv").write_text(buf.getvalue(), "utf-8")
    write_json_atomic(root / "comparison.json", {"rows": rows})
    print(buf.getvalue(), end="")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def cmd_export_metrics(args) -> int:
    path = Path(args.run_dir) / "metrics.jsonl"
    if not path.exists():
        raise UsageError(f"no metrics.jsonl in {args.run_dir}")
    records = [json.loads(ln) for ln in path.read_text("utf-8").splitlines() if ln.strip()]
    columns = list(records[0]) if records else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(records)
    if args.out:
        Path(args.out).write_text(buf.getvalue(), "utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rlvr-lab", description="Contrastive RLVR training lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic arithmetic dataset")
    p.add_argument("--families", default=",".join(tasks.FAMILIES))
    p.add_argument("--digits", default="1", help="operand digit range, e.g. 1 or 1-2")
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--token-table")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("warm-start", help="supervised warm start on noisy demonstrations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=WarmStartConfig.steps)
    p.add_argument("--lr", type=float, default=WarmStartConfig.lr)
    p.add_argument("--batch-size", type=int, default=WarmStartConfig.batch_size)
    p.add_argument("--layers", type=int, default=default_arch().n_layers)
    p.add_argument("--embed-dim", type=int, default=default_arch().embed_dim)
    p.add_argument("--hidden-dim", type=int, default=default_arch().hidden_dim)
    p.add_argument("--max-len", type=int, default=default_arch().max_len)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--token-table")
    p.set_defaults(func=cmd_warm_start)

    def training_flags(p):
        p.add_argument("--data", required=True, help="training dataset (JSON lines)")
        p.add_argument("--eval-data", help="held-out dataset for periodic/final evaluation")
        p.add_argument("--run-dir", help=f"output directory (default under ${RUN_DIR_ENV} or ./runs)")
        p.add_argument("--init", help="initial policy checkpoint (default: run a warm start)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. filter.t_easy=0.99")
        p.add_argument("--token-table")

    p = sub.add_parser("train", help="run RL training")
    p.add_argument("--preset", help=f"one of: {', '.join(PRESET_NAMES)}")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--repeats", type=int, default=4)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-out")
    p.add_argument("--token-table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare presets under shared data and seeds")
    p.add_argument("--presets", nargs="*", default=[], help="preset names (space or comma separated)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-metrics", help="metrics.jsonl -> CSV")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_metrics)

    p = sub.add_parser("show-config", help="print the effective config for a preset")
    p.add_argument("--preset")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_show_config)
    return parser


def cmd_show_config(args) -> int:
    config, _ = _resolve_config(args.preset, args.config, args.set)
    sys.stdout.write(cfgmod.render(config))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"rlvr-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InsufficientPromptsError, TrainingDivergedError, pol.PolicyError, tasks.TaskError,
            OSError, ValueError) as exc:
        print(f"rlvr-lab: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
