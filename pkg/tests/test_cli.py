import csv
import hashlib
import json

import numpy as np
import pytest

from rlvr_lab import cli
from rlvr_lab import config as cfgmod
from rlvr_lab import policy as pol
from rlvr_lab.tasks import default_table
from rlvr_lab.trainer import TrainConfig, configure_preset


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_DIR_ENV, str(tmp_path / "runs"))
    monkeypatch.chdir(tmp_path)
    assert cli.main(["gen-data", "--out", "train.jsonl", "--count", "60", "--seed", "0"]) == 0
    assert cli.main(["gen-data", "--out", "held.jsonl", "--count", "20", "--seed", "1"]) == 0
    return tmp_path


@pytest.fixture
def init_ckpt(workdir):
    t = default_table()
    arch = pol.Arch("neural", vocab_size=len(t), max_len=16, embed_dim=8, n_layers=1,
                    hidden_dim=16, pad_id=t.pad_id, eos_id=t.eos_id)
    params = pol.init_params(arch, seed=0)
    params.values += np.random.default_rng(0).normal(0, 0.3, params.values.size)
    path = workdir / "init.ckpt"
    pol.save_params(params, path)
    return path


TINY = ["--set", "K=4", "--set", "B=2", "--set", "minibatch_size=2", "--set", "n_update=2",
        "--set", "max_iterations=2", "--set", "filter.t_easy=0.99", "--set", "filter.t_master=1.0",
        "--set", "max_sweeps=100"]


class TestConfigFile:
    def test_render_roundtrip(self):
        for name in ("rence", "grpo", "dapo", "rence_iterative"):
            c = configure_preset(name)
            text = cfgmod.render(c)
            assert cfgmod.apply_overrides(TrainConfig(), cfgmod.parse_pairs(text.splitlines())) == c

    def test_overrides_and_errors(self):
        c = cfgmod.apply_overrides(TrainConfig(), [("filter.t_easy", "0.99"), ("kl.adaptive", "false"),
                                                   ("K", "4")])
        assert c.filter.t_easy == 0.99 and c.kl.adaptive is False and c.K == 4
        with pytest.raises(cfgmod.ConfigError, match="valid keys: objective.beta"):
            cfgmod.apply_overrides(TrainConfig(), [("filter.t_easyy", "1")])
        with pytest.raises(cfgmod.ConfigError, match="bad value"):
            cfgmod.apply_overrides(TrainConfig(), [("K", "eight")])
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.apply_overrides(TrainConfig(), [("filter.t_hard", "0.9")])  # t_hard >= t_easy

    def test_comments_and_blank_lines(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# ablation\n\nobjective.alpha = 0\nB=16\n")
        c = cfgmod.load(p)
        assert c.objective.alpha == 0.0 and c.B == 16


class TestGenData:
    def test_same_flags_same_hash(self, tmp_path):
        for name in ("a.jsonl", "b.jsonl"):
            assert cli.main(["gen-data", "--out", str(tmp_path / name), "--count", "30"]) == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_default_count(self, tmp_path, capsys):
        assert cli.main(["gen-data", "--out", str(tmp_path / "d.jsonl")]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["count"] == 5000 and set(summary["families"]) == {"add", "sub", "mul_mod",
                                                                         "chain"}

    @pytest.mark.parametrize("flags", [["--count", "0"], ["--families", "div"], ["--digits", "x"],
                                       ["--digits", "3-1"]])
    def test_usage_errors(self, tmp_path, flags):
        assert cli.main(["gen-data", "--out", str(tmp_path / "d.jsonl"), *flags]) == 1

    def test_unwritable(self, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path / "missing" / "d.jsonl")]) == 2


class TestBlobHash:
    def test_matches_git_format(self):
        # `git hash-object` of the 6 bytes "hello\n"
        assert cli.blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
        assert cli.blob_hash(b"") == hashlib.sha1(b"blob 0\0").hexdigest()


class TestTrain:
    def test_train_writes_run(self, workdir, init_ckpt, capsys):
        rc = cli.main(["train", "--preset", "rence", "--data", "train.jsonl", "--eval-data",
                       "held.jsonl", "--init", str(init_ckpt), "--run-dir", "r", *TINY])
        assert rc == 0
        run = workdir / "r"
        for name in ("manifest.json", "metrics.jsonl", "config.txt", "final.ckpt", "mastered.jsonl"):
            assert (run / name).exists()
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["status"] == "finished"
        assert manifest["config"] == (run / "config.txt").read_text()
        assert manifest["dataset"]["sha1"] == cli.blob_hash((workdir / "train.jsonl").read_bytes())
        assert manifest["summary"]["iterations"] == 2 and "pass1" in manifest["summary"]["eval"]
        assert cfgmod.load(run / "config.txt").filter.t_easy == 0.99

    def test_default_run_dir_from_env(self, workdir, init_ckpt):
        rc = cli.main(["train", "--preset", "grpo", "--data", "train.jsonl", "--init",
                       str(init_ckpt), *TINY])
        assert rc == 0
        assert (workdir / "runs" / "grpo" / "metrics.jsonl").exists()

    def test_resume(self, workdir, init_ckpt):
        args = ["train", "--data", "train.jsonl", "--init", str(init_ckpt), *TINY,
                "--set", "max_iterations=3", "--set", "checkpoint_every=1"]
        assert cli.main([*args, "--run-dir", "full"]) == 0
        assert cli.main([*args, "--run-dir", "part", "--set", "max_iterations=1"]) == 0
        ck = workdir / "part" / "checkpoints" / "iter_000001"
        assert cli.main([*args, "--run-dir", "part", "--resume", str(ck)]) == 0
        assert ((workdir / "part" / "metrics.jsonl").read_bytes()
                == (workdir / "full" / "metrics.jsonl").read_bytes())

    def test_usage_errors(self, workdir, init_ckpt, tmp_path):
        (tmp_path / "c.txt").write_text("B = 4\n")
        base = ["train", "--data", "train.jsonl", "--init", str(init_ckpt)]
        assert cli.main([*base, "--preset", "rence", "--config", str(tmp_path / "c.txt")]) == 1
        assert cli.main([*base, "--set", "nope=1"]) == 1
        assert cli.main([*base, "--preset", "ppo"]) == 1
        assert cli.main(["train", "--data", "missing.jsonl"]) == 1
        assert cli.main(["train"]) == 1

    def test_insufficient_prompts_is_runtime_failure(self, workdir, init_ckpt):
        rc = cli.main(["train", "--data", "train.jsonl", "--init", str(init_ckpt), "--run-dir",
                       "bad", *TINY, "--set", "filter.t_hard=0.98", "--set", "max_sweeps=1"])
        assert rc == 2
        assert json.loads((workdir / "bad" / "manifest.json").read_text())["status"] == "failed"


class TestEval:
    def test_report(self, workdir, init_ckpt, capsys):
        args = ["eval", "--checkpoint", str(init_ckpt), "--data", "held.jsonl", "--repeats", "2",
                "--json-out", "e.json"]
        assert cli.main(args) == 0
        out = capsys.readouterr().out
        assert "pass@1 (avg@2)" in out
        doc = json.loads((workdir / "e.json").read_text())
        assert doc["splits"][0]["split"] == "all" and len(doc["per_problem"]) == 20
        assert cli.main(args[:-2] + ["--json-out", "f.json"]) == 0
        assert (json.loads((workdir / "f.json").read_text())["splits"] == doc["splits"])

    def test_arch_mismatch(self, workdir, tmp_path):
        arch = pol.Arch("neural", vocab_size=7, max_len=8, embed_dim=4, n_layers=1, hidden_dim=4)
        pol.save_params(pol.init_params(arch), tmp_path / "x.ckpt")
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data",
                         "held.jsonl"]) == 2

    def test_bad_flags(self, workdir, init_ckpt):
        assert cli.main(["eval", "--checkpoint", str(init_ckpt), "--data", "held.jsonl",
                         "--repeats", "0"]) == 1
        assert cli.main(["eval", "--checkpoint", "nope.ckpt", "--data", "held.jsonl"]) == 1


class TestAblate:
    def test_table_and_failed_runs(self, workdir, init_ckpt):
        rc = cli.main(["ablate", "--presets", "mnce", "softmax", "--seeds", "0", "1",
                       "--data", "train.jsonl", "--eval-data", "held.jsonl", "--init",
                       str(init_ckpt), "--run-dir", "abl", *TINY])
        assert rc == 0
        rows = list(csv.DictReader((workdir / "abl" / "comparison.csv").open()))
        assert [(r["preset"], r["seed"]) for r in rows] == [("mnce", "0"), ("mnce", "1"),
                                                            ("softmax", "0"), ("softmax", "1")]
        assert all(r["status"] == "ok" and r["eval_pass1"] for r in rows)
        doc = json.loads((workdir / "abl" / "comparison.json").read_text())
        assert len(doc["rows"]) == 4

        rc = cli.main(["ablate", "--presets", "rence,grpo", "--data", "train.jsonl", "--init",
                       str(init_ckpt), "--run-dir", "abl2", *TINY, "--set", "filter.t_hard=0.98",
                       "--set", "max_sweeps=1"])
        assert rc == 2
        rows = list(csv.DictReader((workdir / "abl2" / "comparison.csv").open()))
        statuses = {r["preset"]: r["status"] for r in rows}
        assert statuses["rence"] == "failed" and "insufficient" in rows[0]["error"]

    def test_empty_preset_list(self, workdir):
        assert cli.main(["ablate", "--presets", "--data", "train.jsonl"]) == 1
        assert cli.main(["ablate", "--data", "train.jsonl"]) == 1


class TestExportMetrics:
    def test_csv(self, workdir, init_ckpt, capsys):
        assert cli.main(["train", "--data", "train.jsonl", "--init", str(init_ckpt), "--run-dir",
                         "r", *TINY]) == 0
        capsys.readouterr()
        assert cli.main(["export-metrics", "--run-dir", "r"]) == 0
        rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
        assert [int(r["iteration"]) for r in rows] == [1, 2]
        assert cli.main(["export-metrics", "--run-dir", "nowhere"]) == 1
