"""Command-line surface: outputs, determinism and exit codes."""

import json

import pytest

from miv import formats as fm
from miv.cli import main

TINY = {
    "data": {"source": "synthetic", "synthetic": {"n_patients": 40, "latent_dim": 8,
                                                  "view_noise": 0.3}},
    "split": {"k": 3},
    "grid": [{"kind": "mean"}, {"kind": "dba_l1", "heads": 2}],
    "model": {"hidden": 16, "head_hidden": 8, "model_dim": 16},
    "train": {"epochs": 2, "batch_size": 16},
    "simclr": {"total_epochs": 3, "warmup_epochs": 1, "batch_size": 16, "hidden": 16,
               "out_dim": 8, "n_sources": 64},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / "out")}))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


class TestPlan:
    def test_table_and_summary(self, capsys):
        assert run("plan", "--n", 10, "--k", 4) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 16
        assert lines[0] == "0\t1,2,3,4"
        assert lines[-1] == "pairwise=45 bound=12 plan=15"

    def test_writes_file(self, tmp_path, capsys):
        assert run("plan", "--n", 5, "--k", 2, "--out", tmp_path) == 0
        text = (tmp_path / "plan_n5_k2.txt").read_text()
        assert text.splitlines()[0] == "0\t1,2"
        assert "pairwise=10 bound=5 plan=6" in capsys.readouterr().out

    def test_missing_flags(self):
        assert run("plan", "--n", 5) == 1


class TestExitCodes:
    def test_unknown_command(self):
        assert run("frobnicate") == 1

    def test_bad_flag_value(self):
        assert run("synth", "--seed", "x") == 1

    def test_schema_violation(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"train": {"epochs": 99}}')
        assert run("synth", "--config", bad) == 1
        assert "train/epochs" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert run("synth", "--config", tmp_path / "nope.json") == 3

    def test_malformed_embedding_file(self, tmp_path):
        (tmp_path / "e.mive").write_bytes(b"MIVE\x01")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": {"source": "file", "path": str(tmp_path / "e.mive")},
                                   "output_dir": str(tmp_path)}))
        assert run("split", "--config", cfg) == 3

    def test_heads_without_attention(self, config):
        assert run("train", "--config", config, "--heads", 2) == 1


class TestSynth:
    def test_byte_identical_reruns(self, tmp_path, config):
        assert run("synth", "--config", config, "--seed", 7, "--out", tmp_path / "a") == 0
        assert run("synth", "--config", config, "--seed", 7, "--out", tmp_path / "b") == 0
        for name in ("embeddings.mive", "embeddings.mive.manifest"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert run("synth", "--config", config, "--seed", 8, "--out", tmp_path / "c") == 0
        assert (tmp_path / "c" / "embeddings.mive").read_bytes() != \
            (tmp_path / "a" / "embeddings.mive").read_bytes()

    def test_file_source_round_trip(self, tmp_path, config):
        run("synth", "--config", config, "--out", tmp_path / "s")
        cfg = tmp_path / "file.json"
        cfg.write_text(json.dumps({"data": {"source": "file", "input_dim": 8,
                                            "path": str(tmp_path / "s" / "embeddings.mive")},
                                   "split": {"k": 3}, "output_dir": str(tmp_path / "s")}))
        assert run("split", "--config", cfg) == 0
        wrong = tmp_path / "wrong.json"
        wrong.write_text(json.dumps({"data": {"source": "file", "input_dim": 768,
                                              "path": str(tmp_path / "s" / "embeddings.mive")}}))
        assert run("split", "--config", wrong) == 1


class TestPipeline:
    def test_split_train_eval(self, tmp_path, config, capsys):
        out = tmp_path / "out"
        assert run("split", "--config", config) == 0
        plan = fm.load_split(out / "split.json")
        assert plan.k == 3

        assert run("train", "--config", config) == 0
        doc = json.loads((out / "results.json").read_text())
        assert doc["format"] == "miv-results"
        assert [c["label"] for c in doc["configs"]] == ["No attention(mean)", "DBA L1(h=2)"]
        assert sum(len(c["folds"]) for c in doc["configs"]) == 6
        for c in doc["configs"]:
            assert {"val_acc_mean", "val_acc_std", "val_auc_mean", "val_auc_std"} <= set(c["summary"])
            assert c["test"]["tp"] + c["test"]["fp"] + c["test"]["tn"] + c["test"]["fn"] == c["test"]["n"]
            assert all(f["seed"] is not None for f in c["folds"])
        assert "seconds" in json.loads((out / "run_log.json").read_text())
        ckpt = out / "checkpoints" / "dba_l1-h2.ckpt"
        assert ckpt.exists()

        first = (out / "results.json").read_bytes()
        assert run("train", "--config", config) == 0
        assert (out / "results.json").read_bytes() == first

        assert run("eval", "--config", config, "--checkpoint", ckpt) == 0
        ev = json.loads((out / "eval.json").read_text())
        assert ev["attention"] == "DBA L1(h=2)"
        selected = doc["configs"][1]["test"]
        assert ev["test"] == selected

    def test_single_attention_override(self, tmp_path, config):
        assert run("train", "--config", config, "--attention", "vema", "--heads", 2,
                   "--out", tmp_path / "v") == 0
        doc = json.loads((tmp_path / "v" / "results.json").read_text())
        assert [c["label"] for c in doc["configs"]] == ["VEMA(h=2)"]

    def test_pretrain_then_train_on_projections(self, tmp_path, config):
        out = tmp_path / "out"
        assert run("pretrain", "--config", config) == 0
        hist = json.loads((out / "pretrain_history.json").read_text())
        assert len(hist["history"]) == 3
        again = tmp_path / "again"
        assert run("pretrain", "--config", config, "--out", again) == 0
        assert (again / "pretrain_history.json").read_bytes() == \
            (out / "pretrain_history.json").read_bytes()
        assert (again / "head.ckpt").read_bytes() == (out / "head.ckpt").read_bytes()

        cfg = json.loads(open(config).read())
        cfg["data"]["pretrained_head"] = str(out / "head.ckpt")
        cfg["grid"] = [{"kind": "mean"}]
        path = tmp_path / "proj.json"
        path.write_text(json.dumps(cfg))
        assert run("train", "--config", path) == 0

    def test_eval_needs_checkpoint(self, config):
        assert run("eval", "--config", config) == 1

    def test_eval_rejects_head_checkpoint(self, tmp_path, config):
        run("pretrain", "--config", config)
        assert run("eval", "--config", config, "--checkpoint", tmp_path / "out" / "head.ckpt") == 1
