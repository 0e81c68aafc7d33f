from __future__ import annotations

import csv
import json

import pytest

import da3.profiler
import da3.train
from da3.cli import main
from da3.train import GradcheckReport

TINY = ["--arch", "tiny-cnn", "--input-size", "8", "--num-classes", "4"]


def run(tmp_path, *argv):
    return main(["--workdir", str(tmp_path), *argv])


def write_config(tmp_path, name="cfg.json", **kw):
    cfg = {"seed": 1, "epochs": 1, "batch_size": 8,
           "data": {"n_train": 16, "n_test": 8, "image_size": 8}, **kw}
    (tmp_path / name).write_text(json.dumps(cfg))
    return name


class TestAnalyze:
    def test_resnet50_headline(self, tmp_path, capsys):
        assert run(tmp_path, "analyze", "--arch", "resnet50", "--strategy", "full",
                   "--batch", "4", "--res", "224", "224") == 0
        out = capsys.readouterr().out
        mb = float(out.split("headline: full activation ")[1].split(" MB")[0])
        assert abs(mb - 343.76) <= 0.2 * 343.76
        assert "batch=4" in out and "resolution=224x224" in out and "policy=paper" in out

    def test_bias_only_zero(self, tmp_path, capsys):
        assert run(tmp_path, "analyze", "--arch", "resnet50", "--strategy", "bias-only") == 0
        assert "activation 0.00 MB" in capsys.readouterr().out

    def test_csv_deterministic(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            assert run(tmp_path, "analyze", *TINY, "--strategy", "da3", "--out", name) == 0
        a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
        assert a == b
        assert a.splitlines()[0] == b"layer_id,kind,param_bytes,grad_bytes,act_bytes,reason"

    def test_model_file(self, tmp_path):
        from da3.layers import build_backbone, save_model

        save_model(build_backbone("resnet-basic", 5, depth=2), tmp_path / "m.json")
        assert run(tmp_path, "analyze", "--model", "m.json", "--out", "r.csv") == 0
        assert (tmp_path / "r.csv").exists()


class TestCompare:
    def test_emits_table(self, tmp_path, capsys):
        assert run(tmp_path, "compare", "--arch", "resnet50", "--strategies", "full", "da3",
                   "--out", "cmp.csv") == 0
        rows = list(csv.DictReader((tmp_path / "cmp.csv").open()))
        assert [r["strategy"] for r in rows] == ["full", "da3"]
        assert 19 <= float(rows[1]["ratio_vs_baseline"]) <= 37


class TestExitCodes:
    @pytest.mark.parametrize("argv", [["frobnicate"], ["analyze", "--strategy", "lora"],
                                      ["analyze", "--model", "missing.json"],
                                      ["analyze", "--batch", "0"],
                                      ["adapt"], []])
    def test_usage(self, tmp_path, argv):
        assert run(tmp_path, *argv) == 1

    def test_bad_json(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        assert run(tmp_path, "analyze", "--model", "m.json") == 1

    def test_missing_workdir(self, tmp_path):
        assert main(["--workdir", str(tmp_path / "nope"), "analyze"]) == 1

    def test_gradcheck_pass(self, tmp_path):
        assert run(tmp_path, "gradcheck", *TINY, "--strategy", "da3", "--probes", "5",
                   "--out", "gc.json") == 0
        assert json.loads((tmp_path / "gc.json").read_text())["passed"] is True

    def test_gradcheck_fail_is_numeric(self, tmp_path, monkeypatch):
        monkeypatch.setattr(da3.train, "gradcheck",
                            lambda *a, **k: GradcheckReport([], 1.0, 1e-4))
        assert run(tmp_path, "gradcheck", *TINY) == 3

    def test_audit(self, tmp_path):
        assert run(tmp_path, "audit", *TINY, "--strategy", "da3", "--out", "audit.json") == 0
        dump = json.loads((tmp_path / "audit.json").read_text())
        assert dump["saved_bytes"] == dump["profiler_saved_bytes"] > 0

    def test_audit_mismatch_is_invariant(self, tmp_path, monkeypatch):
        real = da3.profiler.profile

        def off_by_one(*a, **k):
            rep = real(*a, **k)
            rep.rows[0] = type(rep.rows[0])(**{**rep.rows[0].__dict__,
                                               "act_bytes": rep.rows[0].act_bytes + 1})
            return rep

        monkeypatch.setattr(da3.profiler, "profile", off_by_one)
        assert run(tmp_path, "audit", *TINY) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the overflow is the point
    def test_nan_is_numeric(self, tmp_path):
        cfg = write_config(tmp_path, optimizer="sgd", lr=1e30, schedule="constant", epochs=3)
        assert run(tmp_path, "train", *TINY, "--config", cfg) == 3


class TestRuns:
    def test_train_then_adapt(self, tmp_path):
        cfg = write_config(tmp_path, bn_mode="batch")
        assert run(tmp_path, "train", *TINY, "--config", cfg, "--out", "src") == 0
        for f in ("checkpoint/manifest.json", "model.json", "config.json", "metrics.csv"):
            assert (tmp_path / "src" / f).exists(), f
        acfg = write_config(tmp_path, "adapt.json", strategy="da3",
                            data={"n_train": 16, "n_test": 8, "image_size": 8, "domain": "B"})
        assert run(tmp_path, "adapt", "--model", "src/model.json", "--checkpoint",
                   "src/checkpoint", "--config", acfg, "--out", "tgt") == 0
        gates = (tmp_path / "tgt" / "gates.csv").read_text().splitlines()
        assert gates[0] == "step,block,sparsity" and len(gates) > 1
        header = (tmp_path / "tgt" / "metrics.csv").read_text().splitlines()[0]
        assert header == ("epoch,split,loss,accuracy,lr,mean_gate_sparsity,"
                          "saved_activation_bytes")

    def test_rerun_from_emitted_config_is_bitwise(self, tmp_path):
        cfg = write_config(tmp_path, strategy="full")
        assert run(tmp_path, "train", *TINY, "--config", cfg, "--out", "r1") == 0
        assert run(tmp_path, "train", *TINY, "--config", "r1/config.json", "--out", "r2") == 0
        for f in ("metrics.csv", "checkpoint/manifest.json"):
            assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()

    def test_da3_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DA3_SEED", "42")
        assert run(tmp_path, "train", *TINY, "--config", write_config(tmp_path)) == 0
        assert json.loads((tmp_path / "run" / "config.json").read_text())["seed"] == 42
        monkeypatch.setenv("DA3_SEED", "x")
        assert run(tmp_path, "train", *TINY) == 1

    def test_ablate_smoke_schema(self, tmp_path, capsys):
        cfg = {"seeds": [0], "n_train": 32, "n_test": 32, "image_size": 8}
        (tmp_path / "abl.json").write_text(json.dumps(cfg))
        outputs = []
        for seed in ("0", "1"):
            assert run(tmp_path, "ablate", "--config", "abl.json", "--smoke", "--seeds", seed,
                       "--out", f"ab{seed}") == 0
            outputs.append(list(csv.DictReader((tmp_path / f"ab{seed}" / "ablation.csv").open())))
        assert "ordering" in capsys.readouterr().out
        assert [list(r) for r in outputs[0]] == [list(r) for r in outputs[1]]
        assert [r["arm"] for r in outputs[0]] == ["bias-only", "basic-adaptor", "bias+basic",
                                                   "da3"]
        assert [r["test_accuracy"] for r in outputs[0]] != \
            [r["test_accuracy"] for r in outputs[1]]
