import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

import uaretain.train as train_mod
from uaretain import data
from uaretain.calib import auroc, calibration_report
from uaretain.cli import main
from uaretain.infer import idk_curve, read_predictions
from uaretain.train import SWEEP_GRID, TrainResult, load_checkpoint

SMALL = {
    "synth": {"n_records": 60, "T": 4, "F": 3, "seed": 2},
    "train": {"max_epochs": 2, "batch_size": 16, "embed_dim": 4, "hidden": 4, "val_samples": 2},
    "samples": 5,
}


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture
def generated(tmp_path, config):
    out = tmp_path / "gen"
    assert main(["gen", "--config", str(config), "--out", str(out)]) == 0
    return out / "data.csv"


def _train(config, data_path, out, variant="ua"):
    assert main(["train", "--config", str(config), "--data", str(data_path), "--out", str(out),
                 "--variant", variant]) == 0
    return out / "checkpoint.json"


@pytest.fixture
def trained(tmp_path, config, generated):
    return _train(config, generated, tmp_path / "model")


class TestGen:
    def test_round_trip(self, generated):
        loaded = data.read_relevance(data.load_csv(generated), generated.with_suffix("").with_suffix(
            ".relevance.csv"))
        ref = data.gen_synthetic(data.SynthConfig(**SMALL["synth"]))
        assert loaded.ids() == ref.ids()
        for a, b in zip(loaded.records, ref.records):
            assert np.array_equal(a.x, b.x) and np.array_equal(a.mask, b.mask) and a.label == b.label
            assert np.array_equal(a.relevance, b.relevance)

    def test_byte_identical(self, tmp_path, config, generated):
        again = tmp_path / "again"
        assert main(["gen", "--config", str(config), "--out", str(again)]) == 0
        for name in ("data.csv", "data.features.txt", "data.relevance.csv"):
            assert (again / name).read_bytes() == (generated.parent / name).read_bytes()

    def test_seed_flag_changes_output(self, tmp_path, config, generated):
        other = tmp_path / "other"
        assert main(["gen", "--config", str(config), "--seed", "99", "--out", str(other)]) == 0
        assert (other / "data.csv").read_bytes() != generated.read_bytes()

    def test_empty_dataset(self, tmp_path):
        cfg = tmp_path / "empty.json"
        cfg.write_text(json.dumps({"synth": {"n_records": 0}}))
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 0
        assert (tmp_path / "e" / "data.csv").read_text() == "record_id,timestep,feature,value,label\n"

    def test_env_output_dir(self, tmp_path, config, monkeypatch):
        monkeypatch.setenv("UARETAIN_OUT", str(tmp_path / "env"))
        assert main(["gen", "--config", str(config)]) == 0
        assert (tmp_path / "env" / "data.csv").is_file()


class TestTrain:
    def test_reproducible_bytes(self, tmp_path, config, generated, trained):
        again = _train(config, generated, tmp_path / "again")
        assert again.read_bytes() == trained.read_bytes()
        assert (tmp_path / "again" / "history.csv").read_bytes() == (trained.parent / "history.csv").read_bytes()

    @pytest.mark.parametrize("variant,tag", [("da", "DA"), ("ua-plus", "UA_PLUS")])
    def test_variant_tag(self, tmp_path, config, generated, variant, tag):
        ckpt = _train(config, generated, tmp_path / variant, variant)
        assert json.loads(ckpt.read_text())["variant"] == tag
        assert load_checkpoint(ckpt).params.variant.value == tag

    def test_input_not_mutated(self, tmp_path, config, generated):
        before = _digest(generated)
        _train(config, generated, tmp_path / "m")
        assert _digest(generated) == before

    def test_history_rows(self, trained):
        rows = list(csv.DictReader((trained.parent / "history.csv").open()))
        assert [r["epoch"] for r in rows] == ["1", "2"]


class TestSweep:
    def test_small_grid(self, tmp_path, config, generated):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"learning_rate": [1e-2, 1e-3], "dropout_rate": [0.1, 0.5]}))
        out = tmp_path / "sweep"
        assert main(["sweep", "--config", str(config), "--data", str(generated), "--grid", str(grid),
                     "--out", str(out), "--variant", "da"]) == 0
        rows = list(csv.DictReader((out / "sweep.csv").open()))
        assert len(rows) == 4
        best = json.loads((out / "sweep_best.json").read_text())
        assert best["best_val_auroc"] == max(float(r["best_val_auroc"]) for r in rows)

    def test_full_grid_enumeration(self, tmp_path, config, generated, monkeypatch):
        seen = []

        def fake_train(dataset, variant, cfg):
            seen.append((cfg.batch_size, cfg.learning_rate, cfg.l2_lambda, cfg.dropout_rate))
            return TrainResult(None, [], 1, cfg.learning_rate * cfg.batch_size)

        monkeypatch.setattr(train_mod, "train", fake_train)
        out = tmp_path / "full"
        assert main(["sweep", "--config", str(config), "--data", str(generated), "--out", str(out)]) == 0
        expected = np.prod([len(v) for v in SWEEP_GRID.values()])
        assert len(seen) == len(set(seen)) == expected == 336
        best = json.loads((out / "sweep_best.json").read_text())
        assert (best["best_batch_size"], best["best_learning_rate"]) == (256, 1e-2)

    def test_unknown_grid_key(self, tmp_path, config, generated, capsys):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"momentum": [0.9]}))
        assert main(["sweep", "--config", str(config), "--data", str(generated), "--grid", str(grid),
                     "--out", str(tmp_path / "s")]) == 1
        assert "unknown sweep options" in capsys.readouterr().err


class TestEval:
    @pytest.fixture
    def evaluated(self, tmp_path, config, generated, trained):
        out = tmp_path / "eval"
        assert main(["eval", "--config", str(config), "--checkpoint", str(trained), "--data", str(generated),
                     "--out", str(out)]) == 0
        return out

    def test_rows_match_test_split(self, evaluated):
        ids, _, dists = read_predictions(evaluated / "predictions.csv")
        assert len(ids) == SMALL["synth"]["n_records"] // 10
        assert all(d.S == SMALL["samples"] for d in dists)

    def test_metrics_keys(self, evaluated):
        doc = json.loads((evaluated / "metrics.json").read_text())
        assert {"auroc", "ece", "n", "n_bins", "variant", "S"} <= set(doc)
        text = (evaluated / "metrics.txt").read_text().splitlines()
        assert f"auroc: {doc['auroc']!r}" in text

    def test_metrics_recomputed_from_dump(self, evaluated):
        _, labels, dists = read_predictions(evaluated / "predictions.csv")
        doc = json.loads((evaluated / "metrics.json").read_text())
        means = [float(np.mean(d.samples)) for d in dists]
        assert abs(auroc(means, labels) - doc["auroc"]) < 1e-12
        assert abs(calibration_report(means, labels, doc["n_bins"]).ece - doc["ece"]) < 1e-12

    def test_reproducible(self, tmp_path, config, generated, trained, evaluated):
        out = tmp_path / "eval2"
        assert main(["eval", "--config", str(config), "--checkpoint", str(trained), "--data", str(generated),
                     "--out", str(out)]) == 0
        for name in ("predictions.csv", "metrics.json", "metrics.txt", "reliability.csv"):
            assert (out / name).read_bytes() == (evaluated / name).read_bytes()

    def test_wrong_dataset(self, tmp_path, trained, capsys):
        cfg = tmp_path / "other.json"
        cfg.write_text(json.dumps({"synth": {"n_records": 30, "T": 4, "F": 3}}))
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        code = main(["eval", "--checkpoint", str(trained), "--data", str(tmp_path / "o" / "data.csv"),
                     "--out", str(tmp_path / "x")])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ") and err.count("\n") == 1


class TestIdk:
    @pytest.fixture
    def dump(self, tmp_path, config, generated, trained):
        out = tmp_path / "eval"
        main(["eval", "--config", str(config), "--checkpoint", str(trained), "--data", str(generated),
              "--split", "all", "--out", str(out)])
        return out / "predictions.csv"

    def test_curve_rows_equal_thresholds(self, tmp_path, dump):
        out = tmp_path / "idk"
        assert main(["idk", "--predictions", str(dump), "--thresholds", "0.5,0.01,0.1", "--out", str(out)]) == 0
        rows = list(csv.DictReader((out / "idk_curve.csv").open()))
        assert [float(r["threshold"]) for r in rows] == [0.5, 0.1, 0.01]

    def test_ratios_rederived_from_dump(self, tmp_path, dump):
        out = tmp_path / "idk"
        assert main(["idk", "--predictions", str(dump), "--out", str(out)]) == 0
        raw = list(csv.reader(dump.open()))[1:]
        for row in csv.DictReader((out / "idk_curve.csv").open()):
            t = float(row["threshold"])
            n_ok = n_bad = 0
            for rec in raw:
                label, mean, std = int(rec[1]), float(rec[-2]), float(rec[-1])
                if std <= t:
                    if (mean >= 0.5) == (label == 1):
                        n_ok += 1
                    else:
                        n_bad += 1
            assert float(row["correct_ratio"]) == n_ok / len(raw)
            assert float(row["incorrect_ratio"]) == n_bad / len(raw)

    def test_breakdown_document(self, tmp_path, dump):
        out = tmp_path / "idk"
        assert main(["idk", "--predictions", str(dump), "--target-correct", "0.4", "--out", str(out)]) == 0
        doc = json.loads((out / "idk_breakdown.json").read_text())
        _, labels, dists = read_predictions(dump)
        deferred = sum(d.std > doc["threshold"] for d in dists)
        assert doc["idk_fp"] + doc["idk_fn"] + doc["idk_tp"] + doc["idk_tn"] == deferred
        points = idk_curve(dists, labels, [doc["threshold"]])
        assert points[0].correct_ratio == doc["correct_ratio"] <= 0.4

    def test_empty_threshold_list(self, tmp_path, dump, capsys):
        assert main(["idk", "--predictions", str(dump), "--thresholds", " , ", "--out", str(tmp_path / "i")]) == 1
        assert "empty threshold" in capsys.readouterr().err


class TestAttn:
    def test_da_report(self, tmp_path, config, generated):
        ckpt = _train(config, generated, tmp_path / "da", "da")
        out = tmp_path / "attn"
        assert main(["attn", "--config", str(config), "--checkpoint", str(ckpt), "--data", str(generated),
                     "--ids", "r00,r07", "--out", str(out)]) == 0
        b_out = float(load_checkpoint(ckpt).params["b_out"])
        for rid in ("r00", "r07"):
            doc = json.loads((out / f"attn_{rid}.json").read_text())
            assert np.all(np.array(doc["mean"]["sd_e"]) == 0) and np.all(np.array(doc["mean"]["sd_d"]) == 0)
            for s in doc["samples"]:
                assert abs(np.sum(s["contribution"]) - (s["logit"] - b_out)) < 1e-9
            assert 0.0 <= doc["attention_match"]["sensitivity"] <= 1.0
        summary = json.loads((out / "attention_match.json").read_text())
        assert summary["n_records"] == 2

    def test_unknown_id(self, tmp_path, config, generated, trained, capsys):
        code = main(["attn", "--config", str(config), "--checkpoint", str(trained), "--data", str(generated),
                     "--ids", "nope", "--out", str(tmp_path / "a")])
        assert code == 1
        assert "nope" in capsys.readouterr().err


class TestConfig:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"sample": 3}))
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert "unknown config keys" in err and err.count("\n") == 1

    def test_invalid_value_caught_before_work(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"train": {"dropout_rate": 1.0}}))
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "never")]) == 1
        assert not (tmp_path / "never").exists()

    def test_bad_flag_exits_nonzero(self):
        with pytest.raises(SystemExit) as info:
            main(["train", "--variant", "bogus", "--data", "x"])
        assert info.value.code != 0

    def test_console_entry_point(self, tmp_path, config):
        res = subprocess.run([sys.executable, "-m", "uaretain.cli", "gen", "--config", str(config), "--out",
                              str(tmp_path / "sub")], capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        assert (tmp_path / "sub" / "data.csv").is_file()

    def test_missing_data_file(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 1
        assert "no such data file" in capsys.readouterr().err
