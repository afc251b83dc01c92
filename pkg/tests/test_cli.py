import json

import numpy as np
import pytest

from cnneelm import dataio
from cnneelm.cli import EXIT_OK, EXIT_USER, SEED_ENV, main
from cnneelm.motion import FrameSequence, save_frame_sequence, scripted_sequence
from cnneelm.numerics import Rng
from cnneelm.serialization import load_model

from .oracles import SCRIPTED_AMPLITUDES, SCRIPTED_PEAK

FAST = ["--epochs", "2", "--elm-hidden", "60", "--forest-trees", "2", "--forest-depth", "2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == EXIT_OK, err
    return json.loads(out)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A prepared synthetic archive and one trained model per head."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["prepare", "--format", "synth", "--per-class", "10", "--output", str(data), "--seed", "3"]) == 0
    models = {}
    for head in ("elm", "forest", "softmax"):
        path = root / f"{head}.json"
        assert main(["train", "--dataset", str(data), "--head", head, "--out", str(path), "--seed", "3", *FAST]) == 0
        models[head] = path
    return {"root": root, "data": data, "models": models}


class TestPrepare:
    def test_synth(self, capsys, tmp_path):
        doc = run_json(capsys, "prepare", "--format", "synth", "--per-class", "10", "--output", tmp_path / "a")
        assert doc["input"] == 60 and doc["kept"] >= 54
        assert sum(doc["splits"].values()) == doc["kept"]
        report = (tmp_path / "a" / "filter_report.csv").read_text().splitlines()
        assert report[0] == "index,source,label,error,threshold,kept" and len(report) == 61
        assert len(dataio.load_archive(tmp_path / "a")) == doc["kept"]

    def test_directory_with_full_rank_pca_filters_nothing(self, capsys, tmp_path):
        ds = dataio.synth_dataset(Rng(0), 3)
        for i, (img, y) in enumerate(zip(ds.images, ds.labels)):
            d = tmp_path / "in" / ds.class_names[y]
            d.mkdir(parents=True, exist_ok=True)
            dataio.write_pgm(d / f"{i:03d}.pgm", img)
        doc = run_json(capsys, "prepare", "--input", tmp_path / "in", "--output", tmp_path / "out", "--pca-keep", 18)
        assert doc["pcaComponents"] == 18
        assert doc["kept"] == 18

    def test_corrupt_pgm_named(self, capsys, tmp_path):
        d = tmp_path / "in" / "happy"
        d.mkdir(parents=True)
        dataio.write_pgm(d / "good.pgm", np.full((48, 48), 0.5))
        (d / "broken.pgm").write_bytes(b"P5\n48 48\n255\n\x00")
        code, _, err = run(capsys, "prepare", "--input", tmp_path / "in", "--output", tmp_path / "o")
        assert code == EXIT_USER and "broken.pgm" in err

    def test_missing_input(self, capsys, tmp_path):
        code, _, err = run(capsys, "prepare", "--input", tmp_path / "nope", "--output", tmp_path / "o")
        assert code == EXIT_USER and "does not exist" in err

    def test_missing_required(self, capsys):
        code, _, err = run(capsys, "prepare", "--format", "synth")
        assert code == EXIT_USER and "--output" in err


class TestTrain:
    def test_default_outputs(self, workspace):
        metrics = workspace["models"]["elm"].with_suffix(".metrics.csv")
        assert len(metrics.read_text().splitlines()) == 1 + 2
        assert load_model(workspace["models"]["elm"]).head_kind == "elm"

    def test_same_seed_identical_metrics(self, capsys, workspace, tmp_path):
        out = tmp_path / "m.json"
        run_json(capsys, "train", "--dataset", workspace["data"], "--head", "elm", "--out", out, "--seed", 3, *FAST)
        ref = workspace["models"]["elm"]
        assert out.with_suffix(".metrics.csv").read_bytes() == ref.with_suffix(".metrics.csv").read_bytes()
        assert out.read_bytes() == ref.read_bytes()

    def test_modified_differs_from_baseline(self, capsys, workspace, tmp_path):
        out = tmp_path / "mod.json"
        run_json(capsys, "train", "--dataset", workspace["data"], "--head", "elm", "--out", out, "--seed", 3,
                 "--update", "modified-conventional", *FAST)
        assert out.read_bytes() != workspace["models"]["elm"].read_bytes()
        a, b = load_model(out).network.flat(), load_model(workspace["models"]["elm"]).network.flat()
        assert not np.array_equal(a, b)

    def test_incompatible_combination(self, capsys, workspace, tmp_path):
        code, _, err = run(capsys, "train", "--dataset", workspace["data"], "--out", tmp_path / "x.json",
                           "--update", "modified-literal", "--loss", "cross-entropy")
        assert code == EXIT_USER and "log-likelihood" in err

    def test_reuse_network(self, capsys, workspace, tmp_path):
        out = tmp_path / "f.json"
        run_json(capsys, "train", "--dataset", workspace["data"], "--head", "forest", "--out", out, "--seed", 3,
                 "--reuse-network", workspace["models"]["elm"], *FAST)
        assert out.read_bytes() == workspace["models"]["forest"].read_bytes()

    def test_bad_dataset(self, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--dataset", tmp_path, "--out", tmp_path / "x.json")
        assert code == EXIT_USER


class TestClassify:
    def test_output_schema_and_determinism(self, capsys, workspace, tmp_path):
        img = tmp_path / "face.pgm"
        dataio.write_pgm(img, dataio.load_archive(workspace["data"]).images[0])
        a = run_json(capsys, "classify", "--model", workspace["models"]["forest"], "--image", img)
        b = run_json(capsys, "classify", "--model", workspace["models"]["forest"], "--image", img)
        assert {"label", "labelIndex", "scores", "latencyMs", "stageMs"} <= set(a)
        assert len(a["scores"]) == 6 and a["scores"] == b["scores"] and a["label"] == b["label"]

    def test_overfit_model_returns_training_label(self, capsys, workspace, tmp_path):
        model = tmp_path / "interp.json"
        run_json(capsys, "train", "--dataset", workspace["data"], "--head", "elm", "--out", model, "--seed", 3,
                 "--epochs", "1", "--elm-hidden", "200", "--elm-ridge", "0")
        ds = dataio.load_archive(workspace["data"]).subset("train")
        for i in (0, 7, 20):
            img = tmp_path / f"t{i}.pgm"
            dataio.write_pgm(img, ds.images[i])
            doc = run_json(capsys, "classify", "--model", model, "--image", img)
            assert doc["labelIndex"] == ds.labels[i]

    def test_malformed_model(self, capsys, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(workspace["models"]["elm"].read_text()[:500])
        img = tmp_path / "f.pgm"
        dataio.write_pgm(img, np.full((48, 48), 0.5))
        code, _, err = run(capsys, "classify", "--model", bad, "--image", img)
        assert code == EXIT_USER and "format version" in err

    def test_unreadable_image(self, capsys, workspace, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"junk")
        code, _, _ = run(capsys, "classify", "--model", workspace["models"]["elm"], "--image", tmp_path / "x.pgm")
        assert code == EXIT_USER


class TestVideo:
    def test_scripted_peak(self, capsys, workspace, tmp_path):
        save_frame_sequence(scripted_sequence(SCRIPTED_AMPLITUDES), tmp_path / "v")
        doc = run_json(capsys, "video", "--model", workspace["models"]["elm"], "--frames", tmp_path / "v")
        assert doc["peakIndex"] == SCRIPTED_PEAK and doc["frames"] == 12
        assert doc["fpsTarget"] == 20.0 and doc["budgetMs"] == 50.0
        assert doc["meetsFps"] == (doc["meanFrameMs"] <= 50.0)
        assert "label" in doc and doc["warnings"] == []

    def test_single_frame(self, capsys, workspace, tmp_path):
        save_frame_sequence(scripted_sequence([1.0]), tmp_path / "v")
        doc = run_json(capsys, "video", "--model", workspace["models"]["elm"], "--frames", tmp_path / "v")
        assert doc["peakIndex"] == 0 and "label" in doc

    def test_identical_frames_warn(self, capsys, workspace, tmp_path):
        frame = scripted_sequence([1.0]).frames[0]
        save_frame_sequence(FrameSequence([frame] * 4), tmp_path / "v")
        code, out, err = run(capsys, "video", "--model", workspace["models"]["elm"], "--frames", tmp_path / "v")
        assert code == EXIT_OK
        doc = json.loads(out)
        assert doc["peakIndex"] == 0
        assert any("no motion detected" in w for w in doc["warnings"]) and "no motion detected" in err

    def test_empty_directory(self, capsys, workspace, tmp_path):
        (tmp_path / "v").mkdir()
        code, _, err = run(capsys, "video", "--model", workspace["models"]["elm"], "--frames", tmp_path / "v")
        assert code == EXIT_USER and "no frame" in err


class TestBench:
    def test_report_files(self, capsys, workspace, tmp_path):
        m = workspace["models"]
        out = tmp_path / "bench.json"
        code, stdout, err = run(capsys, "bench", "--dataset", workspace["data"], "--model", m["elm"], "--model", m["forest"],
                                "--repeats", 2, "--out", out)
        assert code == EXIT_OK, err
        doc = json.loads(out.read_text())
        assert [e["name"] for e in doc["entries"]] == ["elm", "forest"] and "elmOverForest" in doc
        for e in doc["entries"]:
            assert abs(e["fps"] - 1000.0 / e["mean_ms"]) <= 1e-6
        assert out.with_suffix(".csv").read_text() == stdout

    def test_missing_head(self, capsys, workspace):
        code, _, err = run(capsys, "bench", "--dataset", workspace["data"], "--model", workspace["models"]["elm"],
                           "--heads", "elm,forest")
        assert code == EXIT_USER and "forest" in err


class TestReport:
    def test_metrics_and_model(self, capsys, workspace, tmp_path):
        m = workspace["models"]["elm"]
        doc = run_json(capsys, "report", "--metrics", m.with_suffix(".metrics.csv"), "--model", m,
                       "--dataset", workspace["data"], "--out", tmp_path / "r")
        names = {p.split("/")[-1] for p in doc["written"]}
        assert {"accuracy.svg", "loss.svg", "confusion.csv", "per_class.svg", "evaluation.json"} <= names
        ev = json.loads((tmp_path / "r" / "evaluation.json").read_text())
        assert 0 <= ev["accuracy"] <= 1

    def test_experiment(self, capsys, tmp_path):
        code, out, err = run(capsys, "report", "--experiment", "--seeds", 2, "--per-class", 10, "--epochs", 1,
                             "--out", tmp_path / "e")
        assert code == EXIT_OK, err
        assert "over 2 seeds" in out
        assert len(json.loads((tmp_path / "e" / "accuracy_delta.json").read_text())["seeds"]) == 2

    def test_nothing_requested(self, capsys, tmp_path):
        code, _, _ = run(capsys, "report", "--out", tmp_path)
        assert code == EXIT_USER


class TestConfigAndSeed:
    def test_config_file_supplies_flags(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"format": "synth", "per-class": 10, "output": str(tmp_path / "a")}))
        doc = run_json(capsys, "prepare", "--config", cfg)
        assert doc["input"] == 60

    def test_explicit_flag_overrides_config(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"format": "synth", "per_class": 10, "output": str(tmp_path / "a")}))
        doc = run_json(capsys, "prepare", "--config", cfg, "--per-class", 11)
        assert doc["input"] == 66

    def test_unknown_config_key(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"colour": "blue"}))
        code, _, err = run(capsys, "prepare", "--config", cfg)
        assert code == EXIT_USER and "colour" in err

    def test_seed_from_environment(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "5")
        run_json(capsys, "prepare", "--format", "synth", "--per-class", 10, "--output", tmp_path / "env")
        run_json(capsys, "prepare", "--format", "synth", "--per-class", 10, "--output", tmp_path / "flag", "--seed", 5)
        run_json(capsys, "prepare", "--format", "synth", "--per-class", 10, "--output", tmp_path / "other", "--seed", 6)
        env, flag, other = (dataio.load_archive(tmp_path / n) for n in ("env", "flag", "other"))
        assert np.array_equal(env.images, flag.images)
        assert not np.array_equal(env.images, other.images)

    def test_bad_environment_seed(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "abc")
        code, _, err = run(capsys, "prepare", "--format", "synth", "--output", tmp_path / "x")
        assert code == EXIT_USER and SEED_ENV in err

    def test_usage_error(self, capsys):
        code, _, _ = run(capsys, "train", "--head", "svm")
        assert code == EXIT_USER
