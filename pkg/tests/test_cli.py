import json

import numpy as np
import pytest

from aga3d.cli import EXIT_DOMAIN, EXIT_FORMAT, EXIT_OK, main, render_svg
from aga3d.volgrid import LabelMap, Volume3D, store_volume

RUN_CONFIG = {
    "phantom": {"dims": [40, 40, 24], "n_patients": 8, "region_radius": [3.5, 4.0], "lesion_radius": [1.0, 1.5],
                "anatomy_jitter": 1},
    "train": {"epochs": 1, "lr": 3e-4, "net": {"input_dims": [40, 40, 24]}},
}


def _outputs(out):
    """Every file under ``out`` except the manifest, as bytes."""
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


@pytest.fixture()
def atlas(tmp_path):
    lab = np.zeros((12, 12, 12), dtype=np.uint32)
    lab[1:6, 1:6, 1:6] = 1
    lab[6:11, 6:11, 6:11] = 2
    store_volume(LabelMap(lab, registry={1: "left hippocampus", 2: "brainstem"}), tmp_path / "labels")
    (tmp_path / "phrases.txt").write_text("left hippocampus\n")
    return tmp_path


@pytest.fixture()
def run_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(RUN_CONFIG))
    return path


class TestPriorAndGround:
    def test_prior_outputs_and_manifest(self, atlas, tmp_path):
        out = tmp_path / "o"
        code = main(["prior", "--labels", str(atlas / "labels"), "--phrases", str(atlas / "phrases.txt"),
                     "--k", "1", "--sigma", "1.0", "--out", str(out)])
        assert code == EXIT_OK
        g = json.loads((out / "grounding.json").read_text())
        assert g["groundings"][0]["matches"][0]["label"] == 1
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "prior" and man["seed"] == 0
        assert {"grounding.json", "prior.json", "prior.raw"} <= set(man["outputs"])

    def test_empty_phrase_file_warns(self, atlas, tmp_path, capsys):
        (atlas / "none.txt").write_text("")
        out = tmp_path / "o"
        code = main(["prior", "--labels", str(atlas / "labels"), "--phrases", str(atlas / "none.txt"),
                     "--out", str(out)])
        assert code == EXIT_OK and "warning" in capsys.readouterr().err
        raw = np.frombuffer((out / "prior.raw").read_bytes(), dtype="<f4")
        assert not raw.any()

    def test_idempotent(self, atlas, tmp_path):
        args = ["ground", "--labels", str(atlas / "labels"), "--phrases", str(atlas / "phrases.txt")]
        assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
        assert _outputs(tmp_path / "a") == _outputs(tmp_path / "b")

    def test_truncated_label_map(self, atlas, tmp_path, capsys):
        raw = atlas / "labels.raw"
        raw.write_bytes(raw.read_bytes()[:-5])
        code = main(["prior", "--labels", str(atlas / "labels"), "--phrases", str(atlas / "phrases.txt"),
                     "--out", str(tmp_path / "o")])
        assert code == EXIT_FORMAT and "labels.raw" in capsys.readouterr().err

    def test_missing_file(self, atlas, tmp_path):
        assert main(["ground", "--labels", str(atlas / "nope"), "--phrases", str(atlas / "phrases.txt"),
                     "--out", str(tmp_path / "o")]) == EXIT_FORMAT

    def test_label_map_required_type(self, atlas, tmp_path):
        store_volume(Volume3D(np.zeros((4, 4, 4))), atlas / "mri")
        assert main(["prior", "--labels", str(atlas / "mri"), "--phrases", str(atlas / "phrases.txt"),
                     "--out", str(tmp_path / "o")]) == EXIT_FORMAT


class TestRoiTransfer:
    def test_transfer(self, tmp_path):
        (tmp_path / "ref.json").write_text(json.dumps({"center": [5, 5, 5], "sides": [10, 10, 10]}))
        (tmp_path / "tgt.json").write_text(json.dumps({"center": [10, 5, 2.5], "sides": [20, 10, 5]}))
        (tmp_path / "box.json").write_text(json.dumps({"center": [5, 5, 5], "sides": [2, 2, 2]}))
        out = tmp_path / "o"
        code = main(["roi-transfer", "--ref-extent", str(tmp_path / "ref.json"),
                     "--tgt-extent", str(tmp_path / "tgt.json"), "--box", str(tmp_path / "box.json"),
                     "--out", str(out)])
        assert code == EXIT_OK
        box = json.loads((out / "box.json").read_text())
        assert box["center"] == pytest.approx([10, 5, 2.5]) and box["sides"] == pytest.approx([4, 2, 1])

    def test_degenerate_extent(self, tmp_path):
        (tmp_path / "ref.json").write_text(json.dumps({"center": [5, 5, 5], "sides": [0, 10, 10]}))
        (tmp_path / "box.json").write_text(json.dumps({"center": [5, 5, 5], "sides": [2, 2, 2]}))
        code = main(["roi-transfer", "--ref-extent", str(tmp_path / "ref.json"),
                     "--tgt-extent", str(tmp_path / "ref.json"), "--box", str(tmp_path / "box.json"),
                     "--out", str(tmp_path / "o")])
        assert code == EXIT_DOMAIN


class TestRunCommands:
    def test_synth_is_idempotent(self, run_config, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--config", str(run_config), "--seed", "3", "--out", str(tmp_path / name)]) == 0
        assert _outputs(tmp_path / "a") == _outputs(tmp_path / "b")
        assert json.loads((tmp_path / "a" / "phantom_spec.json").read_text())["seed"] == 3

    def test_seed_from_environment(self, run_config, tmp_path, monkeypatch):
        monkeypatch.setenv("AGA3D_SEED", "5")
        assert main(["synth", "--config", str(run_config), "--out", str(tmp_path / "o")]) == EXIT_OK
        assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 5

    @pytest.mark.filterwarnings("ignore::aga3d.errors.UndefinedMetric")
    def test_train_then_eval(self, run_config, tmp_path, capsys):
        data, run = tmp_path / "data", tmp_path / "run"
        assert main(["synth", "--config", str(run_config), "--out", str(data)]) == EXIT_OK
        assert main(["train", "--config", str(run_config), "--data", str(data), "--quiet",
                     "--out", str(run)]) == EXIT_OK
        for name in ("model.agap", "metrics.json", "train_log.jsonl", "run_config.json", "manifest.json"):
            assert (run / name).exists()
        capsys.readouterr()
        ev = tmp_path / "ev"
        code = main(["eval", "--config", str(run_config), "--data", str(data), "--model", str(run / "model.agap"),
                     "--split", "all", "--plot", "--out", str(ev)])
        assert code == EXIT_OK
        metrics = json.loads((ev / "metrics.json").read_text())
        for field in ("acc", "auc", "precision", "recall", "f1_macro"):
            assert field in metrics
        lines = (ev / "scores.csv").read_text().splitlines()
        assert lines[0] == "scan_id,patient_id,label,score" and len(lines) == metrics["n"] + 1
        assert (ev / "plot.svg").read_text().startswith("<svg")
        # retraining with the same seed gives the same checkpoint bytes
        run2 = tmp_path / "run2"
        assert main(["train", "--config", str(run_config), "--data", str(data), "--quiet",
                     "--out", str(run2)]) == EXIT_OK
        assert (run / "model.agap").read_bytes() == (run2 / "model.agap").read_bytes()

    def test_bad_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_FORMAT
        bad.write_text(json.dumps({"phantom": {"dims": [16, 16, 16], "region_radius": [4, 4],
                                               "lesion_radius": [1, 1], "n_patients": 1},
                                   "train": {"net": {"input_dims": [16, 16, 16]}}}))
        assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_DOMAIN
        bad.write_text(json.dumps({"bogus_flag": 1}))
        assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_FORMAT


def test_gradcheck_ops_only(tmp_path, capsys):
    assert main(["gradcheck", "--no-model", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert all(e["passed"] for e in report.values()) and "conv3d" in report
    assert "max rel-err" in capsys.readouterr().out


def test_svg_has_roc_polyline():
    svg = render_svg([0.9, 0.2, 0.6], [1, 0, 1], auc=1.0)
    assert "<polyline" in svg and svg.count("<circle") == 3 and "AUC 1.000" in svg
