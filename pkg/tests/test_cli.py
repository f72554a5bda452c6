import json

import numpy as np
import pytest
from click.testing import CliRunner

from dermscreen.cli import main
from dermscreen.runmeta import read_run_manifest
from dermscreen.scoring import read_scores


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full CLI chain: synth -> train -> score sweep -> evaluate."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    r = invoke("synth", "--out", data, "--n-images", 40, "--seed", 7,
               "--split", "train=0.8,val=0.2")
    assert r.exit_code == 0, r.output

    common = ["--manifest", data / "manifest.json", "--split-file", data / "splits.json"]
    r = invoke("train-detector", *common, "--scale", 1 / 320, "--out", root / "det")
    assert r.exit_code == 0, r.output
    r = invoke("train-classifier", *common, "--scale", 0.08, "--crop-side", 48,
               "--out", root / "cls")
    assert r.exit_code == 0, r.output
    r = invoke("train-direct", *common, "--scale", 0.08, "--crop-side", 48,
               "--out", root / "direct")
    assert r.exit_code == 0, r.output
    r = invoke("score", *common, "--split", "val",
               "--detector", root / "det", "--classifier", root / "cls",
               "--direct-model", root / "direct", "--sweep", "--write-detections",
               "--out", root / "scores")
    assert r.exit_code == 0, r.output
    r = invoke("evaluate", *common, "--split", "val",
               "--scores", root / "scores" / "scores_two_stage_average.jsonl",
               "--detections", root / "scores" / "detections.jsonl",
               "--out", root / "report")
    assert r.exit_code == 0, r.output
    return root, data, common


class TestSynth:
    def test_artifacts_present(self, pipeline):
        _, data, _ = pipeline
        for name in ("manifest.json", "splits.json", "covariates.csv",
                     "covariate_schema.json", "run.json"):
            assert (data / name).exists()

    def test_run_manifest_records_config_hash(self, pipeline):
        _, data, _ = pipeline
        run = read_run_manifest(data / "run.json")
        assert run["command"] == "synth"
        assert len(run["config_sha256"]) == 64
        assert run["config"]["n_images"] == 40
        assert run["seed"] == 7


class TestTraining:
    def test_detector_checkpoint(self, pipeline):
        root, _, _ = pipeline
        assert (root / "det" / "weights.pt").exists()
        meta = json.loads((root / "det" / "model.json").read_text(encoding="utf-8"))
        assert meta["kind"] == "detector"
        assert (root / "det" / "curves.csv").exists()
        run = read_run_manifest(root / "det" / "run.json")
        assert run["config"]["granularity"] == "one_class"

    def test_clinical_and_combined(self, pipeline):
        root, data, common = pipeline
        r = invoke("train-clinical", *common,
                   "--covariates", data / "covariates.csv",
                   "--schema", data / "covariate_schema.json",
                   "--out", root / "clin")
        assert r.exit_code == 0, r.output
        assert (root / "clin" / "model.json").exists()
        r = invoke("train-combined", *common,
                   "--classifier", root / "cls",
                   "--covariates", data / "covariates.csv",
                   "--schema", data / "covariate_schema.json",
                   "--epochs", 5, "--batch-size", 16,
                   "--out", root / "comb")
        assert r.exit_code == 0, r.output
        from dermscreen.modelio import load_any_model

        assert type(load_any_model(root / "comb")).__name__ == "CombinedModel"
        assert type(load_any_model(root / "clin")).__name__ == "ClinicalModel"


class TestScore:
    def test_sweep_grid_files(self, pipeline):
        root, _, _ = pipeline
        assert (root / "scores" / "sweep.csv").exists()
        text = (root / "scores" / "sweep.txt").read_text(encoding="utf-8")
        # two_stage has three aggregator rows, direct repeats across three
        assert len(text.strip().splitlines()) == 2 + 6

    def test_scores_readable(self, pipeline):
        root, _, _ = pipeline
        scores = read_scores(root / "scores" / "scores_two_stage_noisy_or.jsonl")
        assert len(scores) == 8
        assert all(s.strategy == "two_stage" for s in scores)

    def test_single_cell_mode(self, pipeline, tmp_path):
        root, _, common = pipeline
        r = invoke("score", *common, "--split", "val",
                   "--direct-model", root / "direct",
                   "--strategy", "direct", "--out", tmp_path / "one")
        assert r.exit_code == 0, r.output
        scores = read_scores(tmp_path / "one" / "scores.jsonl")
        assert all(s.aggregator is None for s in scores)

    def test_missing_model_fails(self, pipeline, tmp_path):
        _, _, common = pipeline
        r = invoke("score", *common, "--strategy", "two_stage",
                   "--aggregator", "average", "--out", tmp_path / "x")
        assert r.exit_code != 0
        assert "ConfigError" in r.output


class TestEvaluate:
    def test_report_files(self, pipeline):
        root, _, _ = pipeline
        assert (root / "report" / "report.csv").exists()
        assert (root / "report" / "report.txt").exists()

    def test_repeat_run_identical_csv(self, pipeline, tmp_path):
        root, _, common = pipeline
        r = invoke("evaluate", *common, "--split", "val",
                   "--scores", root / "scores" / "scores_two_stage_average.jsonl",
                   "--detections", root / "scores" / "detections.jsonl",
                   "--out", tmp_path / "again")
        assert r.exit_code == 0, r.output
        first = (root / "report" / "report.csv").read_bytes()
        second = (tmp_path / "again" / "report.csv").read_bytes()
        assert first == second

    def test_bad_manifest_exits_nonzero(self, tmp_path):
        r = invoke("evaluate", "--manifest", tmp_path / "nope.json",
                   "--scores", tmp_path / "nope.jsonl", "--out", tmp_path / "y")
        assert r.exit_code != 0


class TestExportFeatures:
    def test_npz_contents(self, pipeline, tmp_path):
        root, _, common = pipeline
        r = invoke("export-features", *common, "--split", "val",
                   "--model", root / "det", "--out", tmp_path / "feats")
        assert r.exit_code == 0, r.output
        bundle = np.load(tmp_path / "feats" / "features.npz")
        n = len(bundle["image_ids"])
        assert n > 0
        assert bundle["boxes"].shape == (n, 4)
        assert bundle["scores"].shape == (n,)
        assert bundle["features"].shape[0] == n
