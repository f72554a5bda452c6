import json
import math

import numpy as np
import pytest
from scipy import optimize

from dermscreen.clinical import (
    ClinicalModel,
    CovariateSchema,
    encode_covariates,
    encode_matrix,
    feature_names,
    fit_standardizer,
    logistic_loss_and_grad,
    train_clinical,
    train_logistic,
)
from dermscreen.errors import CovariateError


@pytest.fixture
def schema():
    return CovariateSchema(
        continuous=("age", "prior_visits"),
        categorical=(("sex", ("F", "M")), ("race", ("white", "black", "asian", "other"))),
    )


def rows_from(records):
    return [dict(r) for r in records]


class TestSchema:
    def test_duplicate_names_rejected(self):
        with pytest.raises(CovariateError):
            CovariateSchema(continuous=("age",), categorical=(("age", ("a", "b")),))

    def test_empty_levels_rejected(self):
        with pytest.raises(CovariateError):
            CovariateSchema(continuous=(), categorical=(("sex", ()),))

    def test_json_round_trip(self, schema):
        assert CovariateSchema.from_json(schema.to_json()) == schema

    def test_loads_generator_schema(self, tmp_path):
        from dermscreen.synth import COVARIATE_SCHEMA

        p = tmp_path / "schema.json"
        p.write_text(json.dumps(COVARIATE_SCHEMA))
        loaded = CovariateSchema.load(p)
        assert loaded.continuous == ("age", "prior_visits")
        assert dict(loaded.categorical)["sex"] == ("F", "M")


class TestStandardizer:
    def test_hand_computed_population_stats(self, schema):
        rows = rows_from([{"age": "1"}, {"age": "2"}, {"age": "3"}])
        stats = fit_standardizer(rows, CovariateSchema(continuous=("age",), categorical=()))
        assert stats.mean_of("age") == pytest.approx(2.0, abs=1e-12)
        assert stats.std_of("age") == pytest.approx(math.sqrt(2.0 / 3.0), abs=1e-12)

    def test_constant_column_dropped_with_warning(self):
        schema = CovariateSchema(continuous=("flat",), categorical=())
        rows = rows_from([{"flat": "5"}, {"flat": "5"}, {"flat": "5"}])
        with pytest.warns(UserWarning, match="constant"):
            stats = fit_standardizer(rows, schema)
        assert stats.dropped == ("flat",)
        assert stats.kept == ()

    def test_too_few_rows(self, schema):
        with pytest.raises(CovariateError):
            fit_standardizer([{"age": "1"}], schema)

    def test_refit_on_standardized_data_is_unit(self):
        schema = CovariateSchema(continuous=("x",), categorical=())
        rng = np.random.default_rng(3)
        values = rng.normal(10, 4, size=200)
        stats = fit_standardizer([{"x": str(v)} for v in values], schema)
        standardized = [(v - stats.mean_of("x")) / stats.std_of("x") for v in values]
        refit = fit_standardizer([{"x": repr(float(v))} for v in standardized], schema)
        assert refit.mean_of("x") == pytest.approx(0.0, abs=1e-9)
        assert refit.std_of("x") == pytest.approx(1.0, abs=1e-9)

    def test_round_trip_mean_zero_std_one(self, schema):
        rng = np.random.default_rng(11)
        rows = [
            {
                "age": str(rng.normal(50, 12)),
                "prior_visits": str(rng.integers(0, 9)),
                "sex": "F" if rng.uniform() < 0.5 else "M",
                "race": "white",
            }
            for _ in range(150)
        ]
        stats = fit_standardizer(rows, schema)
        X = encode_matrix(rows, schema, stats)
        for col in range(len(stats.kept)):
            assert abs(X[:, col].mean()) < 1e-9
            assert abs(X[:, col].std() - 1.0) < 1e-9


class TestEncoding:
    def fitted(self, schema):
        rows = rows_from(
            [
                {"age": "40", "prior_visits": "1", "sex": "F", "race": "white"},
                {"age": "60", "prior_visits": "3", "sex": "M", "race": "black"},
            ]
        )
        return fit_standardizer(rows, schema), rows

    def test_one_hot_blocks_sum_to_one(self, schema):
        stats, rows = self.fitted(schema)
        vec = encode_covariates(rows[0], schema, stats)
        n_cont = len(stats.kept)
        sex_block = vec[n_cont : n_cont + 3]
        race_block = vec[n_cont + 3 : n_cont + 8]
        assert sex_block.sum() == 1.0
        assert race_block.sum() == 1.0
        assert list(sex_block) == [1.0, 0.0, 0.0]

    def test_vector_length_fixed_by_schema(self, schema):
        stats, rows = self.fitted(schema)
        expected = len(stats.kept) + (2 + 1) + (4 + 1)
        assert len(encode_covariates(rows[0], schema, stats)) == expected
        assert len(feature_names(schema, stats)) == expected

    def test_mean_age_encodes_to_zero(self, schema):
        stats, rows = self.fitted(schema)
        row = {"age": "50", "prior_visits": "2", "sex": "F", "race": "white"}
        vec = encode_covariates(row, schema, stats)
        assert vec[0] == pytest.approx(0.0, abs=1e-12)

    def test_unseen_level_goes_to_other_slot(self, schema):
        stats, _ = self.fitted(schema)
        vec = encode_covariates(
            {"age": "50", "prior_visits": "2", "sex": "X", "race": "martian"}, schema, stats
        )
        n = len(stats.kept)
        assert vec[n + 2] == 1.0  # sex other slot
        assert vec[n + 3 + 4] == 1.0  # race other slot
        assert vec[n : n + 3].sum() == 1.0

    def test_missing_continuous_imputes_mean(self, schema):
        stats, _ = self.fitted(schema)
        vec = encode_covariates({"sex": "F", "race": "white"}, schema, stats)
        assert vec[0] == 0.0 and vec[1] == 0.0

    def test_type_mismatch_names_field(self, schema):
        stats, _ = self.fitted(schema)
        with pytest.raises(CovariateError, match="age"):
            encode_covariates({"age": "elderly", "sex": "F", "race": "white"}, schema, stats)


class TestLogistic:
    def random_problem(self, seed, n=40, d=5):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, d))
        y = (rng.uniform(size=n) < 0.5).astype(np.float64)
        if y.min() == y.max():
            y[0] = 1.0 - y[0]
        return X, y

    def test_gradient_matches_central_differences(self):
        X, y = self.random_problem(7)
        rng = np.random.default_rng(8)
        w = rng.normal(scale=0.5, size=X.shape[1])
        b = 0.3
        l2 = 1.0
        _, grad_w, grad_b = logistic_loss_and_grad(w, b, X, y, l2)
        h = 1e-5
        worst = 0.0
        for k in range(len(w)):
            wp, wm = w.copy(), w.copy()
            wp[k] += h
            wm[k] -= h
            lp, _, _ = logistic_loss_and_grad(wp, b, X, y, l2)
            lm, _, _ = logistic_loss_and_grad(wm, b, X, y, l2)
            worst = max(worst, abs((lp - lm) / (2 * h) - grad_w[k]))
        lp, _, _ = logistic_loss_and_grad(w, b + h, X, y, l2)
        lm, _, _ = logistic_loss_and_grad(w, b - h, X, y, l2)
        worst = max(worst, abs((lp - lm) / (2 * h) - grad_b))
        assert worst < 1e-5

    def test_loss_is_convex_along_segments(self):
        X, y = self.random_problem(9)
        rng = np.random.default_rng(10)
        for _ in range(50):
            w1, w2 = rng.normal(size=(2, X.shape[1]))
            b1, b2 = rng.normal(size=2)
            mid_w, mid_b = (w1 + w2) / 2, (b1 + b2) / 2
            l1, _, _ = logistic_loss_and_grad(w1, b1, X, y, 1.0)
            l2_, _, _ = logistic_loss_and_grad(w2, b2, X, y, 1.0)
            lm, _, _ = logistic_loss_and_grad(mid_w, mid_b, X, y, 1.0)
            assert lm <= (l1 + l2_) / 2 + 1e-12

    def test_separable_sign(self):
        X = np.array([[-1.0], [-1.0], [1.0], [1.0]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        model = train_logistic(X, y)
        assert model.weights[0] > 0

    def test_zero_start_predicts_half(self):
        X, y = self.random_problem(12)
        model = train_logistic(X, y, max_iter=0)
        assert np.allclose(model.predict_proba(X), 0.5)

    def test_converges_to_scipy_optimum(self):
        X, y = self.random_problem(13, n=80, d=6)
        model = train_logistic(X, y, l2=1.0)
        assert model.grad_norm <= 1e-8

        def objective(theta):
            loss, gw, gb = logistic_loss_and_grad(theta[:-1], theta[-1], X, y, 1.0)
            return loss, np.append(gw, gb)

        res = optimize.minimize(
            objective, np.zeros(X.shape[1] + 1), jac=True, method="BFGS",
            options={"gtol": 1e-10, "maxiter": 5000},
        )
        assert np.allclose(model.weights, res.x[:-1], atol=1e-6)
        assert abs(model.intercept - res.x[-1]) < 1e-6

    def test_single_class_rejected(self):
        X = np.zeros((4, 2))
        with pytest.raises(CovariateError):
            train_logistic(X, np.ones(4))
        with pytest.raises(CovariateError):
            train_logistic(X, np.array([0.0, 1.0, 2.0, 1.0]))

    def test_training_is_deterministic(self):
        X, y = self.random_problem(21)
        a = train_logistic(X, y)
        b = train_logistic(X, y)
        assert np.array_equal(a.weights, b.weights)
        assert a.intercept == b.intercept


class TestClinicalModel:
    def synthetic_rows(self, n=240, seed=5):
        rng = np.random.default_rng(seed)
        rows, labels = [], []
        for _ in range(n):
            y = int(rng.uniform() < 0.4)
            rows.append(
                {
                    "age": f"{rng.normal(48 + 14 * y, 9):.1f}",
                    "prior_visits": str(int(rng.poisson(2 + 3 * y))),
                    "sex": "F" if rng.uniform() < 0.5 else "M",
                    "race": ["white", "black", "asian", "other"][int(rng.integers(0, 4))],
                }
            )
            labels.append(y)
        return rows, labels

    def test_end_to_end_learns_separation(self, schema):
        from dermscreen.metrics import auc

        rows, labels = self.synthetic_rows()
        model = train_clinical(rows, labels, schema)
        pairs = [(model.predict_row(r), y) for r, y in zip(rows, labels)]
        assert auc(pairs) > 0.8

    def test_save_load_preserves_predictions(self, schema, tmp_path):
        rows, labels = self.synthetic_rows(n=60)
        model = train_clinical(rows, labels, schema)
        path = tmp_path / "clinical.json"
        model.save(path)
        loaded = ClinicalModel.load(path)
        for row in rows[:10]:
            assert loaded.predict_row(row) == model.predict_row(row)

    def test_row_label_count_mismatch(self, schema):
        with pytest.raises(CovariateError):
            train_clinical([{

                "age": "1"}], [0, 1], schema)


# ---------------------------------------------------------------------------
# combined image + covariates model


@pytest.fixture(scope="module")
def fusion_setup(tmp_path_factory):
    import cv2

    from dermscreen.classifier import ClassifierTrainConfig, train_classifier
    from dermscreen.clinical import read_covariate_rows
    from dermscreen.data import patient_split
    from dermscreen.synth import COVARIATE_SCHEMA, SynthConfig, generate_dataset

    tmp = tmp_path_factory.mktemp("fusion")
    out = generate_dataset(SynthConfig(n_images=80, seed=11), tmp)
    manifest = patient_split(out.manifest, {"train": 0.75, "val": 0.25}, seed=2)
    rows = read_covariate_rows(out.covariates_path)
    full_schema = CovariateSchema.from_json(COVARIATE_SCHEMA)
    cls_model, _ = train_classifier(
        manifest, ClassifierTrainConfig(epochs=5, batch_size=8, crop_side=48, channels=(8, 16))
    )
    images = {
        r.image_id: cv2.imread(str(manifest.resolve_path(r))) for r in manifest.records
    }
    return manifest, rows, full_schema, cls_model, images


@pytest.fixture(scope="module")
def fusion_model(fusion_setup):
    from dermscreen.clinical import CombinedTrainConfig, train_combined

    manifest, rows, full_schema, cls_model, _ = fusion_setup
    return train_combined(
        cls_model, manifest, rows, full_schema, CombinedTrainConfig(epochs=200, batch_size=16)
    )


class TestCombined:
    def test_default_recipe(self):
        from dermscreen.clinical import CombinedTrainConfig

        cfg = CombinedTrainConfig()
        assert (cfg.epochs, cfg.batch_size) == (30, 64)
        assert (cfg.lr, cfg.momentum, cfg.weight_decay) == (1e-3, 0.9, 1e-4)
        assert cfg.lr_at(0) == 1e-3
        assert cfg.lr_at(15) == pytest.approx(5e-4)
        assert CombinedTrainConfig.from_json(cfg.to_json()) == cfg

    def test_only_fused_layer_trains(self, fusion_model):
        model, _ = fusion_model
        trainable = sum(
            p.numel()
            for p in list(model.backbone.parameters()) + list(model.fused.parameters())
            if p.requires_grad
        )
        fused_only = sum(p.numel() for p in model.fused.parameters())
        assert trainable == fused_only

    def test_backbone_unchanged_by_training(self, fusion_setup):
        import torch

        from dermscreen.clinical import CombinedTrainConfig, train_combined

        manifest, rows, full_schema, cls_model, _ = fusion_setup
        before = {k: v.clone() for k, v in cls_model.net.backbone.state_dict().items()}
        model, _ = train_combined(
            cls_model, manifest, rows, full_schema, CombinedTrainConfig(epochs=3, batch_size=16)
        )
        after = model.backbone.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_loss_decreases(self, fusion_model):
        _, curves = fusion_model
        assert curves[-1]["loss"] < curves[0]["loss"]

    def test_combined_keeps_covariate_signal(self, fusion_setup, fusion_model):
        from dermscreen.metrics import auc

        manifest, rows, full_schema, _, images = fusion_setup
        model, _ = fusion_model
        train = manifest.split_records("train")
        val = manifest.split_records("val")
        clin = train_clinical(
            [rows[r.image_id] for r in train], [r.image_label for r in train], full_schema
        )
        baseline = auc([(clin.predict_row(rows[r.image_id]), r.image_label) for r in val])
        fused = auc(
            [(model.predict(images[r.image_id], rows[r.image_id]), r.image_label) for r in val]
        )
        assert fused >= baseline - 0.02

    def test_predict_range_and_determinism(self, fusion_setup, fusion_model):
        manifest, rows, _, _, images = fusion_setup
        model, _ = fusion_model
        rec = manifest.split_records("val")[0]
        p1 = model.predict(images[rec.image_id], rows[rec.image_id])
        p2 = model.predict(images[rec.image_id], rows[rec.image_id])
        assert p1 == p2
        assert 0.0 < p1 < 1.0

    def test_covariate_contribution_is_linear(self, fusion_setup, fusion_model):
        manifest, rows, _, _, images = fusion_setup
        model, _ = fusion_model
        rec = manifest.split_records("val")[0]
        row = rows[rec.image_id]
        feats = model.image_features(images[rec.image_id])
        vec = encode_covariates(row, model.schema, model.stats)
        w = model.fused.weight[0].detach().numpy()
        full = model.logit(images[rec.image_id], row)
        image_part = float(np.dot(w[: len(feats)], feats) + model.fused.bias.item())
        assert abs((full - image_part) - float(np.dot(w[len(feats) :], vec))) < 1e-5

    def test_save_load_round_trip(self, fusion_setup, fusion_model, tmp_path):
        from dermscreen.clinical import CombinedModel

        manifest, rows, _, _, images = fusion_setup
        model, _ = fusion_model
        model.save(tmp_path / "comb")
        loaded = CombinedModel.load(tmp_path / "comb")
        rec = manifest.split_records("val")[1]
        assert loaded.predict(images[rec.image_id], rows[rec.image_id]) == model.predict(
            images[rec.image_id], rows[rec.image_id]
        )

    def test_missing_covariates_warn_then_fatal(self, fusion_setup):
        from dermscreen.clinical import CombinedTrainConfig, train_combined

        manifest, rows, full_schema, cls_model, _ = fusion_setup
        train_ids = [r.image_id for r in manifest.split_records("train")]
        partial = {k: v for k, v in rows.items() if k not in train_ids[:5]}
        with pytest.warns(UserWarning, match="no covariate row"):
            train_combined(
                cls_model, manifest, partial, full_schema, CombinedTrainConfig(epochs=2, batch_size=16)
            )
        with pytest.raises(CovariateError):
            train_combined(cls_model, manifest, {}, full_schema)

    def test_covariate_csv_needs_image_id(self, tmp_path):
        from dermscreen.clinical import read_covariate_rows

        p = tmp_path / "cov.csv"
        p.write_text("patient,age\np1,30\n", encoding="utf-8")
        with pytest.raises(CovariateError):
            read_covariate_rows(p)
