"""Command-line front end: training runs, scoring, evaluation, serving.

Every command that produces artifacts also writes a run.json recording
its inputs, the full configuration with its sha256, and the seed, so a
run can be reproduced from the artifact directory alone.
"""

from __future__ import annotations

import functools
import json
from pathlib import Path

import click
import numpy as np

from .errors import ConfigError, DermscreenError, ModelIOError


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DermscreenError as e:
            raise click.ClickException(f"{type(e).__name__}: {e}")

    return wrapper


def _load_manifest(manifest_path, split_file):
    from .data import load_manifest

    return load_manifest(manifest_path, split_file)


def _records(manifest, split):
    records = manifest.split_records(split) if split else manifest.records
    if not records:
        raise ConfigError(f"no records selected (split={split!r})")
    return records


def _iter_images(manifest, records):
    import cv2

    for rec in records:
        path = manifest.resolve_path(rec)
        image = cv2.imread(str(path))
        if image is None:
            raise ModelIOError(f"cannot decode {path}")
        yield rec.image_id, image


def _parse_fractions(text):
    out = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        if not value:
            raise ConfigError(f"bad split spec {text!r}, want e.g. train=0.8,val=0.2")
        out[name.strip()] = float(value)
    return out


@click.group()
def main():
    """Skin lesion detection and malignancy triage toolkit."""


@main.command()
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--n-images", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--dermoscopy-fraction", default=0.3, show_default=True)
@click.option("--covariate-strength", default=0.8, show_default=True)
@click.option("--split", "split_spec", default=None, help="e.g. train=0.8,val=0.2")
@click.option("--split-seed", default=0, show_default=True)
@guarded
def synth(out, n_images, seed, dermoscopy_fraction, covariate_strength, split_spec, split_seed):
    """Generate a synthetic lesion dataset with covariates."""
    from .data import patient_split, save_split
    from .runmeta import write_run_manifest
    from .synth import SynthConfig, generate_dataset

    config = SynthConfig(
        n_images=n_images,
        seed=seed,
        dermoscopy_fraction=dermoscopy_fraction,
        covariate_strength=covariate_strength,
    )
    result = generate_dataset(config, out)
    click.echo(f"wrote {len(result.manifest)} images under {out}")
    if split_spec:
        split_manifest = patient_split(result.manifest, _parse_fractions(split_spec), seed=split_seed)
        save_split(split_manifest.splits, out / "splits.json")
        click.echo(f"wrote split table {out / 'splits.json'}")
    write_run_manifest(out, "synth", {"out": out}, config.to_json(), seed)


def _manifest_options(fn):
    fn = click.option("--split-file", type=click.Path(path_type=Path), default=None)(fn)
    fn = click.option("--manifest", "manifest_path", required=True, type=click.Path(path_type=Path))(fn)
    return fn


@main.command("train-detector")
@_manifest_options
@click.option("--granularity", default="one_class", show_default=True,
              type=click.Choice(["one_class", "malignancy", "sub_type"]))
@click.option("--backend", default="compact", show_default=True,
              type=click.Choice(["compact", "frcnn"]))
@click.option("--scale", default=1.0, show_default=True,
              help="schedule scale factor; steps and decay points shrink together")
@click.option("--image-size", default=None, type=int)
@click.option("--score-threshold", default=None, type=float)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@guarded
def train_detector_cmd(manifest_path, split_file, granularity, backend, scale,
                       image_size, score_threshold, seed, out):
    """Train a lesion detector and save its checkpoint."""
    from .classifier import write_curves
    from .detector import DetectorTrainConfig, train_detector
    from .runmeta import write_run_manifest

    manifest = _load_manifest(manifest_path, split_file)
    overrides = {"backend": backend, "seed": seed}
    if image_size is not None:
        overrides["image_size"] = image_size
    if score_threshold is not None:
        overrides["score_threshold"] = score_threshold
    config = DetectorTrainConfig(**overrides).scaled(scale)
    model, curves = train_detector(manifest, granularity, config)
    model.save(out)
    write_curves(out / "curves.csv", curves)
    write_run_manifest(
        out, "train-detector",
        {"manifest": manifest_path, "split_file": split_file or ""},
        {"granularity": granularity, **config.to_json()}, seed,
    )
    click.echo(f"saved detector ({granularity}, {backend}) to {out}")


def _train_classifier_like(trainer, command, manifest_path, split_file, scale, crop_side, seed, out):
    from .classifier import ClassifierTrainConfig, write_curves
    from .runmeta import write_run_manifest

    manifest = _load_manifest(manifest_path, split_file)
    overrides = {"seed": seed}
    if crop_side is not None:
        overrides["crop_side"] = crop_side
    config = ClassifierTrainConfig(**overrides).scaled(scale)
    model, curves = trainer(manifest, config)
    model.save(out)
    write_curves(out / "curves.csv", curves)
    write_run_manifest(
        out, command,
        {"manifest": manifest_path, "split_file": split_file or ""},
        config.to_json(), seed,
    )
    click.echo(f"saved {command.removeprefix('train-')} model to {out}")


@main.command("train-classifier")
@_manifest_options
@click.option("--scale", default=1.0, show_default=True)
@click.option("--crop-side", default=None, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@guarded
def train_classifier_cmd(manifest_path, split_file, scale, crop_side, seed, out):
    """Train the per-lesion malignancy classifier."""
    from .classifier import train_classifier

    _train_classifier_like(train_classifier, "train-classifier",
                           manifest_path, split_file, scale, crop_side, seed, out)


@main.command("train-direct")
@_manifest_options
@click.option("--scale", default=1.0, show_default=True)
@click.option("--crop-side", default=None, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@guarded
def train_direct_cmd(manifest_path, split_file, scale, crop_side, seed, out):
    """Train the whole-image malignancy model."""
    from .classifier import train_direct

    _train_classifier_like(train_direct, "train-direct",
                           manifest_path, split_file, scale, crop_side, seed, out)


@main.command("train-clinical")
@_manifest_options
@click.option("--covariates", "covariates_path", required=True, type=click.Path(path_type=Path))
@click.option("--schema", "schema_path", required=True, type=click.Path(path_type=Path))
@click.option("--l2", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@guarded
def train_clinical_cmd(manifest_path, split_file, covariates_path, schema_path, l2, seed, out):
    """Fit the covariates-only logistic model."""
    from .clinical import CovariateSchema, read_covariate_rows, train_clinical
    from .runmeta import write_run_manifest

    manifest = _load_manifest(manifest_path, split_file)
    schema = CovariateSchema.load(schema_path)
    rows_by_id = read_covariate_rows(covariates_path)
    records = [r for r in _records(manifest, "train" if manifest.splits else None)
               if r.image_id in rows_by_id]
    if not records:
        raise ConfigError("no training images with covariate rows")
    model = train_clinical(
        [rows_by_id[r.image_id] for r in records],
        [r.image_label for r in records],
        schema, l2=l2, seed=seed,
    )
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    write_run_manifest(
        out, "train-clinical",
        {"manifest": manifest_path, "covariates": covariates_path, "schema": schema_path,
         "split_file": split_file or ""},
        {"l2": l2}, seed,
    )
    click.echo(f"saved clinical model to {out} ({model.logistic.iterations} iterations)")


@main.command("train-combined")
@_manifest_options
@click.option("--classifier", "classifier_path", required=True, type=click.Path(path_type=Path))
@click.option("--covariates", "covariates_path", required=True, type=click.Path(path_type=Path))
@click.option("--schema", "schema_path", required=True, type=click.Path(path_type=Path))
@click.option("--epochs", default=30, show_default=True)
@click.option("--batch-size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@guarded
def train_combined_cmd(manifest_path, split_file, classifier_path, covariates_path,
                       schema_path, epochs, batch_size, seed, out):
    """Train the fused image+covariates layer on a frozen classifier."""
    from .classifier import ClassifierModel, write_curves
    from .clinical import CombinedTrainConfig, CovariateSchema, read_covariate_rows, train_combined
    from .runmeta import write_run_manifest

    manifest = _load_manifest(manifest_path, split_file)
    cls_model = ClassifierModel.load(classifier_path)
    schema = CovariateSchema.load(schema_path)
    rows = read_covariate_rows(covariates_path)
    config = CombinedTrainConfig(epochs=epochs, batch_size=batch_size, seed=seed)
    model, curves = train_combined(cls_model, manifest, rows, schema, config)
    model.save(out)
    write_curves(out / "curves.csv", curves)
    write_run_manifest(
        out, "train-combined",
        {"manifest": manifest_path, "classifier": classifier_path,
         "covariates": covariates_path, "schema": schema_path, "split_file": split_file or ""},
        config.to_json(), seed,
    )
    click.echo(f"saved combined model to {out}")


def _load_score_models(detector, classifier, malignancy_detector, subtype_detector, direct_model):
    from .classifier import ClassifierModel
    from .detector import DetectorModel

    return {
        "detector": DetectorModel.load(detector) if detector else None,
        "classifier": ClassifierModel.load(classifier) if classifier else None,
        "malignancy_detector": DetectorModel.load(malignancy_detector) if malignancy_detector else None,
        "subtype_detector": DetectorModel.load(subtype_detector) if subtype_detector else None,
        "direct_model": ClassifierModel.load(direct_model) if direct_model else None,
    }


@main.command()
@_manifest_options
@click.option("--split", default=None)
@click.option("--detector", type=click.Path(path_type=Path), default=None)
@click.option("--classifier", type=click.Path(path_type=Path), default=None)
@click.option("--malignancy-detector", type=click.Path(path_type=Path), default=None)
@click.option("--subtype-detector", type=click.Path(path_type=Path), default=None)
@click.option("--direct-model", type=click.Path(path_type=Path), default=None)
@click.option("--strategy", default=None,
              type=click.Choice(["direct", "two_stage", "one_step_malignancy", "one_step_subtype"]))
@click.option("--aggregator", default=None,
              type=click.Choice(["average", "maximum", "noisy_or"]))
@click.option("--sweep", is_flag=True, help="score every strategy/aggregator cell")
@click.option("--empty-probability", default=0.0, show_default=True)
@click.option("--verbatim-noisy-or", is_flag=True)
@click.option("--write-detections", is_flag=True,
              help="also dump the one_class detector output as detections.jsonl")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@guarded
def score(manifest_path, split_file, split, detector, classifier, malignancy_detector,
          subtype_detector, direct_model, strategy, aggregator, sweep,
          empty_probability, verbatim_noisy_or, write_detections, seed, out):
    """Produce image-level malignancy scores (one cell or the full sweep)."""
    from .detector import write_detections as dump_detections
    from .reporting import render_sweep, sweep_grid, write_sweep_csv
    from .runmeta import write_run_manifest
    from .scoring import sweep_scores, write_scores

    manifest = _load_manifest(manifest_path, split_file)
    records = _records(manifest, split)
    models = _load_score_models(detector, classifier, malignancy_detector,
                                subtype_detector, direct_model)
    out.mkdir(parents=True, exist_ok=True)

    if not sweep:
        if strategy is None:
            raise ConfigError("give --strategy or --sweep")
        needed = {
            "two_stage": ("detector", "classifier"),
            "one_step_malignancy": ("malignancy_detector",),
            "one_step_subtype": ("subtype_detector",),
            "direct": ("direct_model",),
        }[strategy]
        for name in needed:
            if models[name] is None:
                raise ConfigError(f"strategy {strategy} needs --{name.replace('_', '-')}")
        if strategy != "direct" and aggregator is None:
            raise ConfigError(f"strategy {strategy} needs --aggregator")
        kwargs = {name: models[name] for name in needed}
        cells = sweep_scores(_iter_images(manifest, records),
                             empty_probability=empty_probability,
                             verbatim_noisy_or=verbatim_noisy_or, **kwargs)
        key = ("direct", None) if strategy == "direct" else (strategy, aggregator)
        write_scores(out / "scores.jsonl", cells[key])
        click.echo(f"wrote {len(cells[key])} scores to {out / 'scores.jsonl'}")
    else:
        cells = sweep_scores(_iter_images(manifest, records),
                             empty_probability=empty_probability,
                             verbatim_noisy_or=verbatim_noisy_or,
                             **{k: v for k, v in models.items()})
        if not cells:
            raise ConfigError("sweep needs at least one model")
        for (cell_strategy, cell_aggregator), scores in cells.items():
            name = f"scores_{cell_strategy}_{cell_aggregator or 'none'}.jsonl"
            write_scores(out / name, scores)
        labels = {r.image_id: r.image_label for r in records}
        rows = sweep_grid(cells, labels)
        write_sweep_csv(rows, out / "sweep.csv")
        (out / "sweep.txt").write_text(render_sweep(rows), encoding="utf-8")
        click.echo(render_sweep(rows).rstrip())

    if write_detections:
        if models["detector"] is None:
            raise ConfigError("--write-detections needs --detector")
        dets = {image_id: models["detector"].detect(image)
                for image_id, image in _iter_images(manifest, records)}
        dump_detections(out / "detections.jsonl", dets)
        click.echo(f"wrote detections for {len(dets)} images")

    write_run_manifest(
        out, "score",
        {"manifest": manifest_path, "split_file": split_file or "",
         **{k: v or "" for k, v in {
             "detector": detector, "classifier": classifier,
             "malignancy_detector": malignancy_detector,
             "subtype_detector": subtype_detector, "direct_model": direct_model}.items()}},
        {"split": split, "strategy": strategy, "aggregator": aggregator, "sweep": sweep,
         "empty_probability": empty_probability, "verbatim_noisy_or": verbatim_noisy_or},
        seed,
    )


@main.command()
@_manifest_options
@click.option("--scores", "scores_path", required=True, type=click.Path(path_type=Path))
@click.option("--detections", "detections_path", default=None, type=click.Path(path_type=Path))
@click.option("--split", default=None)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@guarded
def evaluate(manifest_path, split_file, scores_path, detections_path, split, out):
    """Build the stratified metric report from score/detection files."""
    from .detector import read_detections
    from .reporting import render_text, stratified_report, write_report
    from .runmeta import write_run_manifest
    from .scoring import read_scores

    manifest = _load_manifest(manifest_path, split_file)
    scores = {s.image_id: s.probability for s in read_scores(scores_path)}
    detections = read_detections(detections_path) if detections_path else None
    report = stratified_report(manifest, scores, detections, split=split)
    write_report(report, out)
    write_run_manifest(
        out, "evaluate",
        {"manifest": manifest_path, "scores": scores_path,
         "detections": detections_path or "", "split_file": split_file or ""},
        {"split": split}, 0,
    )
    click.echo(render_text(report).rstrip())


@main.command("export-features")
@_manifest_options
@click.option("--model", "model_path", required=True, type=click.Path(path_type=Path))
@click.option("--split", default=None)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@guarded
def export_features_cmd(manifest_path, split_file, model_path, split, out):
    """Dump per-detection feature vectors for embedding plots."""
    from .detector import DetectorModel
    from .runmeta import write_run_manifest

    manifest = _load_manifest(manifest_path, split_file)
    records = _records(manifest, split)
    model = DetectorModel.load(model_path)
    ids, boxes, det_scores, feats = [], [], [], []
    for image_id, image in _iter_images(manifest, records):
        detections = model.detect(image)
        if not detections:
            continue
        vectors = model.export_features(image, detections)
        for det, vec in zip(detections, vectors):
            ids.append(image_id)
            boxes.append(det.box.corners())
            det_scores.append(det.score)
            feats.append(vec)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(
        out / "features.npz",
        image_ids=np.array(ids),
        boxes=np.array(boxes, dtype=np.float64).reshape(len(boxes), 4),
        scores=np.array(det_scores, dtype=np.float64),
        features=np.array(feats, dtype=np.float32).reshape(len(feats), -1),
    )
    write_run_manifest(
        out, "export-features",
        {"manifest": manifest_path, "model": model_path, "split_file": split_file or ""},
        {"split": split}, 0,
    )
    click.echo(f"wrote {len(ids)} feature vectors to {out / 'features.npz'}")


@main.command()
@click.option("--detector", type=click.Path(path_type=Path), default=None)
@click.option("--classifier", type=click.Path(path_type=Path), default=None)
@click.option("--malignancy-detector", type=click.Path(path_type=Path), default=None)
@click.option("--subtype-detector", type=click.Path(path_type=Path), default=None)
@click.option("--direct-model", type=click.Path(path_type=Path), default=None)
@click.option("--clinical", "clinical_path", type=click.Path(path_type=Path), default=None)
@click.option("--combined", "combined_path", type=click.Path(path_type=Path), default=None)
@click.option("--store", "store_path", required=True, type=click.Path(path_type=Path),
              help="annotation store directory")
@click.option("--static-dir", type=click.Path(path_type=Path), default=None,
              help="optional built UI to serve at /")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@guarded
def serve(detector, classifier, malignancy_detector, subtype_detector, direct_model,
          clinical_path, combined_path, store_path, static_dir, host, port):
    """Run the HTTP inference and annotation review service."""
    import uvicorn

    from .clinical import ClinicalModel, CombinedModel
    from .service.app import create_app

    models = _load_score_models(detector, classifier, malignancy_detector,
                                subtype_detector, direct_model)
    if clinical_path:
        path = Path(clinical_path)
        models["clinical"] = ClinicalModel.load(path if path.is_file() else path / "model.json")
    if combined_path:
        models["combined"] = CombinedModel.load(combined_path)
    app = create_app(models=models, store_dir=store_path, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
