"""End-to-end orchestration over the on-disk artifacts.

Each stage reads its inputs from the paths named in the config and writes
its outputs atomically, so a run interrupted mid-stage leaves only ``.partial``
files behind. ``run_pipeline`` chains the stages; running the equivalent
subcommands one at a time produces byte-identical artifacts because every
stage is a deterministic function of its input files and the config.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager

import numpy as np

from .errors import NoduleGcnError, StageError, ValidationError
from .extractor import (
    backbone_forward,
    backbone_from_checkpoint,
    extract_features,
    import_features,
    save_features,
)
from .formats import (
    atomic_output,
    read_checkpoint,
    read_manifest,
    read_nvol,
    write_checkpoint,
    write_manifest,
)
from .gcn import gcn_forward, gcn_from_checkpoint, slice_to_nodule
from .graphs import build_graph, normalize
from .metrics import UndefinedMetric, evaluation_report, roc_csv, roc_points
from .preprocess import (
    NoduleAnnotation,
    extract_patches,
    training_mean,
    validate_annotation,
)
from .synth import synth_generate
from .tensor import Tensor, no_grad
from .train import build_split_graph, nodule_predictions, train_extractor, train_gcn

STAGES = ("synth", "preprocess", "train-extractor", "extract", "train-gcn",
          "evaluate", "predict")


@contextmanager
def _stage(name):
    """Wraps package and I/O errors with the failing stage's name."""
    try:
        yield
    except StageError:
        raise
    except (NoduleGcnError, OSError) as exc:
        raise StageError(name, str(exc)) from exc


@contextmanager
def _log_file(path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    partial = path + ".partial"
    fh = open(partial, "w", encoding="utf-8")
    try:
        yield fh
    finally:
        fh.close()
    os.replace(partial, path)


def _write_text(path, text):
    with atomic_output(path) as fh:
        fh.write(text.encode("utf-8"))


def stage_synth(config):
    """Generates phantom volumes plus a manifest for the configured dataset."""
    with _stage("synth"):
        s = config.data["synth"]
        manifest_path = config.path("manifest")
        out_dir = os.path.dirname(manifest_path)
        written = synth_generate(
            out_dir,
            n_nodules=s["n_nodules"],
            positive_fraction=s["positive_fraction"],
            dims=tuple(s["dims"]),
            seed=config.seed,
        )
        if os.path.abspath(written) != manifest_path:
            os.replace(written, manifest_path)
    return {"manifest": manifest_path}


def stage_preprocess(config):
    """Validates every annotation and fills the manifest's dataset mean.

    The mean of the [0, 1] normalized training voxels is computed in one
    pass and written back into the manifest header, where every later
    stage (and ``predict``) reads it.
    """
    with _stage("preprocess"):
        manifest_path = config.path("manifest")
        manifest = read_manifest(manifest_path)
        manifest.dataset_mean = training_mean(_validated_train_volumes(manifest))
        write_manifest(manifest_path, manifest)
    return {"manifest": manifest_path, "dataset_mean": manifest.dataset_mean}


def _validated_train_volumes(manifest):
    """Checks every record against its volume; yields train-split voxels."""
    for record in manifest.records:
        nodule_id, voxels = read_nvol(manifest.resolve(record))
        if nodule_id != record.nodule_id:
            raise ValidationError(
                f"volume {record.volume_path} holds {nodule_id!r}, "
                f"manifest says {record.nodule_id!r}"
            )
        annotation = NoduleAnnotation(
            nodule_id=record.nodule_id,
            center=record.center,
            label=record.label,
            split=record.split,
            slice_range=record.slice_range,
        )
        validate_annotation(annotation, voxels.shape)
        if record.split == "train":
            yield voxels


def stage_train_extractor(config):
    with _stage("train-extractor"):
        manifest = read_manifest(config.path("manifest"))
        ckpt_path = config.path("extractor_checkpoint")
        with _log_file(config.path("extractor_log")) as log:
            ckpt = train_extractor(
                manifest,
                config=config.extractor_train(),
                backbone_config=config.backbone_config(),
                strategy=config.slices,
                seed=config.seed,
                log=log,
            )
        write_checkpoint(ckpt_path, ckpt)
    return {"checkpoint": ckpt_path, "epoch": ckpt.epoch, "val_acc": ckpt.val_acc}


def stage_extract(config):
    with _stage("extract"):
        manifest = read_manifest(config.path("manifest"))
        ckpt = read_checkpoint(config.path("extractor_checkpoint"))
        params = backbone_from_checkpoint(ckpt)
        feature_set = extract_features(manifest, params, strategy=config.slices)
        out_path = config.path("features")
        save_features(out_path, feature_set, strategy=config.slices)
    return {"features": out_path, "rows": feature_set.matrix.shape[0]}


def stage_train_gcn(config):
    with _stage("train-gcn"):
        feature_set = import_features(config.path("features"))
        ckpt_path = config.path("gcn_checkpoint")
        with _log_file(config.path("gcn_log")) as log:
            ckpt = train_gcn(
                feature_set,
                topology=config.topology,
                config=config.gcn_train(),
                seed=config.seed,
                activation=config.activation,
                log=log,
            )
        write_checkpoint(ckpt_path, ckpt)
    return {"checkpoint": ckpt_path, "epoch": ckpt.epoch, "val_acc": ckpt.val_acc}


def stage_evaluate(config, split="test"):
    """Scores the held-out split and writes report.json plus roc.csv."""
    with _stage("evaluate"):
        feature_set = import_features(config.path("features"))
        ckpt = read_checkpoint(config.path("gcn_checkpoint"))
        params = gcn_from_checkpoint(ckpt)
        topology = ckpt.config.get("topology", config.topology)
        activation = ckpt.config.get("activation", config.activation)
        graph = build_split_graph(feature_set, split, topology)
        probs = nodule_predictions(graph, params, activation)
        report = {
            "variant": config.variant,
            "seed": config.seed,
            "split": split,
            "graph": {"topology": topology, "slices": config.slices},
        }
        report.update(evaluation_report(graph.labels, probs, graph.nodule_ids))
        _write_text(config.path("report"), json.dumps(report, indent=2) + "\n")
        try:
            csv_text = roc_csv(roc_points(graph.labels, probs))
        except UndefinedMetric:
            csv_text = "fpr,tpr,threshold\n"
        _write_text(config.path("roc_csv"), csv_text)
    return report


def predict_nodule(config, volume_path, center, slice_range, nodule_id=None):
    """Scores one volume with the trained checkpoints; returns a JSON row."""
    with _stage("predict"):
        manifest = read_manifest(config.path("manifest"))
        if manifest.dataset_mean is None:
            raise StageError("predict", "manifest has no dataset_mean; run preprocess")
        file_id, voxels = read_nvol(volume_path)
        annotation = NoduleAnnotation(
            nodule_id=nodule_id or file_id,
            center=tuple(center),
            label=0,
            split="test",
            slice_range=tuple(slice_range),
        )
        validate_annotation(annotation, voxels.shape)
        patches = extract_patches(voxels, annotation, manifest.dataset_mean,
                                  strategy=config.slices)

        backbone = backbone_from_checkpoint(
            read_checkpoint(config.path("extractor_checkpoint"))
        )
        gcn_ckpt = read_checkpoint(config.path("gcn_checkpoint"))
        gcn_params = gcn_from_checkpoint(gcn_ckpt)
        topology = gcn_ckpt.config.get("topology", config.topology)
        activation = gcn_ckpt.config.get("activation", config.activation)

        pixels = np.stack([p.pixels for p in patches])
        with no_grad():
            features, _ = backbone_forward(Tensor(pixels), backbone)
            adj = normalize(build_graph(len(patches), topology))
            p = gcn_forward(adj, features, gcn_params, train_mode=False,
                            act=activation)
        prob = float(slice_to_nodule(p, [(0, len(patches))])[0])
    return {
        "nodule_id": annotation.nodule_id,
        "prob": round(prob, 6),
        "label": int(prob >= 0.5),
        "slices": len(patches),
    }


def run_pipeline(config):
    """preprocess, train-extractor, extract, train-gcn, evaluate, in order."""
    stage_preprocess(config)
    stage_train_extractor(config)
    stage_extract(config)
    stage_train_gcn(config)
    return stage_evaluate(config)
