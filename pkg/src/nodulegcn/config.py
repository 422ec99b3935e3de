"""Run configuration: one JSON document covering every stage.

Missing keys fall back to the full training recipe (extractor lr 0.001 with
patience-20 halving over 50 epochs, GCN lr 0.0001 with dropout 0.3 over 200
epochs, fully connected graphs over all nodule slices, CBAM on). Unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import json
import os

from .errors import ConfigError
from .extractor import BackboneConfig
from .graphs import TOPOLOGIES
from .preprocess import SLICE_STRATEGIES
from .train import ExtractorTrainConfig, GcnTrainConfig

ACTIVATIONS = ("leaky_relu", "relu")

DEFAULTS = {
    "seed": 0,
    "variant": "ae-gcn",
    "paths": {
        "workdir": ".",
        "manifest": "manifest.jsonl",
        "features": "features.nfea",
        "extractor_checkpoint": "checkpoints/extractor.nckp",
        "gcn_checkpoint": "checkpoints/gcn.nckp",
        "report": "report.json",
        "roc_csv": "roc.csv",
        "extractor_log": "logs/extractor.jsonl",
        "gcn_log": "logs/gcn.jsonl",
    },
    "graph": {"topology": "full", "slices": "all"},
    "cbam": {"enabled": True, "channel": True, "spatial": True, "reduction": 8, "kernel": 7},
    "backbone": {"input_size": 60, "widths": [32, 64, 128], "feature_dim": 512},
    "gcn": {"activation": "leaky_relu", "dropout": 0.3},
    "train": {
        "extractor": {
            "lr0": 0.001,
            "plateau_patience": 20,
            "lr_factor": 0.5,
            "epochs": 50,
            "batch_size": 32,
        },
        "gcn": {"lr": 0.0001, "epochs": 200},
    },
    "synth": {"n_nodules": 60, "positive_fraction": 0.3, "dims": [64, 64, 64]},
}


def _merge(base, override, trail):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(trail + (key,))!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(
                    f"config key {'.'.join(trail + (key,))!r} must be an object"
                )
            out[key] = _merge(base[key], value, trail + (key,))
        else:
            out[key] = value
    return out


class PipelineConfig:
    def __init__(self, data=None):
        self.data = _merge(DEFAULTS, data or {}, ())
        self._validate()

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        config = cls(data)
        config.source = os.path.abspath(path)
        return config

    def _validate(self):
        graph = self.data["graph"]
        if graph["topology"] not in TOPOLOGIES:
            raise ConfigError(
                f"graph.topology must be one of {TOPOLOGIES}, got {graph['topology']!r}"
            )
        if graph["slices"] not in SLICE_STRATEGIES:
            raise ConfigError(
                f"graph.slices must be one of {SLICE_STRATEGIES}, got {graph['slices']!r}"
            )
        if self.data["gcn"]["activation"] not in ACTIVATIONS:
            raise ConfigError(
                f"gcn.activation must be one of {ACTIVATIONS}, "
                f"got {self.data['gcn']['activation']!r}"
            )
        if not isinstance(self.data["seed"], int):
            raise ConfigError(f"seed must be an integer, got {self.data['seed']!r}")

    # -- accessors -----------------------------------------------------

    @property
    def seed(self):
        return self.data["seed"]

    @seed.setter
    def seed(self, value):
        self.data["seed"] = int(value)

    @property
    def variant(self):
        return self.data["variant"]

    @variant.setter
    def variant(self, value):
        self.data["variant"] = str(value)

    @property
    def topology(self):
        return self.data["graph"]["topology"]

    @property
    def slices(self):
        return self.data["graph"]["slices"]

    @property
    def activation(self):
        return self.data["gcn"]["activation"]

    def path(self, key):
        workdir = self.data["paths"]["workdir"]
        value = self.data["paths"][key]
        if key == "workdir":
            return os.path.abspath(value)
        return os.path.join(os.path.abspath(workdir), value)

    def backbone_config(self):
        b = self.data["backbone"]
        c = self.data["cbam"]
        return BackboneConfig(
            input_size=b["input_size"],
            widths=tuple(b["widths"]),
            feature_dim=b["feature_dim"],
            cbam_enabled=c["enabled"],
            cbam_channel=c["channel"],
            cbam_spatial=c["spatial"],
            cbam_reduction=c["reduction"],
            cbam_kernel=c["kernel"],
        )

    def extractor_train(self):
        return ExtractorTrainConfig(**self.data["train"]["extractor"])

    def gcn_train(self):
        t = self.data["train"]["gcn"]
        return GcnTrainConfig(lr=t["lr"], dropout=self.data["gcn"]["dropout"],
                              epochs=t["epochs"])

    def to_json(self):
        return copy.deepcopy(self.data)
