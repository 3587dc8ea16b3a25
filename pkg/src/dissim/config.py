"""Run configuration: a single JSON document driving training and evaluation.

A resolved config materializes every defaulted field, carries a schema
version and provenance notes, and is sufficient to rerun the experiment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import nn
from .checkpoint import model_config_from_dict
from .data import AugmentPolicy
from .repsim import Metric
from .training import DissimConfig

CONFIG_SCHEMA_VERSION = 1

NOTES = {
    "tap_order": "taps numbered 1..k in depth order over post-addition, pre-ReLU points",
    "augmentation": "AutoAugment replaced by horizontal flip (deliberate deviation)",
}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "cifar10"            # "cifar10" | "synth"
    dir: str | None = None           # cifar root; DISSIM_DATA_DIR fallback applies
    n_train: int = 4096              # synth only
    n_test: int = 1024
    classes: int = 10
    side: int = 32
    seed: int = 0

    def validate(self):
        if self.kind not in ("cifar10", "synth"):
            raise ConfigError(f"dataset.kind must be 'cifar10' or 'synth', got {self.kind!r}")


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: str | dict = "resnet-s"
    n_models: int = 2
    seed: int = 0
    out_dir: str = "runs/out"
    training: DissimConfig = field(default_factory=DissimConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    eval_batch_size: int = 256

    def model_config(self) -> nn.ModelConfig:
        if isinstance(self.model, str):
            if self.model not in nn.PRESETS:
                raise ConfigError(f"unknown model preset {self.model!r}; choices: {sorted(nn.PRESETS)}")
            return nn.PRESETS[self.model]
        return model_config_from_dict(self.model)

    def validate(self):
        self.dataset.validate()
        self.model_config().validate()
        if self.n_models < 1:
            raise ConfigError("n_models must be >= 1")
        taps = set(self.training.tap_ids)
        known = {t.id for t in nn.build_model(self.model_config(), 0).taps}
        if taps - known:
            raise ConfigError(f"tap_ids {sorted(taps - known)} not present in model "
                              f"(valid ids 1..{len(known)})")


def _dissim_to_json(t: DissimConfig) -> dict:
    return {
        "metric": t.metric.value,
        "lambda": t.lambda_,
        "tap_ids": list(t.tap_ids),
        "proj_lr": t.proj_lr,
        "proj_steps": t.proj_steps,
        "epochs": t.epochs,
        "batch_size": t.batch_size,
        "base_lr": t.base_lr,
        "momentum": t.momentum,
        "nesterov": t.nesterov,
        "weight_decay": t.weight_decay,
        "seed": t.seed,
    }


def to_json_dict(cfg: RunConfig) -> dict:
    return {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "dataset": {
            "kind": cfg.dataset.kind, "dir": cfg.dataset.dir,
            "n_train": cfg.dataset.n_train, "n_test": cfg.dataset.n_test,
            "classes": cfg.dataset.classes, "side": cfg.dataset.side,
            "seed": cfg.dataset.seed,
        },
        "model": cfg.model,
        "n_models": cfg.n_models,
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "training": _dissim_to_json(cfg.training),
        "augment": {
            "crop_padding": cfg.augment.crop_padding,
            "cutout_size": cfg.augment.cutout_size,
            "horizontal_flip": cfg.augment.horizontal_flip,
            "enabled": cfg.augment.enabled,
        },
        "eval_batch_size": cfg.eval_batch_size,
        "notes": NOTES,
    }


def _pick(d: dict, keys: set, where: str) -> None:
    unknown = set(d) - keys
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def from_json_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    version = doc.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"config schema_version {version} unsupported "
                          f"(this build reads {CONFIG_SCHEMA_VERSION})")
    _pick(doc, {"schema_version", "dataset", "model", "n_models", "seed", "out_dir",
                "training", "augment", "eval_batch_size", "notes"}, "config")
    ds_doc = dict(doc.get("dataset", {}))
    _pick(ds_doc, {"kind", "dir", "n_train", "n_test", "classes", "side", "seed"}, "dataset")
    tr_doc = dict(doc.get("training", {}))
    _pick(tr_doc, {"metric", "lambda", "tap_ids", "proj_lr", "proj_steps", "epochs",
                   "batch_size", "base_lr", "momentum", "nesterov", "weight_decay",
                   "seed"}, "training")
    aug_doc = dict(doc.get("augment", {}))
    _pick(aug_doc, {"crop_padding", "cutout_size", "horizontal_flip", "enabled"}, "augment")
    try:
        training = DissimConfig(
            metric=Metric.parse(tr_doc.get("metric", "ExpVar")),
            lambda_=float(tr_doc.get("lambda", 1.0)),
            tap_ids=list(tr_doc.get("tap_ids", [])),
            proj_lr=float(tr_doc.get("proj_lr", 0.01)),
            proj_steps=int(tr_doc.get("proj_steps", 1)),
            epochs=int(tr_doc.get("epochs", 30)),
            batch_size=int(tr_doc.get("batch_size", 128)),
            base_lr=float(tr_doc.get("base_lr", 0.1)),
            momentum=float(tr_doc.get("momentum", 0.9)),
            nesterov=bool(tr_doc.get("nesterov", True)),
            weight_decay=float(tr_doc.get("weight_decay", 5e-4)),
            seed=int(tr_doc.get("seed", doc.get("seed", 0))),
        )
    except ValueError as exc:
        raise ConfigError(f"training: {exc}") from exc
    cfg = RunConfig(
        dataset=DatasetSpec(**ds_doc) if ds_doc else DatasetSpec(),
        model=doc.get("model", "resnet-s"),
        n_models=int(doc.get("n_models", 2)),
        seed=int(doc.get("seed", 0)),
        out_dir=str(doc.get("out_dir", "runs/out")),
        training=training,
        augment=AugmentPolicy(**aug_doc) if aug_doc else AugmentPolicy(),
        eval_batch_size=int(doc.get("eval_batch_size", 256)),
    )
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return from_json_dict(doc)


def config_hash(cfg: RunConfig) -> str:
    """Experiment identity: the resolved config minus the output location."""
    doc = to_json_dict(cfg)
    doc.pop("out_dir")
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_resolved(cfg: RunConfig, path) -> None:
    doc = to_json_dict(cfg)
    doc["config_hash"] = config_hash(cfg)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
