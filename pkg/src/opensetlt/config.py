"""Flat run configuration: one JSON object, one key per field of :class:`TrainConfig`."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .regularizers import MaxNormPolicy, WeightDecayPolicy

# key -> help text; also drives `--help` output
KEY_DOCS = {
    "dataset": "path to a named-array .npz archive, or 'synthetic' to generate long-tail blobs",
    "dataset_checksum": "optional md5 of the dataset archive",
    "manifest": "path to a split manifest; empty builds one from seen_classes/label_fraction/split_seed",
    "seen_classes": "list of original class indices treated as seen",
    "label_fraction": "fraction of seen-class training samples that keep their label, in (0, 1]",
    "split_seed": "seed of the labelled-subset draw",
    "synth_num_classes": "synthetic: total number of classes (seen + unseen)",
    "synth_max_count": "synthetic: training samples of the largest class",
    "synth_imbalance_ratio": "synthetic: largest / smallest class count",
    "synth_feature_dim": "synthetic: input dimension",
    "synth_separation": "synthetic: distance of class means from the origin",
    "synth_noise": "synthetic: per-coordinate standard deviation",
    "synth_bridge_classes": "synthetic: trailing classes placed between pairs of other classes",
    "synth_bridge_offset": "synthetic: offset of bridge classes from the pair midpoint, in units of separation",
    "synth_test_per_class": "synthetic: test samples per class",
    "synth_seed": "synthetic: generator seed",
    "backbone": "encoder: mlp | conv28 | resnet18",
    "feature_dim": "pooled feature width d (mlp and conv28 only; resnet18 is 512)",
    "embed_dim": "projection-head embedding width",
    "epochs": "training epochs",
    "batch_size": "labelled batch size M",
    "mu": "unlabelled batch size is mu * M",
    "lr": "initial SGD learning rate",
    "momentum": "SGD momentum",
    "nesterov": "use Nesterov momentum",
    "lr_schedule": "cosine | constant",
    "weight_decay": "L2 coefficient for all parameters",
    "classifier_weight_decay": "L2 coefficient for the closed-set classifier (null = weight_decay)",
    "weight_decay_regime": "uniform | two_stage",
    "stage2_epochs": "two_stage: final epochs that train only the closed-set classifier",
    "max_norm": "project closed-set classifier rows onto a ball after each step",
    "max_norm_radius": "radius a of the max-norm ball",
    "lambda_sup": "weight of the supervised cross-entropy",
    "lambda_reg": "weight of the feature-center ETF regularisation",
    "lambda_mb": "weight of the multi-binary loss",
    "lambda_o": "weight of the open-set loss",
    "lambda_ui": "weight of the filtered inlier pseudo-label loss",
    "tau_r": "confidence threshold of the open-set targets",
    "tau_p": "confidence threshold of the inlier pseudo-labels",
    "inlier_gate": "pseudo-labels also require the binary head of the predicted class to vote inlier",
    "weak_noise": "vector inputs: weak-view jitter std",
    "strong_noise": "vector inputs: strong-view jitter std",
    "strong_drop": "vector inputs: strong-view coordinate dropout rate",
    "eval_batch_size": "batch size for validation/test passes",
    "seed": "run seed (weights, shuffling, augmentation)",
}


@dataclass
class TrainConfig:
    dataset: str = "synthetic"
    dataset_checksum: str | None = None
    manifest: str = ""
    seen_classes: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    label_fraction: float = 0.25
    split_seed: int = 0
    synth_num_classes: int = 7
    synth_max_count: int = 400
    synth_imbalance_ratio: float = 50.0
    synth_feature_dim: int = 16
    synth_separation: float = 3.0
    synth_noise: float = 1.0
    synth_bridge_classes: int = 0
    synth_bridge_offset: float = 0.0
    synth_test_per_class: int = 100
    synth_seed: int = 0
    backbone: str = "mlp"
    feature_dim: int = 64
    embed_dim: int = 128
    epochs: int = 100
    batch_size: int = 16
    mu: int = 1
    lr: float = 0.03
    momentum: float = 0.9
    nesterov: bool = False
    lr_schedule: str = "cosine"
    weight_decay: float = 5e-4
    classifier_weight_decay: float | None = None
    weight_decay_regime: str = "uniform"
    stage2_epochs: int = 0
    max_norm: bool = True
    max_norm_radius: float = 1.0
    lambda_sup: float = 1.0
    lambda_reg: float = 1.0
    lambda_mb: float = 1.0
    lambda_o: float = 1.0
    lambda_ui: float = 1.0
    tau_r: float = 0.5
    tau_p: float = 0.95
    inlier_gate: bool = True
    weak_noise: float = 0.1
    strong_noise: float = 0.5
    strong_drop: float = 0.2
    eval_batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        problems = _validate(self)
        if problems:
            raise ConfigError(problems)

    # -- views -----------------------------------------------------------
    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_sup, self.lambda_reg, self.lambda_mb, self.lambda_o,
                           self.lambda_ui, self.tau_r, self.tau_p, self.mu, self.inlier_gate)

    @property
    def max_norm_policy(self) -> MaxNormPolicy:
        return MaxNormPolicy(self.max_norm_radius, self.max_norm)

    @property
    def weight_decay_policy(self) -> WeightDecayPolicy:
        return WeightDecayPolicy(self.weight_decay, self.classifier_weight_decay,
                                 self.weight_decay_regime, self.stage2_epochs)

    def as_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes):
        d = self.as_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(k for k in d if k not in known)
        problems = [f"{k}: unknown key" for k in unknown]
        kwargs = {k: v for k, v in d.items() if k in known}
        try:
            cfg = cls(**kwargs)
        except ConfigError as exc:
            raise ConfigError(problems + exc.problems) from None
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a flat JSON object")
        return cls.from_dict(d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _validate(cfg):
    p = []

    def need(cond, key, msg):
        if not cond:
            p.append(f"{key}: {msg}, got {getattr(cfg, key)!r}")

    for key in ("split_seed", "synth_num_classes", "synth_max_count", "synth_feature_dim",
                "synth_test_per_class", "synth_bridge_classes", "synth_seed", "feature_dim", "embed_dim", "epochs",
                "batch_size", "mu", "stage2_epochs", "eval_batch_size", "seed"):
        need(_is_int(getattr(cfg, key)), key, "must be an integer")
    for key in ("label_fraction", "synth_imbalance_ratio", "synth_separation", "synth_noise", "synth_bridge_offset",
                "lr", "momentum", "weight_decay", "max_norm_radius", "lambda_sup", "lambda_reg",
                "lambda_mb", "lambda_o", "lambda_ui", "tau_r", "tau_p", "weak_noise",
                "strong_noise", "strong_drop"):
        need(_is_num(getattr(cfg, key)), key, "must be a finite number")
    for key in ("nesterov", "max_norm", "inlier_gate"):
        need(isinstance(getattr(cfg, key), bool), key, "must be true or false")
    if p:
        return p  # range checks below assume the types are right
    need(isinstance(cfg.dataset, str) and cfg.dataset, "dataset", "must be a path or 'synthetic'")
    need(isinstance(cfg.manifest, str), "manifest", "must be a string")
    need(isinstance(cfg.seen_classes, list) and cfg.seen_classes and all(_is_int(c) and c >= 0 for c in cfg.seen_classes),
         "seen_classes", "must be a non-empty list of class indices")
    need(0 < cfg.label_fraction <= 1, "label_fraction", "must lie in (0, 1]")
    need(cfg.synth_num_classes >= 2, "synth_num_classes", "must be >= 2")
    need(cfg.synth_max_count >= 1, "synth_max_count", "must be >= 1")
    need(cfg.synth_imbalance_ratio >= 1, "synth_imbalance_ratio", "must be >= 1")
    need(cfg.backbone in ("mlp", "conv28", "resnet18"), "backbone", "must be mlp, conv28 or resnet18")
    need(cfg.feature_dim >= 2, "feature_dim", "must be >= 2")
    need(cfg.embed_dim >= 1, "embed_dim", "must be >= 1")
    need(cfg.epochs >= 1, "epochs", "must be >= 1")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    need(cfg.mu >= 1, "mu", "must be >= 1")
    need(cfg.lr > 0, "lr", "must be > 0")
    need(0 <= cfg.momentum < 1, "momentum", "must lie in [0, 1)")
    need(cfg.lr_schedule in ("cosine", "constant"), "lr_schedule", "must be cosine or constant")
    need(cfg.weight_decay >= 0, "weight_decay", "must be >= 0")
    need(cfg.classifier_weight_decay is None or (_is_num(cfg.classifier_weight_decay) and cfg.classifier_weight_decay >= 0),
         "classifier_weight_decay", "must be null or a number >= 0")
    need(cfg.weight_decay_regime in ("uniform", "two_stage"), "weight_decay_regime", "must be uniform or two_stage")
    need(0 <= cfg.stage2_epochs < max(cfg.epochs, 1), "stage2_epochs", "must lie in [0, epochs)")
    need(cfg.max_norm_radius > 0, "max_norm_radius", "must be > 0")
    for key in ("lambda_sup", "lambda_reg", "lambda_mb", "lambda_o", "lambda_ui",
                "weak_noise", "strong_noise"):
        need(getattr(cfg, key) >= 0, key, "must be >= 0")
    for key in ("tau_r", "tau_p", "strong_drop"):
        need(0 <= getattr(cfg, key) <= 1, key, "must lie in [0, 1]")
    need(cfg.eval_batch_size >= 1, "eval_batch_size", "must be >= 1")
    return p


def describe_keys(keys=None):
    keys = keys or list(KEY_DOCS)
    defaults = TrainConfig().as_dict()
    width = max(len(k) for k in keys)
    return "\n".join(f"  {k:<{width}}  {KEY_DOCS[k]} (default: {json.dumps(defaults[k])})" for k in keys)
