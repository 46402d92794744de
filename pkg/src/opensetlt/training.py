"""Joint optimisation over labelled and unlabelled batches."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .config import TrainConfig
from .data import (
    AugmentParams,
    Dataset,
    LongTailSpec,
    SplitManifest,
    augment_batch,
    load_medmnist,
    make_split,
    synth_longtail,
    to_model_input,
)
from .errors import DatasetError, MismatchError, NonFiniteLossError
from .losses import (
    TERMS,
    LossWeights,
    confident_mask,
    filtered_inlier_loss,
    fuse_open_set_targets,
    inlier_filter,
    multi_binary_loss,
    open_set_loss,
    reg_loss,
    sup_ce,
    total_loss,
)
from .model import OpenSetNet, apply_etf_head, build_model, feature_centers
from .regularizers import project_module_rows_

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "OPENSETLT_DATA_ROOT"
METRIC_COLUMNS = (
    "epoch", "lr", "loss_total", "loss_sup", "loss_reg", "loss_mb", "loss_o", "loss_ui",
    "frac_confident", "frac_pseudo", "max_row_norm", "val_closed_acc",
)


# ---------------------------------------------------------------------------
# data plumbing


def resolve_dataset(cfg: TrainConfig) -> Dataset:
    if cfg.dataset == "synthetic":
        spec = LongTailSpec(
            num_classes=cfg.synth_num_classes,
            max_count=cfg.synth_max_count,
            imbalance_ratio=cfg.synth_imbalance_ratio,
            feature_dim=cfg.synth_feature_dim,
            seed=cfg.synth_seed,
            test_per_class=cfg.synth_test_per_class,
            separation=cfg.synth_separation,
            noise=cfg.synth_noise,
            bridge_classes=cfg.synth_bridge_classes,
            bridge_offset=cfg.synth_bridge_offset,
        )
        return synth_longtail(spec)
    path = Path(cfg.dataset)
    if not path.is_absolute() and not path.exists() and os.environ.get(DATA_ROOT_ENV):
        path = Path(os.environ[DATA_ROOT_ENV]) / path
    return load_medmnist(path, checksum=cfg.dataset_checksum)


def resolve_manifest(cfg: TrainConfig, dataset: Dataset) -> SplitManifest:
    if cfg.manifest:
        manifest = SplitManifest.load(cfg.manifest)
    else:
        manifest = make_split(dataset, cfg.seen_classes, cfg.label_fraction, cfg.split_seed)
    manifest.check_dataset(dataset)
    return manifest


class GuardedLabels:
    """Training-side view of the labels: only labelled ids may be read.

    Every read of a sample whose class is unseen is counted; the training path
    never performs one, and the counter lands in the run record.
    """

    def __init__(self, dataset: Dataset, manifest: SplitManifest):
        self._y = dataset.train_y
        self._allowed = set(manifest.labelled_ids)
        self._index = manifest.class_index()
        self.unseen_reads = 0

    def __call__(self, ids):
        out = np.empty(len(ids), dtype=np.int64)
        for j, i in enumerate(ids):
            c = int(self._y[i])
            if c not in self._index:
                self.unseen_reads += 1
                raise DatasetError(f"training path attempted to read unseen-class label of sample {i}")
            if i not in self._allowed:
                raise DatasetError(f"sample {i} is not in the labelled set")
            out[j] = self._index[c]
        return out


@dataclass
class TrainingData:
    x_lab: np.ndarray
    y_lab: np.ndarray
    lab_ids: np.ndarray
    x_unlab: np.ndarray
    unlab_ids: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    mean: float
    std: float
    input_shape: tuple
    num_classes: int
    unseen_label_reads: int = 0

    @classmethod
    def build(cls, dataset: Dataset, manifest: SplitManifest):
        manifest.check_dataset(dataset)
        labels = GuardedLabels(dataset, manifest)
        lab_ids = np.asarray(manifest.labelled_ids, dtype=np.int64)
        unlab_ids = np.asarray(manifest.unlabelled_ids, dtype=np.int64)
        index = manifest.class_index()
        if manifest.val_source == "val":
            x_val, y_val_orig = dataset.val_x[manifest.val_ids], dataset.val_y[manifest.val_ids]
        else:
            x_val, y_val_orig = dataset.train_x[manifest.val_ids], dataset.train_y[manifest.val_ids]
        y_val = np.array([index[int(c)] for c in y_val_orig], dtype=np.int64)
        x_train = dataset.train_x
        return cls(
            x_lab=x_train[lab_ids],
            y_lab=labels(lab_ids),
            lab_ids=lab_ids,
            x_unlab=x_train[unlab_ids],
            unlab_ids=unlab_ids,
            x_val=x_val,
            y_val=y_val,
            mean=float(x_train.mean()),
            std=float(x_train.std()) or 1.0,
            input_shape=dataset.input_shape,
            num_classes=manifest.num_seen,
            unseen_label_reads=labels.unseen_reads,
        )


# ---------------------------------------------------------------------------
# single step


def compute_losses(model: OpenSetNet, x_lab, y_lab, x_weak, x_strong, weights: LossWeights):
    """All five loss terms plus the unlabelled-batch mask statistics.

    Labelled and unlabelled inputs go through separate forward passes, so with
    the unlabelled weights at zero the labelled gradient is exactly that of
    plain supervised training.
    """
    K = model.num_classes
    y_lab = torch.as_tensor(y_lab, dtype=torch.long)
    f_l = model.encode(x_lab)
    terms = {"sup": sup_ce(model.closed_head(f_l), y_lab)}
    etf_logits, present = apply_etf_head(feature_centers(f_l, y_lab, K), model.etf)
    terms["reg"] = reg_loss(etf_logits, present)
    terms["mb"] = multi_binary_loss(model.multi_binary_scores(model.proj_head(f_l)), y_lab)

    stats = {"frac_confident": 0.0, "frac_pseudo": 0.0}
    if x_weak is not None and len(x_weak) and (weights.o or weights.ui):
        n = x_weak.shape[0]
        f_u = model.encode(torch.cat([x_weak, x_strong]))
        f_w, f_s = f_u[:n], f_u[n:]
        with torch.no_grad():
            z_w = F.softmax(model.closed_head(f_w), dim=-1)
            pairs_w = model.multi_binary_scores(model.proj_head(f_w))
            targets = fuse_open_set_targets(z_w, pairs_w)
            stats["frac_confident"] = float(confident_mask(targets, weights.tau_r).float().mean())
            stats["frac_pseudo"] = float(inlier_filter(z_w, pairs_w, weights.tau_p, weights.inlier_gate)[1].float().mean())
        terms["o"] = open_set_loss(targets, model.open_head(f_s), weights.tau_r)
        terms["ui"] = filtered_inlier_loss(z_w, pairs_w, model.closed_head(f_s), weights.tau_p,
                                           weights.inlier_gate)
    else:
        terms["o"] = torch.zeros(())
        terms["ui"] = torch.zeros(())
    return terms, stats


def train_step(model, optimizer, batch, weights: LossWeights, max_norm=None):
    """One SGD step on the weighted loss, then the max-norm projection of the
    closed-set classifier rows. ``batch = (x_lab, y_lab, x_weak, x_strong)``.

    Returns the per-term loss record (floats).
    """
    x_lab, y_lab, x_weak, x_strong = batch
    model.train()
    terms, stats = compute_losses(model, x_lab, y_lab, x_weak, x_strong, weights)
    loss = total_loss(terms, weights)
    optimizer.zero_grad(set_to_none=True)
    if torch.is_tensor(loss) and loss.requires_grad:
        loss.backward()
        optimizer.step()
    if max_norm is not None and max_norm.enabled:
        project_module_rows_(model.closed_head, max_norm.radius)
    record = {name: float(terms[name].detach()) for name in TERMS}
    record["total"] = float(loss.detach()) if torch.is_tensor(loss) else float(loss)
    record.update(stats)
    return record


# ---------------------------------------------------------------------------
# schedule / batching


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    # cos(7 pi k / 16K): decays to ~0.2 lr, the usual semi-supervised schedule
    return cfg.lr * math.cos(7.0 * math.pi * step / (16.0 * max(total_steps, 1)))


def steps_per_epoch(n_unlab: int, cfg: TrainConfig) -> int:
    return max(1, math.ceil(n_unlab / (cfg.mu * cfg.batch_size)))


def _labelled_stream(n, batch_size, steps, seed, epoch):
    """``steps`` batches of indices, cycling over reshuffled passes."""
    out, buf, p = [], np.empty(0, dtype=np.int64), 0
    for _ in range(steps):
        while len(buf) < batch_size:
            buf = np.concatenate([buf, np.random.default_rng([seed, epoch, 1, p]).permutation(n)])
            p += 1
        out.append(buf[:batch_size])
        buf = buf[batch_size:]
    return out


def epoch_batches(data: TrainingData, cfg: TrainConfig, epoch: int):
    steps = steps_per_epoch(len(data.unlab_ids), cfg)
    u_bs = cfg.mu * cfg.batch_size
    order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(data.unlab_ids))
    lab = _labelled_stream(len(data.lab_ids), min(cfg.batch_size, len(data.lab_ids)), steps, cfg.seed, epoch)
    aug = AugmentParams(weak_noise=cfg.weak_noise, strong_noise=cfg.strong_noise, strong_drop=cfg.strong_drop)
    for s in range(steps):
        li = lab[s]
        ui = order[s * u_bs:(s + 1) * u_bs]
        x_l = augment_batch(data.x_lab[li], data.lab_ids[li], "weak", cfg.seed, epoch, stream=0, params=aug)
        x_w = augment_batch(data.x_unlab[ui], data.unlab_ids[ui], "weak", cfg.seed, epoch, stream=1, params=aug)
        x_s = augment_batch(data.x_unlab[ui], data.unlab_ids[ui], "strong", cfg.seed, epoch, stream=1, params=aug)
        yield (
            to_model_input(x_l),
            torch.as_tensor(data.y_lab[li]),
            to_model_input(x_w),
            to_model_input(x_s),
        )


# ---------------------------------------------------------------------------
# checkpoints


def source_revision():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"opensetlt-{__version__}"


def save_checkpoint(path, model: OpenSetNet, meta: dict, optimizer=None):
    """Single ``.npz`` archive: ``model/<name>`` arrays, ``etf``, optional
    ``optim/<i>`` momentum buffers, and ``meta`` (a JSON string)."""
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["etf"] = model.etf.detach().cpu().numpy().astype(np.float64)
    if optimizer is not None:
        params = [p for g in optimizer.param_groups for p in g["params"]]
        for i, p in enumerate(params):
            buf = optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                arrays[f"optim/{i}"] = buf.detach().cpu().numpy()
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return Path(path)


def load_checkpoint(path):
    """Return ``(model, meta, optim_buffers)`` from a checkpoint archive."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: np.array(z[k]) for k in z.files}
    meta = json.loads(str(arrays["meta"]))
    cfg = TrainConfig.from_dict(meta["config"])
    model = build_model(cfg.backbone, tuple(meta["input_shape"]), meta["num_classes"],
                        cfg.feature_dim, cfg.embed_dim, etf_seed=cfg.seed, seed=cfg.seed)
    state = {k[len("model/"):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(state)
    optim = {int(k.split("/")[1]): torch.as_tensor(v) for k, v in arrays.items() if k.startswith("optim/")}
    return model, meta, optim


# ---------------------------------------------------------------------------
# fit


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("nan")
    config: dict = field(default_factory=dict)
    config_digest: str = ""
    source_revision: str = ""
    unseen_label_reads: int = 0

    def add(self, row):
        self.epochs.append(row)
        accs = [r["val_closed_acc"] for r in self.epochs]
        self.best_epoch = int(self.epochs[int(np.argmax(accs))]["epoch"])
        self.best_val_acc = float(max(accs))

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.epochs:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
        return buf.getvalue()

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class FitResult:
    record: RunRecord
    model: OpenSetNet
    best_state: dict
    data: TrainingData

    def best_model(self):
        self.model.load_state_dict(self.best_state)
        return self.model


@torch.no_grad()
def predict(model: OpenSetNet, x, batch_size=512):
    """Eval-mode outputs as numpy: closed logits, open logits, binary pairs."""
    model.eval()
    out = {"closed": [], "open": [], "pairs": []}
    for s in range(0, len(x), batch_size):
        o = model(to_model_input(x[s:s + batch_size]))
        for k in out:
            out[k].append(o[k].double().numpy())
    return {k: np.concatenate(v) if v else np.empty(0) for k, v in out.items()}


def _make_optimizer(model, cfg, stage2=False):
    policy = cfg.weight_decay_policy
    if stage2:
        groups = [{"params": list(model.closed_head.parameters()),
                   "weight_decay": policy.classifier_coefficient, "name": "closed_head"}]
    else:
        groups = policy.param_groups(model)
    return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov)


def _stage2_step(model, optimizer, batch, cfg):
    x_lab, y_lab = batch[0], batch[1]
    model.train()
    with torch.no_grad():
        feats = model.encode(x_lab)
    loss = sup_ce(model.closed_head(feats), y_lab)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("sup", float(loss))
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    if cfg.max_norm:
        project_module_rows_(model.closed_head, cfg.max_norm_radius)
    rec = {name: 0.0 for name in TERMS}
    value = float(loss.detach())
    rec.update(sup=value, total=cfg.lambda_sup * value, frac_confident=0.0, frac_pseudo=0.0)
    return rec


def fit(cfg: TrainConfig, dataset: Dataset | None = None, manifest: SplitManifest | None = None,
        out_dir=None, resume=None, log_every: int = 0) -> FitResult:
    """Train for ``cfg.epochs`` epochs and keep the best-validation weights.

    ``resume`` is a checkpoint written by an earlier call with the same
    config; training continues after its epoch and reproduces the remaining
    trajectory exactly. With ``out_dir`` the run writes ``metrics.csv``,
    ``run_record.json``, ``checkpoint_best.npz`` and ``checkpoint_last.npz``.
    """
    if cfg.epochs < 1:
        raise ValueError("epochs must be >= 1")
    torch.use_deterministic_algorithms(True)
    dataset = dataset if dataset is not None else resolve_dataset(cfg)
    manifest = manifest if manifest is not None else resolve_manifest(cfg, dataset)
    data = TrainingData.build(dataset, manifest)
    K = data.num_classes
    model = build_model(cfg.backbone, data.input_shape, K, cfg.feature_dim, cfg.embed_dim,
                        etf_seed=cfg.seed, seed=cfg.seed)
    model.set_input_stats(data.mean, data.std)
    weights = cfg.loss_weights
    policy = cfg.max_norm_policy
    stage2_from = cfg.epochs - cfg.stage2_epochs if cfg.weight_decay_regime == "two_stage" else cfg.epochs
    n_steps = steps_per_epoch(len(data.unlab_ids), cfg)
    total_steps = n_steps * cfg.epochs

    record = RunRecord(config=cfg.as_dict(), config_digest=cfg.digest(),
                       source_revision=source_revision(),
                       unseen_label_reads=data.unseen_label_reads)
    start_epoch, step = 0, 0
    optimizer = _make_optimizer(model, cfg)
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    if resume is not None:
        r_model, meta, buffers = load_checkpoint(resume)
        if meta["config_digest"] != cfg.digest():
            raise MismatchError("checkpoint was written with a different config")
        model.load_state_dict(r_model.state_dict())
        start_epoch, step = meta["epoch"] + 1, meta["step"]
        if start_epoch >= stage2_from:
            optimizer = _make_optimizer(model, cfg, stage2=True)
        params = [p for g in optimizer.param_groups for p in g["params"]]
        for i, buf in buffers.items():
            optimizer.state[params[i]]["momentum_buffer"] = buf.clone()
        for row in meta.get("history", []):
            record.add(row)
        # prefer the best checkpoint next to the resume file, so a copied run
        # directory stays self-contained
        sibling = Path(resume).parent / "checkpoint_best.npz"
        best_path = sibling if sibling.exists() else meta.get("best_state_path")
        if best_path:
            best_model, _, _ = load_checkpoint(best_path)
            best_state = {k: v.clone() for k, v in best_model.state_dict().items()}

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    meta_base = {
        "config": cfg.as_dict(), "config_digest": cfg.digest(), "num_classes": K,
        "seen_classes": manifest.seen_classes, "unseen_classes": manifest.unseen_classes,
        "input_shape": list(data.input_shape),
        "source_revision": record.source_revision, "dataset": manifest.dataset,
    }

    for epoch in range(start_epoch, cfg.epochs):
        if epoch == stage2_from and epoch > 0 and cfg.stage2_epochs:
            optimizer = _make_optimizer(model, cfg, stage2=True)
        sums = {k: 0.0 for k in TERMS + ("total", "frac_confident", "frac_pseudo")}
        lr = cfg.lr
        for s, batch in enumerate(epoch_batches(data, cfg, epoch)):
            lr = lr_at(cfg, step, total_steps)
            for g in optimizer.param_groups:
                g["lr"] = lr
            if epoch >= stage2_from:
                rec = _stage2_step(model, optimizer, batch, cfg)
            else:
                rec = train_step(model, optimizer, batch, weights, policy)
            for k in sums:
                sums[k] += rec[k]
            step += 1
            if log_every and step % log_every == 0:
                logger.info("epoch %d step %d loss %.4f", epoch, step, rec["total"])
        pred = predict(model, data.x_val, cfg.eval_batch_size)
        val_acc = 100.0 * float(np.mean(np.argmax(pred["closed"], axis=1) == data.y_val))
        row = {"epoch": epoch, "lr": lr, "val_closed_acc": val_acc,
               "max_row_norm": float(model.closed_head.weight.detach().norm(dim=1).max())}
        for k in TERMS:
            row[f"loss_{k}"] = sums[k] / n_steps
        row["loss_total"] = sums["total"] / n_steps
        row["frac_confident"] = sums["frac_confident"] / n_steps
        row["frac_pseudo"] = sums["frac_pseudo"] / n_steps
        improved = not record.epochs or val_acc > record.best_val_acc
        record.add(row)
        if improved:
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        logger.info("epoch %d loss %.4f val %.2f", epoch, row["loss_total"], val_acc)
        if out is not None:
            meta = dict(meta_base, epoch=epoch, step=step, history=record.epochs,
                        best_epoch=record.best_epoch)
            if improved:
                save_checkpoint(out / "checkpoint_best.npz", model, meta)
            meta["best_state_path"] = str(out / "checkpoint_best.npz")
            save_checkpoint(out / "checkpoint_last.npz", model, meta, optimizer)

    if out is not None:
        (out / "metrics.csv").write_text(record.metrics_csv())
        (out / "run_record.json").write_text(record.to_json())
    return FitResult(record, model, best_state, data)
