"""Closed-set / open-set accuracy, hard-threshold outlier baselines and reports.

Predictions use ``np.argmax``, so ties resolve to the lowest index.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import softmax

from .data import Dataset, SplitManifest
from .errors import MismatchError
from .training import predict


def _outputs(model_or_outputs, x, batch_size=512):
    if isinstance(model_or_outputs, dict):
        return model_or_outputs
    return predict(model_or_outputs, x, batch_size)


def closed_accuracy(closed_logits, labels, num_classes=None):
    """``(accuracy %, per-class accuracy %)`` of ``argmax`` over the K closed outputs."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("closed-set evaluation needs a non-empty test set")
    pred = np.argmax(closed_logits, axis=1)
    K = num_classes or closed_logits.shape[1]
    per_class = [
        float(100.0 * np.mean(pred[labels == k] == k)) if np.any(labels == k) else float("nan")
        for k in range(K)
    ]
    return float(100.0 * np.mean(pred == labels)), per_class


def open_accuracy(open_logits):
    """Percentage of (unseen-class) samples routed to the outlier slot, index K."""
    if len(open_logits) == 0:
        raise ValueError("open-set evaluation needs a non-empty unseen-class test set")
    K1 = open_logits.shape[1]
    return float(100.0 * np.mean(np.argmax(open_logits, axis=1) == K1 - 1))


def eval_closed(model, x, labels, batch_size=512):
    """Closed-set accuracy on seen-class samples; reads only the K closed outputs."""
    if len(x) == 0:
        raise ValueError("closed-set evaluation needs a non-empty test set")
    out = _outputs(model, x, batch_size)
    return closed_accuracy(out["closed"], labels)


def eval_open(model, x, batch_size=512):
    """Open-set accuracy on unseen-class samples; reads only the K+1 open outputs."""
    if len(x) == 0:
        raise ValueError("open-set evaluation needs a non-empty unseen-class test set")
    out = _outputs(model, x, batch_size)
    return open_accuracy(out["open"])


def inlier_scores(outputs, score="softmax"):
    """Per-sample inlier confidence: max closed softmax, or max binary inlier score."""
    if score == "softmax":
        return softmax(outputs["closed"], axis=1).max(axis=1)
    if score == "binary":
        return outputs["pairs"][..., 0].max(axis=1)
    raise ValueError(f"score must be 'softmax' or 'binary', got {score!r}")


def threshold_outlier_eval(model, x, tau, score="softmax", batch_size=512):
    """Hard-threshold detection rate (%): a sample is an outlier iff its inlier
    score is ``<= tau``. Meant for unseen-class samples and for models trained
    without an open-set head."""
    if len(x) == 0:
        return float("nan")
    s = inlier_scores(_outputs(model, x, batch_size), score)
    return float(100.0 * np.mean(s <= tau))


@dataclass
class ThresholdSweep:
    taus: list
    open_acc: list
    joint_acc: list
    best_tau: float
    best_open_acc: float
    best_joint_acc: float


def threshold_sweep(seen_outputs, seen_labels, unseen_outputs, score="softmax", taus=None):
    """Sweep the hard threshold and pick the one with the best joint accuracy.

    Joint accuracy counts a seen sample as correct when it is both classified
    correctly and not flagged, and an unseen sample when it is flagged. The
    chosen ``tau`` is the first maximiser on the grid; ``tau = 1`` (flag
    everything) is therefore only chosen when it genuinely maximises the joint
    score.
    """
    taus = np.round(np.linspace(0.0, 1.0, 101), 10) if taus is None else np.asarray(taus)
    s_seen = inlier_scores(seen_outputs, score)
    s_unseen = inlier_scores(unseen_outputs, score)
    correct = np.argmax(seen_outputs["closed"], axis=1) == np.asarray(seen_labels)
    n = len(s_seen) + len(s_unseen)
    open_acc, joint = [], []
    for t in taus:
        flagged_unseen = s_unseen <= t
        open_acc.append(float(100.0 * flagged_unseen.mean()))
        joint.append(float(100.0 * (np.sum(correct & (s_seen > t)) + flagged_unseen.sum()) / n))
    best = int(np.argmax(joint))
    return ThresholdSweep([float(t) for t in taus], open_acc, joint, float(taus[best]),
                          open_acc[best], joint[best])


@dataclass
class MetricsReport:
    closed_set_acc: float
    open_set_acc: float
    per_class_acc: list
    confusion: list
    joint_acc: float
    seen_classes: list
    unseen_classes: list
    class_counts: list
    config: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def confusion_csv(self):
        K = len(self.seen_classes)
        names = [f"seen_{c}" for c in self.seen_classes] + ["outlier"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + names)
        for i, row in enumerate(self.confusion[: K + 1]):
            w.writerow([names[i]] + list(row))
        return buf.getvalue()


def split_test(dataset: Dataset, manifest: SplitManifest):
    """Test samples split into (seen x, seen labels re-indexed, unseen x)."""
    index = manifest.class_index()
    y = dataset.test_y[manifest.test_ids]
    x = dataset.test_x[manifest.test_ids]
    seen = np.isin(y, manifest.seen_classes)
    y_seen = np.array([index[int(c)] for c in y[seen]], dtype=np.int64)
    return x[seen], y_seen, x[~seen]


def joint_predictions(outputs):
    """``K+1``-way prediction: the outlier slot when the open head picks it,
    otherwise the closed-set argmax."""
    K = outputs["closed"].shape[1]
    outlier = np.argmax(outputs["open"], axis=1) == K
    return np.where(outlier, K, np.argmax(outputs["closed"], axis=1))


def report(model, dataset: Dataset, manifest: SplitManifest, config=None, batch_size=512) -> MetricsReport:
    K = manifest.num_seen
    if model.num_classes != K:
        raise MismatchError(
            f"checkpoint has {model.num_classes} seen classes, manifest lists {K}"
        )
    manifest.check_dataset(dataset)
    x_seen, y_seen, x_unseen = split_test(dataset, manifest)
    seen_out = predict(model, x_seen, batch_size)
    closed, per_class = closed_accuracy(seen_out["closed"], y_seen, K)
    confusion = np.zeros((K + 1, K + 1), dtype=np.int64)
    np.add.at(confusion, (y_seen, joint_predictions(seen_out)), 1)
    if len(x_unseen):
        unseen_out = predict(model, x_unseen, batch_size)
        open_acc = open_accuracy(unseen_out["open"])
        np.add.at(confusion, (np.full(len(x_unseen), K), joint_predictions(unseen_out)), 1)
    else:
        open_acc = float("nan")
    joint = float(100.0 * np.trace(confusion) / confusion.sum())
    counts = confusion.sum(axis=1).tolist()
    return MetricsReport(
        closed_set_acc=closed,
        open_set_acc=open_acc,
        per_class_acc=per_class,
        confusion=confusion.tolist(),
        joint_acc=joint,
        seen_classes=list(manifest.seen_classes),
        unseen_classes=list(manifest.unseen_classes),
        class_counts=counts,
        config=dict(config or {}),
    )
