"""Loss terms for open-set semi-supervised training.

Every probability that goes through a log is clamped below at ``PROB_FLOOR``.
Probabilities, logits and labels are torch tensors; inputs coming from the
weakly augmented view are treated as fixed targets (detached).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, NonFiniteLossError

PROB_FLOOR = 1e-12

TERMS = ("sup", "reg", "mb", "o", "ui")


@dataclass
class LossWeights:
    """Weights of the five loss terms, the two confidence thresholds and the
    unlabelled-to-labelled batch ratio ``mu``."""

    sup: float = 1.0
    reg: float = 1.0
    mb: float = 1.0
    o: float = 1.0
    ui: float = 1.0
    tau_r: float = 0.5
    tau_p: float = 0.95
    mu: int = 1
    inlier_gate: bool = True

    def __post_init__(self):
        problems = []
        for name in TERMS:
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                problems.append(f"lambda_{name}: must be a finite nonnegative number, got {value!r}")
        for name in ("tau_r", "tau_p"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                problems.append(f"{name}: must lie in [0, 1], got {value!r}")
        if int(self.mu) != self.mu or self.mu < 1:
            problems.append(f"mu: must be a positive integer, got {self.mu!r}")
        if problems:
            raise ConfigError(problems)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _log(p):
    return torch.log(p.clamp_min(PROB_FLOOR))


def soft_cross_entropy(target_probs, logits):
    """Per-row ``-sum_k t_k log softmax(logits)_k``."""
    return -(target_probs * _log(F.softmax(logits, dim=-1))).sum(dim=-1)


def _hard_ce(logits, labels):
    probs = F.softmax(logits, dim=-1)
    return -_log(probs.gather(-1, labels.view(-1, 1)).squeeze(-1))


def _check_labels(labels, num_classes):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    return labels


def sup_ce(logits, labels):
    """Mean cross-entropy of the closed-set classifier on the labelled batch."""
    labels = _check_labels(labels, logits.shape[-1])
    return _hard_ce(logits, labels).mean()


def reg_loss(etf_logits, present_labels):
    """Cross-entropy of the fixed-ETF logits of each present class center,
    averaged over the present classes."""
    if etf_logits.shape[0] == 0:
        return etf_logits.sum() * 0.0
    labels = _check_labels(present_labels, etf_logits.shape[-1])
    return _hard_ce(etf_logits, labels).mean()


def multi_binary_loss(pairs, labels):
    """One-vs-rest loss with hard-negative mining.

    ``pairs[i, k] = (o, o_bar)`` are the inlier/outlier probabilities of the
    ``k``-th binary head. The positive head is pushed towards inlier; among the
    other heads only the one with the smallest outlier probability is used.
    """
    M, K, two = pairs.shape
    if two != 2:
        raise DimensionError(f"pairs must have a trailing dimension of 2, got {two}")
    if K < 2:
        raise ValueError("multi-binary loss needs K >= 2 (no negative class otherwise)")
    labels = _check_labels(labels, K)
    pos = F.one_hot(labels, K).bool()
    log_in = _log(pairs[..., 0])
    log_out = _log(pairs[..., 1])
    pos_term = -log_in[pos]
    # positives are masked with +inf so the row minimum runs over k != y
    neg_term = -log_out.masked_fill(pos, math.inf).min(dim=1).values
    return (pos_term + neg_term).mean()


def multi_binary_loss_bruteforce(pairs, labels):
    """Reference loop: enumerate every negative head and keep the minimum log."""
    M, K, _ = pairs.shape
    total = 0.0
    for i in range(M):
        y = int(labels[i])
        total += -math.log(max(float(pairs[i, y, 0]), PROB_FLOOR))
        worst = min(math.log(max(float(pairs[i, k, 1]), PROB_FLOOR)) for k in range(K) if k != y)
        total += -worst
    return total / M


def fuse_open_set_targets(closed_probs, binary_pairs):
    """Fuse closed-set probabilities and weak-view binary scores into a
    ``(K+1)``-way target: ``r_k = z_k o_k`` and ``r_{K+1} = sum_j z_j o_bar_j``.

    Accepts a single sample (``K`` and ``K x 2``) or a batch.
    """
    z = closed_probs
    if binary_pairs.shape[:-1] != z.shape:
        raise DimensionError(
            f"closed probs {tuple(z.shape)} and binary pairs {tuple(binary_pairs.shape)} disagree"
        )
    inlier = z * binary_pairs[..., 0]
    outlier = (z * binary_pairs[..., 1]).sum(dim=-1, keepdim=True)
    return torch.cat([inlier, outlier], dim=-1)


def confident_mask(targets, tau_r):
    return targets.max(dim=-1).values > tau_r


def open_set_loss(targets, strong_open_logits, tau_r):
    """Soft-target CE between fused weak-view targets and the strong view's
    open-set prediction, counted only where the target peak exceeds ``tau_r``.

    The mean runs over the whole unlabelled batch, masked rows included.
    """
    targets = targets.detach()
    if targets.shape != strong_open_logits.shape:
        raise DimensionError("targets and strong-view logits must have the same shape")
    if targets.shape[0] == 0:
        return strong_open_logits.sum() * 0.0
    mask = confident_mask(targets, tau_r).to(strong_open_logits.dtype)
    return (mask * soft_cross_entropy(targets, strong_open_logits)).mean()


def inlier_filter(closed_probs_weak, binary_pairs_weak, tau_p, inlier_gate=True):
    """Double filter: returns ``(pseudo_labels, keep)``.

    ``keep`` requires both a confident weak-view prediction (``max > tau_p``)
    and an inlier vote from the binary head of the predicted class. With
    ``inlier_gate=False`` only the confidence test remains (plain
    pseudo-labelling).
    """
    conf, pseudo = closed_probs_weak.max(dim=-1)
    keep = conf > tau_p
    if inlier_gate:
        inlier = binary_pairs_weak.gather(1, pseudo.view(-1, 1, 1).expand(-1, 1, 2))[:, 0, 0]
        keep = keep & (inlier > 0.5)
    return pseudo, keep


def filtered_inlier_loss(closed_probs_weak, binary_pairs_weak, strong_closed_logits, tau_p,
                         inlier_gate=True):
    """Hard pseudo-label CE on the strong view for samples that pass
    :func:`inlier_filter`; the mean runs over the whole unlabelled batch."""
    closed_probs_weak = closed_probs_weak.detach()
    binary_pairs_weak = binary_pairs_weak.detach()
    if closed_probs_weak.shape[0] == 0:
        return strong_closed_logits.sum() * 0.0
    pseudo, keep = inlier_filter(closed_probs_weak, binary_pairs_weak, tau_p, inlier_gate)
    ce = _hard_ce(strong_closed_logits, pseudo)
    return (keep.to(ce.dtype) * ce).mean()


def total_loss(terms, weights: LossWeights):
    """Weighted sum of the five terms. A non-finite term raises
    :class:`NonFiniteLossError` naming it, even if its weight is zero."""
    total = 0.0
    for name in TERMS:
        value = terms.get(name, 0.0)
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(scalar):
            raise NonFiniteLossError(name, scalar)
        lam = getattr(weights, name)
        if lam:
            total = total + lam * value
    return total
