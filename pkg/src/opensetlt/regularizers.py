"""Classifier weight normalisation (max-norm projection) and weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError


@dataclass(frozen=True)
class MaxNormPolicy:
    radius: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError(f"max_norm_radius: must be > 0, got {self.radius!r}")


@dataclass(frozen=True)
class WeightDecayPolicy:
    """``weight_decay`` applies to every parameter; the closed-set classifier
    gets ``classifier_weight_decay`` instead when that is set.

    ``regime="two_stage"`` switches to decay only on the classifier (and a
    frozen backbone) for the last ``stage2_epochs`` epochs.
    """

    weight_decay: float = 5e-4
    classifier_weight_decay: float | None = None
    regime: str = "uniform"
    stage2_epochs: int = 0

    def __post_init__(self):
        problems = []
        if not self.weight_decay >= 0:
            problems.append(f"weight_decay: must be >= 0, got {self.weight_decay!r}")
        if self.classifier_weight_decay is not None and not self.classifier_weight_decay >= 0:
            problems.append(
                f"classifier_weight_decay: must be >= 0, got {self.classifier_weight_decay!r}"
            )
        if self.regime not in ("uniform", "two_stage"):
            problems.append(f"weight_decay_regime: must be 'uniform' or 'two_stage', got {self.regime!r}")
        if self.stage2_epochs < 0:
            problems.append("stage2_epochs: must be >= 0")
        if problems:
            raise ConfigError(problems)

    @property
    def classifier_coefficient(self):
        if self.classifier_weight_decay is None:
            return self.weight_decay
        return self.classifier_weight_decay

    def param_groups(self, model):
        """SGD parameter groups; the decay is folded into the gradient step."""
        head = [p for p in model.closed_head.parameters() if p.requires_grad]
        head_ids = {id(p) for p in head}
        rest = [p for p in model.parameters() if p.requires_grad and id(p) not in head_ids]
        return [
            {"params": rest, "weight_decay": self.weight_decay, "name": "body"},
            {"params": head, "weight_decay": self.classifier_coefficient, "name": "closed_head"},
        ]


# relative slack absorbing the rounding of a / ||w|| * w
_ROUNDING_SLACK = 1e-12


def max_norm_project(weights, a: float):
    """Scale every row with ``||w|| > a`` back onto the sphere of radius ``a``.

    Works on numpy arrays and torch tensors; returns a new object of the same
    kind. Rows already inside the ball are returned unchanged (bitwise); a
    row within rounding of the sphere counts as inside, which makes the
    projection idempotent.
    """
    if not a > 0:
        raise ValueError(f"radius must be positive, got {a!r}")
    limit = a * (1.0 + _ROUNDING_SLACK)
    if torch.is_tensor(weights):
        if not torch.isfinite(weights).all():
            raise FloatingPointError("max_norm_project: weights contain non-finite values")
        norms = weights.norm(dim=-1, keepdim=True)
        over = norms > limit
        scale = torch.where(over, a / norms, torch.ones_like(norms))
        return torch.where(over, weights * scale, weights)
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("max_norm_project: weights contain non-finite values")
    norms = np.linalg.norm(w, axis=-1, keepdims=True)
    over = norms > limit
    safe = np.where(over, norms, 1.0)
    return np.where(over, w * (a / safe), w)


@torch.no_grad()
def project_module_rows_(linear: torch.nn.Linear, a: float):
    """In-place max-norm projection of the per-class rows of ``linear.weight``."""
    linear.weight.copy_(max_norm_project(linear.weight, a))
    return linear


def weight_decay_step(weights, coefficient: float, lr: float, grad=None):
    """One SGD step with the L2 penalty folded in:
    ``w - lr * (grad + coefficient * w)``."""
    if coefficient < 0:
        raise ValueError("coefficient must be >= 0")
    if torch.is_tensor(weights):
        g = torch.zeros_like(weights) if grad is None else grad
        return weights - lr * (g + coefficient * weights)
    w = np.asarray(weights, dtype=np.float64)
    g = np.zeros_like(w) if grad is None else np.asarray(grad, dtype=np.float64)
    return w - lr * (g + coefficient * w)
