"""Backbone encoders and the four heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError
from .etf import SimplexETF, make_simplex_etf


class MLPEncoder(nn.Module):
    """Encoder for flat feature vectors (synthetic data)."""

    def __init__(self, in_dim, feature_dim=64, hidden=128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, feature_dim),
            nn.ReLU(),
        )
        self.out_dim = feature_dim

    def forward(self, x):
        return self.net(x.flatten(1))


class ConvEncoder28(nn.Module):
    """Small conv net for 28x28 inputs (MedMNIST)."""

    def __init__(self, in_channels=1, feature_dim=128):
        super().__init__()

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            )

        self.features = nn.Sequential(
            block(in_channels, 32),
            nn.MaxPool2d(2),
            block(32, 64),
            nn.MaxPool2d(2),
            block(64, feature_dim),
            nn.AdaptiveAvgPool2d(1),
        )
        self.out_dim = feature_dim

    def forward(self, x):
        return self.features(x).flatten(1)


class ResNetEncoder(nn.Module):
    """ResNet-18 trunk (randomly initialised) for 224x224 inputs."""

    def __init__(self, in_channels=3):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        net.fc = nn.Identity()
        self.net = net
        self.out_dim = 512

    def forward(self, x):
        return self.net(x)


def build_backbone(name, input_shape, feature_dim):
    if name == "mlp":
        return MLPEncoder(int(np.prod(input_shape)), feature_dim)
    channels = 1 if len(input_shape) == 2 else input_shape[-1]
    if name == "conv28":
        return ConvEncoder28(channels, feature_dim)
    if name == "resnet18":
        return ResNetEncoder(channels)
    raise ValueError(f"unknown backbone {name!r}")


@dataclass
class FeatureBatch:
    features: torch.Tensor
    labels: torch.Tensor


@dataclass
class ClassCenters:
    centers: torch.Tensor
    present_mask: torch.Tensor

    @property
    def present_labels(self):
        return torch.nonzero(self.present_mask).flatten()

    @property
    def present_centers(self):
        return self.centers[self.present_mask]


def feature_centers(features, labels, num_classes) -> ClassCenters:
    """Per-class mean feature; rows of absent classes are zero and unflagged."""
    if isinstance(features, FeatureBatch):
        features, labels = features.features, features.labels
    if features.shape[0] == 0:
        raise ValueError("feature_centers needs a non-empty batch")
    labels = torch.as_tensor(labels, dtype=torch.long)
    onehot = F.one_hot(labels, num_classes).to(features.dtype)
    counts = onehot.sum(dim=0)
    sums = onehot.t() @ features
    centers = sums / counts.clamp_min(1.0).unsqueeze(1)
    return ClassCenters(centers, counts > 0)


class OpenSetNet(nn.Module):
    """Backbone plus closed-set, open-set, projection and multi-binary heads.

    The simplex ETF is stored as a buffer, so no optimizer ever sees it.
    """

    def __init__(self, backbone: nn.Module, num_classes: int, embed_dim: int = 128,
                 proj_hidden: int | None = None, etf: SimplexETF | None = None, etf_seed: int = 0):
        super().__init__()
        d = backbone.out_dim
        K = num_classes
        self.num_classes = K
        self.backbone = backbone
        self.closed_head = nn.Linear(d, K)
        self.open_head = nn.Linear(d, K + 1)
        hidden = proj_hidden or d
        self.proj_head = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, embed_dim))
        self.mb_head = nn.Linear(embed_dim, 2 * K)
        if etf is None:
            etf = make_simplex_etf(d, K, seed=etf_seed)
        if etf.dim != d or etf.num_classes != K:
            raise DimensionError(
                f"ETF is {etf.dim}x{etf.num_classes}, model needs {d}x{K}"
            )
        self.register_buffer("etf", torch.as_tensor(np.array(etf.vectors), dtype=torch.float32))
        self.register_buffer("input_mean", torch.zeros(()))
        self.register_buffer("input_std", torch.ones(()))

    def set_input_stats(self, mean, std):
        """Dataset statistics applied to every raw input batch in :meth:`encode`."""
        self.input_mean.fill_(float(mean))
        self.input_std.fill_(float(std))

    @property
    def feature_dim(self):
        return self.backbone.out_dim

    def encode(self, x):
        if x.shape[0] == 0:
            raise ValueError("cannot encode an empty batch")
        return self.backbone((x - self.input_mean) / self.input_std)

    def multi_binary_scores(self, embeddings):
        return multi_binary_scores(self.mb_head, embeddings, self.num_classes)

    def forward(self, x):
        feats = self.encode(x)
        return {
            "features": feats,
            "closed": self.closed_head(feats),
            "open": self.open_head(feats),
            "pairs": self.multi_binary_scores(self.proj_head(feats)),
        }


def multi_binary_scores(mb_head, embeddings, num_classes):
    """``M x K x 2`` probabilities ``(o, o_bar)`` from a 2-way softmax per class."""
    logits = mb_head(embeddings).view(-1, num_classes, 2)
    return F.softmax(logits, dim=-1)


def apply_etf_head(centers: ClassCenters, etf):
    """Logits of the present class centers under the fixed frame, ``centers @ N``.

    Returns ``(logits, labels)`` with one row per present class.
    """
    N = etf if torch.is_tensor(etf) else torch.as_tensor(np.array(etf.vectors))
    N = N.detach().to(centers.centers.dtype)
    if centers.centers.shape[1] != N.shape[0] or centers.centers.shape[0] != N.shape[1]:
        raise DimensionError(
            f"centers {tuple(centers.centers.shape)} incompatible with frame {tuple(N.shape)}"
        )
    return centers.present_centers @ N, centers.present_labels


def build_model(backbone, input_shape, num_classes, feature_dim=64, embed_dim=128, etf_seed=0, seed=0):
    torch.manual_seed(seed)
    encoder = build_backbone(backbone, input_shape, feature_dim)
    return OpenSetNet(encoder, num_classes, embed_dim=embed_dim, etf_seed=etf_seed)
