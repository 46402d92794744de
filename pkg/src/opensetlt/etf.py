"""Simplex equiangular tight frames.

A simplex ETF of ``L`` classes in ``d`` dimensions is a ``d x L`` matrix whose
unit-norm columns all meet at the same inner product ``-1/(L-1)``. The frame
is used as a fixed classifier over per-class feature centers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError

__all__ = [
    "SimplexETF",
    "ETFReport",
    "make_rotation",
    "make_simplex_etf",
    "verify_etf",
    "etf_gram",
    "save_etf",
    "load_etf",
]


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SimplexETF:
    """Column-major frame: ``vectors[:, k]`` is the class vector of class ``k``."""

    vectors: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "vectors", _frozen(self.vectors))
        if self.vectors.ndim != 2:
            raise DimensionError("frame must be a 2-D (dim x num_classes) matrix")

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[1]

    def logits(self, centers):
        """Apply the frame as a classifier: ``centers @ N`` (rows are centers)."""
        centers = np.asarray(centers, dtype=np.float64)
        if centers.shape[-1] != self.dim:
            raise DimensionError(
                f"center width {centers.shape[-1]} does not match frame dim {self.dim}"
            )
        return centers @ self.vectors


@dataclass(frozen=True)
class ETFReport:
    passed: bool
    max_norm_deviation: float
    max_angle_deviation: float
    tol: float

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_norm_deviation={self.max_norm_deviation:.3e} "
            f"max_angle_deviation={self.max_angle_deviation:.3e} tol={self.tol:g}"
        )


def _check_dims(dim, num_classes):
    if num_classes < 2:
        raise DimensionError(f"need at least 2 classes, got {num_classes}")
    if dim < num_classes:
        raise DimensionError(
            f"dim ({dim}) must be >= num_classes ({num_classes}) to build a d x L rotation"
        )


def make_rotation(dim: int, num_classes: int, seed: int | None = 0, identity: bool = False):
    """Return a ``dim x num_classes`` matrix with orthonormal columns.

    The columns come from the QR factorisation of a seeded Gaussian matrix,
    with signs fixed so that ``R`` has a positive diagonal (makes the result a
    deterministic function of the seed). ``identity=True`` returns the first
    ``num_classes`` columns of the identity instead.
    """
    if dim < num_classes:
        raise DimensionError(f"dim ({dim}) must be >= num_classes ({num_classes})")
    if num_classes < 1:
        raise DimensionError("num_classes must be positive")
    if identity:
        return np.eye(dim, num_classes)
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, num_classes)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def make_simplex_etf(dim: int, num_classes: int, seed: int | None = 0, rotation=None) -> SimplexETF:
    """Build ``N = sqrt(L/(L-1)) U (I - 11^T/L)``.

    ``rotation`` overrides the seeded ``U`` (must be ``dim x num_classes`` with
    orthonormal columns).
    """
    _check_dims(dim, num_classes)
    if rotation is None:
        u = make_rotation(dim, num_classes, seed)
    else:
        u = np.asarray(rotation, dtype=np.float64)
        if u.shape != (dim, num_classes):
            raise DimensionError(f"rotation has shape {u.shape}, expected {(dim, num_classes)}")
    L = num_classes
    centering = np.eye(L) - np.ones((L, L)) / L
    return SimplexETF(np.sqrt(L / (L - 1)) * u @ centering, seed=seed)


def etf_gram(num_classes: int):
    """Target Gram matrix ``L/(L-1) I - 1/(L-1) 11^T``."""
    L = num_classes
    return (L / (L - 1)) * np.eye(L) - np.ones((L, L)) / (L - 1)


def verify_etf(frame, tol: float = 1e-6) -> ETFReport:
    vectors = frame.vectors if isinstance(frame, SimplexETF) else np.asarray(frame, dtype=np.float64)
    L = vectors.shape[1]
    gram = vectors.T @ vectors
    norms = np.sqrt(np.diag(gram))
    norm_dev = float(np.max(np.abs(norms - 1.0)))
    off = ~np.eye(L, dtype=bool)
    angle_dev = float(np.max(np.abs(gram[off] + 1.0 / (L - 1)))) if L > 1 else 0.0
    return ETFReport(
        passed=bool(norm_dev <= tol and angle_dev <= tol),
        max_norm_deviation=norm_dev,
        max_angle_deviation=angle_dev,
        tol=tol,
    )


def save_etf(frame: SimplexETF, path):
    """Write ``<path>.npy`` (the matrix) and ``<path>.json`` (dim, classes, seed)."""
    path = Path(path)
    stem = path.with_suffix("")
    np.save(stem.with_suffix(".npy"), np.asarray(frame.vectors))
    meta = {"dim": frame.dim, "num_classes": frame.num_classes, "seed": frame.seed}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".npy"), stem.with_suffix(".json")


def load_etf(path) -> SimplexETF:
    stem = Path(path).with_suffix("")
    vectors = np.load(stem.with_suffix(".npy"))
    meta = json.loads(stem.with_suffix(".json").read_text())
    if vectors.shape != (meta["dim"], meta["num_classes"]):
        raise DimensionError(
            f"array shape {vectors.shape} disagrees with metadata "
            f"({meta['dim']}, {meta['num_classes']})"
        )
    return SimplexETF(vectors, seed=meta.get("seed"))
