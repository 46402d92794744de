"""Datasets, seen/unseen split manifests, long-tail synthesis and augmentation."""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DatasetError, MismatchError

MEDMNIST_KEYS = (
    "train_images", "train_labels",
    "val_images", "val_labels",
    "test_images", "test_labels",
)
LABEL_FRACTIONS = (0.10, 0.25, 0.50)


@dataclass
class Dataset:
    """In-memory dataset with train/val/test arrays.

    ``val_x`` may be ``None`` when the source ships no validation split.
    Samples are identified by their row index inside their split.
    """

    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    val_x: np.ndarray | None = None
    val_y: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if self.num_classes is None:
            ys = [self.train_y, self.test_y] + ([self.val_y] if self.val_y is not None else [])
            self.num_classes = int(max(int(y.max()) for y in ys if len(y)) + 1)
        for split in ("train", "val", "test"):
            x, y = getattr(self, f"{split}_x"), getattr(self, f"{split}_y")
            if x is not None and len(x) != len(y):
                raise DatasetError(f"{split}: {len(x)} samples but {len(y)} labels")

    @property
    def input_shape(self):
        return tuple(self.train_x.shape[1:])

    def class_counts(self, split="train"):
        y = getattr(self, f"{split}_y")
        return np.bincount(y, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class SplitManifest:
    dataset: str
    seen_classes: list
    unseen_classes: list
    label_fraction: float
    labelled_ids: list
    unlabelled_ids: list
    val_ids: list
    test_ids: list
    seed: int
    val_source: str = "train"
    num_train: int = 0
    num_test: int = 0
    num_classes: int = 0

    @property
    def num_seen(self):
        return len(self.seen_classes)

    def class_index(self):
        """Original dataset class -> model index (seen classes only)."""
        return {c: i for i, c in enumerate(self.seen_classes)}

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(**d)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        try:
            return cls.from_json(Path(path).read_text())
        except FileNotFoundError:
            raise DatasetError(f"manifest not found: {path}") from None
        except (json.JSONDecodeError, TypeError) as exc:
            raise DatasetError(f"malformed manifest {path}: {exc}") from None

    def check_dataset(self, dataset: Dataset):
        problems = []
        if self.num_train and self.num_train != len(dataset.train_y):
            problems.append(f"manifest expects {self.num_train} training samples, dataset has {len(dataset.train_y)}")
        if self.num_test and self.num_test != len(dataset.test_y):
            problems.append(f"manifest expects {self.num_test} test samples, dataset has {len(dataset.test_y)}")
        if self.num_classes and self.num_classes != dataset.num_classes:
            problems.append(f"manifest expects {self.num_classes} classes, dataset has {dataset.num_classes}")
        if problems:
            raise MismatchError("; ".join(problems))


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def make_split(dataset: Dataset, seen_classes, label_fraction, seed=0, val_fraction=0.1) -> SplitManifest:
    """Stratified labelled/unlabelled split over the seen classes.

    Each seen class contributes ``round(fraction * n_class)`` labelled samples.
    The unlabelled pool is every training sample (labelled ones included, any
    class) minus samples held out for validation.
    """
    seen = [int(c) for c in seen_classes]
    all_classes = list(range(dataset.num_classes))
    if not seen:
        raise DatasetError("seen_classes must not be empty")
    if len(set(seen)) != len(seen) or any(c not in all_classes for c in seen):
        raise DatasetError(f"seen_classes {seen} must be distinct indices in [0, {dataset.num_classes})")
    if not 0.0 < label_fraction <= 1.0:
        raise DatasetError(f"label_fraction must lie in (0, 1], got {label_fraction}")
    unseen = [c for c in all_classes if c not in seen]

    rng = np.random.default_rng(seed)
    labelled, val = [], []
    for c in seen:
        idx = np.flatnonzero(dataset.train_y == c)
        n_lab = _round_half_up(label_fraction * len(idx))
        if n_lab == 0:
            raise DatasetError(
                f"class {c} has {len(idx)} training samples; fraction {label_fraction} leaves none labelled"
            )
        picked = np.sort(rng.permutation(idx)[:n_lab])
        if dataset.val_x is None:
            n_val = min(_round_half_up(val_fraction * n_lab), n_lab - 1)
            held = rng.permutation(picked)[:n_val]
            val.extend(int(i) for i in held)
            picked = np.setdiff1d(picked, held)
        labelled.extend(int(i) for i in picked)

    if dataset.val_x is None:
        val_source = "train"
        val_ids = sorted(val)
    else:
        val_source = "val"
        val_ids = [int(i) for i in np.flatnonzero(np.isin(dataset.val_y, seen))]
    held = set(val) if val_source == "train" else set()
    unlabelled = [i for i in range(len(dataset.train_y)) if i not in held]

    return SplitManifest(
        dataset=dataset.name,
        seen_classes=seen,
        unseen_classes=unseen,
        label_fraction=float(label_fraction),
        labelled_ids=sorted(labelled),
        unlabelled_ids=unlabelled,
        val_ids=val_ids,
        test_ids=list(range(len(dataset.test_y))),
        seed=int(seed),
        val_source=val_source,
        num_train=len(dataset.train_y),
        num_test=len(dataset.test_y),
        num_classes=dataset.num_classes,
    )


# ---------------------------------------------------------------------------
# synthetic long-tail data


@dataclass
class LongTailSpec:
    num_classes: int = 7
    max_count: int = 400
    imbalance_ratio: float = 50.0
    feature_dim: int = 16
    seed: int = 0
    test_per_class: int = 100
    separation: float = 3.0
    noise: float = 1.0
    bridge_classes: int = 0
    bridge_offset: float = 0.0

    def __post_init__(self):
        if self.imbalance_ratio < 1:
            raise ValueError("imbalance_ratio must be >= 1")
        if self.num_classes < 2 or self.max_count < 1:
            raise ValueError("need num_classes >= 2 and max_count >= 1")
        if not 0 <= 2 * self.bridge_classes <= self.num_classes - self.bridge_classes:
            raise ValueError("each bridge class needs its own pair of ordinary classes")

    def counts(self):
        K = self.num_classes
        return [
            _round_half_up(self.max_count * self.imbalance_ratio ** (-k / (K - 1)))
            for k in range(K)
        ]


def synth_longtail(spec: LongTailSpec, name="synthetic") -> Dataset:
    """Gaussian class blobs with power-law training counts and a balanced test set.

    Class means lie at distance ``separation`` from the origin in random
    directions. The last ``bridge_classes`` classes instead sit halfway
    between the ordinary classes ``(2j, 2j+1)``, pushed off the segment by
    ``bridge_offset * separation``: novel classes that resemble a mix of two
    others.
    """
    rng = np.random.default_rng(spec.seed)
    means = rng.standard_normal((spec.num_classes, spec.feature_dim))
    means *= spec.separation / np.linalg.norm(means, axis=1, keepdims=True)
    K = spec.num_classes
    for j in range(spec.bridge_classes):
        k = K - spec.bridge_classes + j
        a, b = means[2 * j], means[2 * j + 1]
        direction = means[k] - means[k] @ (a + b) / ((a + b) @ (a + b)) * (a + b)
        direction /= np.linalg.norm(direction)
        means[k] = (a + b) / 2 + spec.bridge_offset * spec.separation * direction

    def draw(counts):
        xs, ys = [], []
        for k, n in enumerate(counts):
            xs.append(means[k] + spec.noise * rng.standard_normal((n, spec.feature_dim)))
            ys.append(np.full(n, k, dtype=np.int64))
        return np.concatenate(xs).astype(np.float32), np.concatenate(ys)

    train_x, train_y = draw(spec.counts())
    test_x, test_y = draw([spec.test_per_class] * spec.num_classes)
    return Dataset(name, train_x, train_y, test_x, test_y, num_classes=spec.num_classes)


# ---------------------------------------------------------------------------
# archives


def _md5(path):
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_medmnist(path, checksum=None, name=None) -> Dataset:
    """Load a MedMNIST-layout ``.npz`` archive; images are scaled to ``[0, 1]``.

    All arrays are read before anything is returned, so a truncated or
    corrupt archive raises :class:`DatasetError` instead of yielding a partial
    dataset.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"archive not found: {path}")
    if checksum is not None:
        got = _md5(path)
        if got != checksum:
            raise DatasetError(f"checksum mismatch for {path}: expected {checksum}, got {got}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            missing = [k for k in MEDMNIST_KEYS if k not in archive.files]
            missing = [k for k in missing if not k.startswith("val_")]
            if missing:
                raise DatasetError(f"{path}: missing arrays {missing}")
            arrays = {k: np.array(archive[k]) for k in archive.files}
    except DatasetError:
        raise
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise DatasetError(f"cannot read archive {path}: {exc}") from None

    def images(a):
        if a.dtype == np.uint8:
            return a.astype(np.float32) / 255.0
        return a.astype(np.float32)

    def labels(a):
        return a.reshape(len(a), -1)[:, 0].astype(np.int64)

    has_val = "val_images" in arrays and "val_labels" in arrays
    return Dataset(
        name or path.stem,
        images(arrays["train_images"]),
        labels(arrays["train_labels"]),
        images(arrays["test_images"]),
        labels(arrays["test_labels"]),
        images(arrays["val_images"]) if has_val else None,
        labels(arrays["val_labels"]) if has_val else None,
    )


def save_dataset(dataset: Dataset, path):
    """Write ``dataset`` in the same named-array layout ``load_medmnist`` reads."""
    arrays = {
        "train_images": dataset.train_x,
        "train_labels": dataset.train_y,
        "test_images": dataset.test_x,
        "test_labels": dataset.test_y,
    }
    if dataset.val_x is not None:
        arrays["val_images"] = dataset.val_x
        arrays["val_labels"] = dataset.val_y
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return Path(path)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentParams:
    flip: bool = True
    max_shift: float = 0.125
    strong_ops: int = 2
    cutout: float = 0.5
    # flat-vector inputs
    weak_noise: float = 0.1
    strong_noise: float = 0.5
    strong_drop: float = 0.2


_MODES = {"weak": 1, "strong": 2}


def _shift(img, dy, dx):
    pad = [(abs(dy), abs(dy)), (abs(dx), abs(dx))] + [(0, 0)] * (img.ndim - 2)
    padded = np.pad(img, pad, mode="reflect")
    h, w = img.shape[:2]
    y0, x0 = abs(dy) - dy, abs(dx) - dx
    return padded[y0:y0 + h, x0:x0 + w]


def _affine(img, matrix):
    h, w = img.shape[:2]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - matrix @ center
    if img.ndim == 2:
        return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="nearest")
    return np.stack(
        [ndimage.affine_transform(img[..., c], matrix, offset=offset, order=1, mode="nearest")
         for c in range(img.shape[-1])], axis=-1)


def _op_rotate(img, m):
    t = np.deg2rad(30 * m)
    return _affine(img, np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]))


def _op_shear(img, m):
    return _affine(img, np.array([[1.0, 0.3 * m], [0.0, 1.0]]))


def _op_brightness(img, m):
    return img * (1.0 + 0.9 * m)


def _op_contrast(img, m):
    mean = img.mean()
    return (img - mean) * (1.0 + 0.9 * m) + mean


def _op_solarize(img, m):
    threshold = 1.0 - abs(m)
    return np.where(img >= threshold, 1.0 - img, img)


def _op_posterize(img, m):
    levels = 2 ** (8 - int(round(4 * abs(m))))
    return np.floor(img * (levels - 1) + 0.5) / (levels - 1)


def _op_autocontrast(img, m):
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else img


def _op_invert(img, m):
    return 1.0 - img


_STRONG_OPS = (
    _op_rotate, _op_shear, _op_brightness, _op_contrast,
    _op_solarize, _op_posterize, _op_autocontrast, _op_invert,
)


def _augment_image(img, mode, rng, params):
    out = np.array(img, dtype=np.float32, copy=True)
    h, w = out.shape[:2]
    if params.flip and rng.random() < 0.5:
        out = out[:, ::-1]
    sy, sx = int(params.max_shift * h), int(params.max_shift * w)
    out = _shift(out, int(rng.integers(-sy, sy + 1)), int(rng.integers(-sx, sx + 1)))
    if mode == "strong":
        for op in rng.choice(len(_STRONG_OPS), size=params.strong_ops, replace=False):
            out = _STRONG_OPS[op](out, float(rng.uniform(-1, 1)))
        out = np.clip(out, 0.0, 1.0)
        side = int(params.cutout * min(h, w) * rng.uniform(0.5, 1.0))
        if side:
            cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
            out[max(cy - side // 2, 0):cy + side // 2 + 1, max(cx - side // 2, 0):cx + side // 2 + 1] = 0.5
    return np.ascontiguousarray(out, dtype=np.float32)


def _augment_vector(x, mode, rng, params):
    x = np.asarray(x, dtype=np.float32)
    if mode == "weak":
        return x + params.weak_noise * rng.standard_normal(x.shape).astype(np.float32)
    out = x + params.strong_noise * rng.standard_normal(x.shape).astype(np.float32)
    out[rng.random(x.shape) < params.strong_drop] = 0.0
    return out


def augment(sample, mode, seed, params: AugmentParams | None = None):
    """Weak or strong view of one sample; deterministic in ``seed``.

    ``seed`` may be an int or a sequence of ints (e.g. run seed, epoch,
    sample id). Images (2-D or HxWxC arrays) get flip/translate and, for the
    strong view, two random photometric/geometric ops plus cutout. Flat
    vectors get Gaussian jitter, and for the strong view coordinate dropout.
    """
    if mode not in _MODES:
        raise ValueError(f"mode must be 'weak' or 'strong', got {mode!r}")
    params = params or AugmentParams()
    key = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    rng = np.random.default_rng(key + [_MODES[mode]])
    sample = np.asarray(sample)
    if sample.ndim >= 2:
        return _augment_image(sample, mode, rng, params)
    return _augment_vector(sample, mode, rng, params)


def augment_batch(x, ids, mode, seed, epoch, stream=0, params=None):
    """Augment rows of ``x``; row ``i`` is keyed by (seed, epoch, stream, ids[i])."""
    return np.stack([augment(row, mode, (seed, epoch, stream, int(sid)), params) for row, sid in zip(x, ids)])


def to_model_input(x):
    """Float tensor in the layout the encoders expect (``N x C x H x W`` for
    images, ``N x F`` for vectors)."""
    import torch

    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if t.ndim == 3:
        t = t.unsqueeze(1)
    elif t.ndim == 4:
        t = t.permute(0, 3, 1, 2).contiguous()
    return t
