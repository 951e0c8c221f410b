"""Datasets: IDX ingestion, a synthetic digit fallback, public/private splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .numerics import Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SIDE = 28


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, 28, 28) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[0] != self.labels.shape[0]:
            raise ContractError(f"Dataset: images {self.images.shape} vs labels {self.labels.shape}")
        if self.images.shape[0] == 0:
            raise ContractError("Dataset: empty")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ContractError("Dataset: pixels outside [0, 1]")
        if self.labels.min() < 0:
            raise ContractError("Dataset: negative label")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def flat(self):
        return self.images.reshape(len(self), -1)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx])

    def of_class(self, c):
        return self.subset(np.flatnonzero(self.labels == c))


@dataclass(frozen=True)
class SplitSpec:
    public_labels: frozenset
    private_labels: frozenset

    def __init__(self, public_labels, private_labels):
        pub, priv = frozenset(int(x) for x in public_labels), frozenset(int(x) for x in private_labels)
        if not pub or not priv:
            raise ContractError("SplitSpec: label sets must be non-empty")
        if pub & priv:
            raise ContractError(f"SplitSpec: overlapping labels {sorted(pub & priv)}")
        object.__setattr__(self, "public_labels", pub)
        object.__setattr__(self, "private_labels", priv)


MNIST_SPLIT = SplitSpec(public_labels=range(5, 10), private_labels=range(0, 5))


# -- IDX ---------------------------------------------------------------------

def _read_header(buf, magic, ndims, kind, path):
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise ParseError(f"truncated {kind} header: {len(buf)} bytes", offset=len(buf), path=path)
    found = struct.unpack_from(">I", buf, 0)[0]
    if found != magic:
        raise ParseError(f"wrong magic for {kind}: 0x{found:08x}, expected 0x{magic:08x}", offset=0, path=path)
    return struct.unpack_from(">" + "I" * ndims, buf, 4)


def parse_idx_images(buf, path=None):
    n, rows, cols = _read_header(buf, IMAGE_MAGIC, 3, "images", path)
    payload = n * rows * cols
    if len(buf) - 16 < payload:
        raise ParseError(
            f"truncated image payload: need {payload} bytes, have {len(buf) - 16}", offset=len(buf), path=path
        )
    px = np.frombuffer(buf, dtype=np.uint8, count=payload, offset=16)
    return px.reshape(n, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(buf, path=None):
    (n,) = _read_header(buf, LABEL_MAGIC, 1, "labels", path)
    if len(buf) - 8 < n:
        raise ParseError(f"truncated label payload: need {n} bytes, have {len(buf) - 8}", offset=len(buf), path=path)
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(image_path, label_path):
    """Read an IDX image/label file pair. Gzipped files are accepted."""
    ibuf, lbuf = _read_bytes(image_path), _read_bytes(label_path)
    images = parse_idx_images(ibuf, image_path)
    labels = parse_idx_labels(lbuf, label_path)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels", offset=4, path=label_path
        )
    return Dataset(images, labels)


def _read_bytes(path):
    path = Path(path)
    if path.suffix == ".gz":
        import gzip

        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def encode_idx_images(images):
    images = np.asarray(images)
    n, rows, cols = images.shape
    px = np.rint(images * 255.0).astype(np.uint8)
    return struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + px.tobytes()


def encode_idx_labels(labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ContractError("IDX labels must fit in an unsigned byte")
    return struct.pack(">II", LABEL_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def save_idx(ds, image_path, label_path):
    Path(image_path).write_bytes(encode_idx_images(ds.images))
    Path(label_path).write_bytes(encode_idx_labels(ds.labels))


# -- synthetic digits --------------------------------------------------------

# Seven-segment-like strokes on a 28x28 canvas, (row0, col0, row1, col1).
_A, _B, _C, _D = (6, 9), (6, 19), (14, 9), (14, 19)
_E, _F = (22, 9), (22, 19)
_TEMPLATES = {
    0: [(_A, _B), (_B, _F), (_F, _E), (_E, _A)],
    1: [((6, 14), (22, 14)), ((6, 14), (9, 11))],
    2: [(_A, _B), (_B, _D), (_D, _C), (_C, _E), (_E, _F)],
    3: [(_A, _B), (_B, _F), (_F, _E), (_C, _D)],
    4: [(_A, _C), (_C, _D), (_B, _F)],
    5: [(_B, _A), (_A, _C), (_C, _D), (_D, _F), (_F, _E)],
    6: [(_B, _A), (_A, _E), (_E, _F), (_F, _D), (_D, _C)],
    7: [(_A, _B), (_B, (22, 13))],
    8: [(_A, _B), (_B, _F), (_F, _E), (_E, _A), (_C, _D)],
    9: [(_D, _C), (_C, _A), (_A, _B), (_B, _F), (_F, _E)],
}


def _render(strokes, thickness=1.2):
    rr, cc = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)
    img = np.zeros((SIDE, SIDE))
    for (r0, c0), (r1, c1) in strokes:
        dr, dc = r1 - r0, c1 - c0
        length2 = dr * dr + dc * dc
        t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / length2, 0.0, 1.0)
        d = np.hypot(rr - (r0 + t * dr), cc - (c0 + t * dc))
        img = np.maximum(img, np.clip(1.0 - (d - thickness) / 1.0, 0.0, 1.0))
    return img


def _shift(img, dr, dc):
    out = np.zeros_like(img)
    rs, rd = (slice(0, SIDE - dr), slice(dr, SIDE)) if dr >= 0 else (slice(-dr, SIDE), slice(0, SIDE + dr))
    cs, cd = (slice(0, SIDE - dc), slice(dc, SIDE)) if dc >= 0 else (slice(-dc, SIDE), slice(0, SIDE + dc))
    out[rd, cd] = img[rs, cs]
    return out


def synth_digits(rng, n_per_class, classes=10, noise=0.05, max_shift=2, vertex_jitter=1.0):
    """Render ``n_per_class`` jittered glyphs for each of ``classes`` digit templates.

    Each sample moves every stroke endpoint by up to ``vertex_jitter`` px,
    translates the glyph by up to ``max_shift`` px per axis, and adds
    Gaussian pixel noise before clamping to [0, 1]. Samples are ordered by
    class, then by index.
    """
    if not 1 <= classes <= 10:
        raise ContractError(f"synth_digits: classes must be in [1, 10], got {classes}")
    if n_per_class < 1:
        raise ContractError("synth_digits: n_per_class must be >= 1")
    images = np.empty((classes * n_per_class, SIDE, SIDE))
    labels = np.repeat(np.arange(classes, dtype=np.int64), n_per_class)
    i = 0
    for c in range(classes):
        strokes = _TEMPLATES[c]
        n_pts = 4 * len(strokes)
        for _ in range(n_per_class):
            jit = (rng.uniform(n_pts) * 2 - 1) * vertex_jitter
            moved = [
                ((r0 + jit[4 * k], c0 + jit[4 * k + 1]), (r1 + jit[4 * k + 2], c1 + jit[4 * k + 3]))
                for k, ((r0, c0), (r1, c1)) in enumerate(strokes)
            ]
            dr, dc = rng.integers(2 * max_shift + 1, 2) - max_shift
            img = _shift(_render(moved), int(dr), int(dc))
            img = img + noise * rng.normal(SIDE * SIDE).reshape(SIDE, SIDE)
            images[i] = np.clip(img, 0.0, 1.0)
            i += 1
    return Dataset(images, labels)


# -- splits ------------------------------------------------------------------

def split_public_private(ds, spec):
    """Partition by label into a public set (original labels) and a private set.

    Labels in neither set are dropped. Private labels are re-indexed densely to ``0..K-1`` in ascending order of
    the original label. Returns ``(public, private, mapping)`` where
    ``mapping`` sends original private label to its new index.
    """
    pub_mask = np.isin(ds.labels, sorted(spec.public_labels))
    priv_mask = np.isin(ds.labels, sorted(spec.private_labels))
    if not pub_mask.any() or not priv_mask.any():
        raise ContractError("split: empty public or private partition")
    mapping = {orig: new for new, orig in enumerate(sorted(spec.private_labels))}
    priv_labels = np.array([mapping[int(l)] for l in ds.labels[priv_mask]], dtype=np.int64)
    public = Dataset(ds.images[pub_mask], ds.labels[pub_mask])
    private = Dataset(ds.images[priv_mask], priv_labels)
    return public, private, mapping


def train_holdout_split(ds, rng, holdout_fraction=0.2):
    """Stratified shuffle split; every class keeps at least one training sample."""
    train_idx, hold_idx = [], []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_hold = min(int(round(holdout_fraction * idx.size)), idx.size - 1)
        hold_idx.extend(idx[:n_hold].tolist())
        train_idx.extend(idx[n_hold:].tolist())
    train = ds.subset(np.sort(train_idx))
    hold = ds.subset(np.sort(hold_idx)) if hold_idx else None
    return train, hold
