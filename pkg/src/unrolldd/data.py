"""Desk-scale dataset acquisition: Gaussian blobs, IDX images, CSV tables."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Feature rows with integer class labels."""

    x: np.ndarray
    y: np.ndarray
    classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("feature and label counts differ")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ValueError("label out of range")

    def __len__(self):
        return self.x.shape[0]

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.x.shape[1:]


def make_blobs(classes, per_class, dim, separation, seed, cluster_std=1.0,
               image_side=None, max_redraws=200) -> LabeledDataset:
    """Gaussian clusters with all pairwise center distances >= separation.

    Centers are drawn uniformly from a box scaled to make the separation
    feasible, redrawing (bounded) until the constraint holds.  With
    `image_side` set, features are reshaped to (side, side, 1).
    """
    classes, per_class = int(classes), int(per_class)
    if classes < 2 or per_class < 1:
        raise ValueError("need at least two classes and one sample per class")
    if image_side is not None:
        dim = int(image_side) * int(image_side)
    dim = int(dim)
    if dim < 1:
        raise ValueError("feature dimension must be positive")
    separation = float(separation)
    rng = np.random.default_rng(int(seed))

    half_box = max(separation, 1.0) * classes
    centers = None
    for _ in range(int(max_redraws)):
        cand = rng.uniform(-half_box, half_box, size=(classes, dim))
        dists = np.linalg.norm(cand[:, None, :] - cand[None, :, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= separation:
            centers = cand
            break
    if centers is None:
        raise RuntimeError(
            f"could not place {classes} centers at separation {separation} "
            f"within {max_redraws} redraws"
        )

    x = np.empty((classes * per_class, dim))
    y = np.empty(classes * per_class, dtype=np.intp)
    for c in range(classes):
        block = slice(c * per_class, (c + 1) * per_class)
        x[block] = centers[c] + rng.normal(0.0, cluster_std, size=(per_class, dim))
        y[block] = c
    if image_side is not None:
        x = x.reshape(-1, int(image_side), int(image_side), 1)
    return LabeledDataset(x=x, y=y, classes=classes)


def split(dataset: LabeledDataset, fractions, seed):
    """Class-stratified disjoint splits with per-class counts within 1 of
    the requested proportion.  Returns one LabeledDataset per fraction."""
    fractions = [float(f) for f in fractions]
    if not fractions or any(f < 0.0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, not 1")
    rng = np.random.default_rng(int(seed))
    parts_idx = [[] for _ in fractions]
    for c in range(dataset.classes):
        idx = np.flatnonzero(dataset.y == c)
        rng.shuffle(idx)
        n_c = idx.size
        bounds = np.floor(np.cumsum(fractions) * n_c + 1e-9).astype(int)
        lo = 0
        for part, hi in zip(parts_idx, bounds):
            part.append(idx[lo:hi])
            lo = hi
    out = []
    for part in parts_idx:
        sel = np.concatenate(part) if part else np.zeros(0, dtype=np.intp)
        out.append(LabeledDataset(x=dataset.x[sel], y=dataset.y[sel], classes=dataset.classes))
    return out


def _read_exact(fh, n, path, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"{path}: truncated {what} at byte offset {fh.tell() - len(buf)}")
    return buf


def load_idx_images(images_path, labels_path) -> LabeledDataset:
    """Read big-endian IDX image and label files into [0, 1] floats.

    Validates both magics and the count agreement; malformed input errors
    name the byte offset of the problem.
    """
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, images_path, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(
                f"{images_path}: bad image magic 0x{magic:08x} at byte offset 0"
            )
        count, rows, cols = struct.unpack(
            ">III", _read_exact(fh, 12, images_path, "header")
        )
        payload = _read_exact(fh, count * rows * cols, images_path, "pixel data")
        extra = fh.read(1)
        if extra:
            raise ValueError(
                f"{images_path}: trailing bytes at byte offset {16 + count * rows * cols}"
            )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols, 1)

    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(
                f"{labels_path}: bad label magic 0x{magic:08x} at byte offset 0"
            )
        (n_labels,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "header"))
        labels = np.frombuffer(_read_exact(fh, n_labels, labels_path, "labels"), dtype=np.uint8)
    if n_labels != count:
        raise ValueError(
            f"{labels_path}: {n_labels} labels for {count} images"
        )
    classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(x=pixels.astype(np.float64) / 255.0, y=labels.astype(np.intp), classes=classes)


def write_idx_images(images_path, labels_path, images, labels):
    """Write uint8 images (N, H, W) or (N, H, W, 1) and labels as IDX files."""
    images = np.asarray(images)
    if images.ndim == 4 and images.shape[3] == 1:
        images = images[:, :, :, 0]
    if images.ndim != 3:
        raise ValueError("expected (N, H, W) images")
    if images.dtype != np.uint8:
        raise ValueError("IDX images must be uint8")
    labels = np.asarray(labels)
    if labels.shape != (images.shape[0],):
        raise ValueError("one label per image required")
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())


def load_csv(path) -> LabeledDataset:
    """Read a `label,f0,f1,...` table written by save_csv."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
    cols = header.split(",")
    if not cols or cols[0] != "label" or any(
        c != f"f{i}" for i, c in enumerate(cols[1:])
    ):
        raise ValueError(f"{path}: malformed header '{header}'")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != len(cols):
        raise ValueError(f"{path}: row width disagrees with header")
    y = table[:, 0].astype(np.intp)
    if np.any(table[:, 0] != y):
        raise ValueError(f"{path}: non-integer labels")
    classes = int(y.max()) + 1 if y.size else 1
    return LabeledDataset(x=table[:, 1:], y=y, classes=classes)


def save_csv(path, dataset: LabeledDataset):
    x2 = dataset.x.reshape(len(dataset), -1)
    header = "label," + ",".join(f"f{i}" for i in range(x2.shape[1]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for label, row in zip(dataset.y, x2):
            fh.write(str(int(label)) + "," + ",".join(format(v, ".17g") for v in row) + "\n")
