"""Patch-level decomposition of images and the alignment penalty.

An n x n grid of side-s patches (s = floor(H / n)) is cut from the top
left of each image; trailing margin pixels beyond n*s are dropped from
the grid but reported.  Each grid cell can carry its own synthetic
prototypes and its own inner loop; the alignment loss pulls per-cell
centroids toward the global centroid so cells stay mutually consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class PspConfig:
    enabled: bool = False
    n: int = 4
    lam: float = 0.1
    min_side: int = 32

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("grid side must be positive")
        if self.lam < 0.0:
            raise ValueError("alignment weight must be non-negative")


@dataclass
class PatchGrid:
    """Patches of one image: array (n, n, s, s, C) plus the dropped margin."""

    n: int
    side: int
    patches: np.ndarray
    margin: int

    def cell(self, i, j) -> np.ndarray:
        return self.patches[i, j]


def split(image, n) -> PatchGrid:
    """Cut an (H, W, C) image into an n x n grid of (s, s, C) patches."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ValueError("expected an (H, W, C) image")
    h, w, _ = image.shape
    if h != w:
        raise ValueError("patch grids need square images")
    n = int(n)
    if n < 1 or n > h:
        raise ValueError(f"grid side {n} invalid for image side {h}")
    s = h // n
    margin = h - n * s
    patches = np.empty((n, n, s, s, image.shape[2]))
    for i in range(n):
        for j in range(n):
            patches[i, j] = image[i * s : (i + 1) * s, j * s : (j + 1) * s, :]
    return PatchGrid(n=n, side=s, patches=patches, margin=margin)


def reassemble(grid: PatchGrid) -> np.ndarray:
    """Stitch the grid back into the top-left (n*s, n*s, C) crop."""
    n, s = grid.n, grid.side
    c = grid.patches.shape[-1]
    out = np.empty((n * s, n * s, c))
    for i in range(n):
        for j in range(n):
            out[i * s : (i + 1) * s, j * s : (j + 1) * s, :] = grid.patches[i, j]
    return out


def centroid(prototypes):
    """Element-wise mean of a set of prototypes, flattened to a vector.

    Accepts an (m, ...) array or a Tensor; errors on an empty set.
    """
    if isinstance(prototypes, Tensor):
        m = prototypes.shape[0]
        if m == 0:
            raise ValueError("centroid of an empty prototype set")
        return ad.mean(ad.reshape(prototypes, (m, prototypes.size // m)), axis=0)
    arr = np.asarray(prototypes, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[0] == 0:
        raise ValueError("centroid of an empty prototype set")
    return arr.reshape(arr.shape[0], -1).mean(axis=0)


def align_loss(cells) -> Tensor:
    """Sum over cells of || centroid(cell) - centroid(all) ||_2.

    `cells` is a non-empty list of prototype blocks (Tensors or arrays,
    each (m, ...) with m >= 1).  Zero exactly when every cell centroid
    coincides with the global one; differentiable wherever it is nonzero.
    """
    if not cells:
        raise ValueError("no cells to align")
    tensors = []
    for cell in cells:
        t = cell if isinstance(cell, Tensor) else ad.constant(np.asarray(cell, dtype=np.float64))
        if t.shape[0] == 0:
            raise ValueError("empty cell in alignment loss")
        tensors.append(ad.reshape(t, (t.shape[0], t.size // t.shape[0])))
    pooled = ad.concat(tensors, axis=0)
    global_centroid = ad.mean(pooled, axis=0)
    total = None
    for t in tensors:
        gap = ad.sub(ad.mean(t, axis=0), global_centroid)
        term = ad.l2_norm(gap)
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(distill_loss, align, lam) -> Tensor:
    """Distillation loss plus lam times the alignment penalty, one tape."""
    lam = float(lam)
    if lam < 0.0:
        raise ValueError("alignment weight must be non-negative")
    return ad.add(distill_loss, ad.mul(align, lam))
