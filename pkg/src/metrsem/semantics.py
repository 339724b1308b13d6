"""Per-voxel label probabilities: bundle histograms, Bayesian fusion, argmax.

Every probability vector is kept on the simplex with all entries at or above
``EPS_FLOOR`` so that no class can become impossible after a long product of
updates.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

EPS_FLOOR = 1e-4
DEFAULT_NUM_CLASSES = 8


def clamp_simplex(p: np.ndarray, floor: float = EPS_FLOOR) -> np.ndarray:
    """Normalize rows, then lift entries below ``floor`` and rescale the rest.

    Entries that were lifted stay exactly at ``floor``; the others are scaled
    down to make up the difference, repeated until nothing new drops below.
    """
    p = np.array(p, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    p = p / p.sum(axis=1, keepdims=True)
    K = p.shape[1]
    if floor * K >= 1.0:
        raise ValueError("floor too large for the number of classes")
    fixed = np.zeros(p.shape, dtype=bool)
    for _ in range(K):
        low = (p < floor) & ~fixed
        if not low.any():
            break
        fixed |= low
        p[fixed] = floor
        free_mass = np.where(fixed, 0.0, p).sum(axis=1, keepdims=True)
        target = 1.0 - floor * fixed.sum(axis=1, keepdims=True)
        scale = np.divide(target, free_mass, out=np.ones_like(free_mass), where=free_mass > 0)
        p = np.where(fixed, floor, p * scale)
    return p[0] if single else p


def bundle_label_histogram(labels, num_classes: int = DEFAULT_NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise ValueError("empty bundle")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("label id out of range")
    counts = np.bincount(labels, minlength=num_classes).astype(float)
    return clamp_simplex(counts / counts.sum())


def bundle_histograms(bundle_of_point: np.ndarray, labels: np.ndarray, n_bundles: int,
                      num_classes: int = DEFAULT_NUM_CLASSES) -> np.ndarray:
    """Histograms for many bundles at once, shape (n_bundles, num_classes)."""
    counts = np.zeros((n_bundles, num_classes))
    np.add.at(counts, (bundle_of_point, np.asarray(labels, dtype=np.int64)), 1.0)
    return clamp_simplex(counts)


def bayesian_update(prior, measurement) -> np.ndarray:
    """Elementwise product of prior and likelihood, renormalized and floored."""
    prior = np.asarray(prior, dtype=float)
    measurement = np.asarray(measurement, dtype=float)
    return clamp_simplex(prior * measurement)


def most_likely_label(v) -> int | np.ndarray:
    # argmax returns the first maximum, so ties go to the smallest class id
    v = np.asarray(v)
    if v.ndim == 1:
        return int(np.argmax(v))
    return np.argmax(v, axis=-1)


def update_along_ray(grid, record, bundle_index: int, histogram) -> None:
    """Fuse one bundle's histogram into the voxels its TSDF pass updated."""
    sel = record.bundle == bundle_index
    keys = record.voxels[sel]
    if not len(keys):
        return
    prior = grid.get_probs(keys)
    grid.set_probs(keys, bayesian_update(prior, np.broadcast_to(histogram, prior.shape)))


def update_labels(grid, record, histograms: np.ndarray) -> None:
    """Batch form of update_along_ray over every voxel in an integration record."""
    if not len(record.voxels):
        return
    prior = grid.get_probs(record.voxels)
    grid.set_probs(record.voxels, bayesian_update(prior, histograms[record.bundle]))


def integrate_semantic(grid, cloud):
    """TSDF integration followed by label fusion over exactly the touched voxels."""
    from .volumetric import integrate

    record = integrate(grid, cloud)
    hist = bundle_histograms(record.bundles.bundle_of_point, record.bundles.labels, len(record.bundles),
                             grid.num_classes)
    update_labels(grid, record, hist)
    return record


# ---------------------------------------------------------------- palette

@dataclass(frozen=True)
class LabelClass:
    id: int
    name: str
    rgb: tuple[int, int, int]


DEFAULT_PALETTE = (
    LabelClass(0, "unknown", (0, 0, 0)),
    LabelClass(1, "floor", (128, 64, 128)),
    LabelClass(2, "wall", (190, 153, 153)),
    LabelClass(3, "ceiling", (70, 130, 180)),
    LabelClass(4, "shelf", (220, 20, 60)),
    LabelClass(5, "table", (255, 200, 0)),
    LabelClass(6, "object", (0, 160, 80)),
    LabelClass(7, "other", (120, 120, 255)),
)


def write_palette(path, palette=DEFAULT_PALETTE) -> None:
    lines = ["# id name r g b"] + [f"{c.id} {c.name} {c.rgb[0]} {c.rgb[1]} {c.rgb[2]}" for c in palette]
    Path(path).write_text("\n".join(lines) + "\n")


def read_palette(path) -> tuple[LabelClass, ...]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        i, name, r, g, b = line.split()
        out.append(LabelClass(int(i), name, (int(r), int(g), int(b))))
    return tuple(sorted(out, key=lambda c: c.id))


def palette_colors(palette=DEFAULT_PALETTE) -> np.ndarray:
    colors = np.zeros((max(c.id for c in palette) + 1, 3), dtype=np.uint8)
    for c in palette:
        colors[c.id] = c.rgb
    return colors
