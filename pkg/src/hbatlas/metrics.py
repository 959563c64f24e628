"""Atlas sharpness, Dice overlap and atlas-based label propagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geodesic import DeformationField, GridMismatchError, Image


@dataclass
class LabelMap:
    labels: np.ndarray
    label_set: tuple = None
    spacing: tuple = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            rounded = np.rint(self.labels)
            if not np.array_equal(rounded, self.labels):
                raise ValueError("label maps must hold integer values")
            self.labels = rounded.astype(np.int64)
        present = tuple(int(x) for x in np.unique(self.labels))
        if self.label_set is None:
            self.label_set = present
        else:
            self.label_set = tuple(sorted(int(x) for x in self.label_set))
            extra = set(present) - set(self.label_set)
            if extra:
                raise ValueError(f"labels {sorted(extra)} are not in the declared set")
        if self.spacing is None:
            self.spacing = (1.0,) * self.labels.ndim

    @property
    def full_dims(self):
        return self.labels.shape


@dataclass
class SharpnessReport:
    w: int
    n_patches: int
    scores: np.ndarray
    n_skipped: int

    @property
    def mean(self):
        return float(np.mean(self.scores)) if self.scores.size else float("nan")

    @property
    def std(self):
        return float(np.std(self.scores)) if self.scores.size else float("nan")


def _values(x):
    if isinstance(x, Image):
        return x.intensities
    if isinstance(x, LabelMap):
        return x.labels
    return np.asarray(x)


def patch_corners(shape, w, n_patches, seed):
    """Random lower corners of ``w``-wide cubic patches lying fully inside ``shape``."""
    rng = np.random.default_rng(seed)
    highs = [n - w + 1 for n in shape]
    if min(highs) < 1:
        raise ValueError(f"patch size {w} does not fit in grid {shape}")
    return np.stack([rng.integers(0, h, size=n_patches) for h in highs], axis=1)


def sharpness(image, w=3, n_patches=3000, seed=0) -> SharpnessReport:
    """Mean over random patches of ``sd / |avg|`` of the intensities in the patch.

    Patches whose mean is zero are skipped and counted in ``n_skipped``.
    """
    img = np.asarray(_values(image), dtype=float)
    if w < 2:
        raise ValueError("patch size must be at least 2")
    corners = patch_corners(img.shape, w, n_patches, seed)
    offsets = np.stack(np.meshgrid(*[np.arange(w)] * img.ndim, indexing="ij"), -1).reshape(-1, img.ndim)
    idx = corners[:, None, :] + offsets[None, :, :]
    vals = img[tuple(idx[..., a] for a in range(img.ndim))]
    avg = vals.mean(axis=1)
    sd = vals.std(axis=1)
    keep = avg != 0
    scores = sd[keep] / np.abs(avg[keep])
    return SharpnessReport(w, n_patches, scores, int((~keep).sum()))


def dice(a, b, label) -> float:
    """``2|A & B| / (|A| + |B|)`` for one label; 1.0 if the label is absent from both."""
    la, lb = _values(a), _values(b)
    if la.shape != lb.shape:
        raise GridMismatchError(f"label grids differ: {la.shape} vs {lb.shape}")
    A = la == label
    B = lb == label
    size = int(A.sum()) + int(B.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / size


def propagate_segmentation(seg, phi: DeformationField) -> LabelMap:
    """``seg(phi(x))`` by nearest-neighbour lookup, clamped to the grid."""
    labels = _values(seg)
    d = phi.d
    if tuple(labels.shape[-d:]) != tuple(phi.full_dims):
        raise GridMismatchError(f"label grid {labels.shape} != deformation grid {phi.full_dims}")
    idx = []
    for a, n in enumerate(labels.shape[-d:]):
        idx.append(np.clip(np.rint(phi.map.take(a, axis=-d - 1)), 0, n - 1).astype(np.intp))
    if labels.ndim == d:
        out = labels[tuple(idx)]
    else:
        batch = np.broadcast_shapes(labels.shape[:-d], idx[0].shape[:-d])
        lb = np.broadcast_to(labels, batch + labels.shape[-d:]).reshape((-1,) + labels.shape[-d:])
        ib = [np.broadcast_to(i, batch + i.shape[-d:]).reshape((-1,) + i.shape[-d:]) for i in idx]
        out = np.stack([lb[k][tuple(i[k] for i in ib)] for k in range(lb.shape[0])])
        out = out.reshape(batch + out.shape[1:])
    label_set = seg.label_set if isinstance(seg, LabelMap) else None
    return LabelMap(out, label_set) if out.ndim == d else out


def label_atlas(label_maps, phi_inv) -> np.ndarray:
    """Majority vote of subject label maps pulled into atlas space by ``phi_inv``.

    ``label_maps`` is ``(N, *full)``; ``phi_inv`` is ``(N, d, *full)``.
    Ties go to the smaller label.
    """
    labels = np.asarray(label_maps)
    pm = phi_inv.map if isinstance(phi_inv, DeformationField) else np.asarray(phi_inv)
    pulled = propagate_segmentation(labels, DeformationField(pm))
    values = np.unique(labels)
    counts = np.stack([(pulled == v).sum(axis=0) for v in values])
    return values[np.argmax(counts, axis=0)]


def mean_dice(a, b, labels=None):
    """Per-label Dice and their mean, over the union of labels present (background excluded)."""
    la, lb = _values(a), _values(b)
    if labels is None:
        labels = sorted((set(np.unique(la)) | set(np.unique(lb))) - {0})
    scores = {int(lab): dice(la, lb, lab) for lab in labels}
    return scores, float(np.mean(list(scores.values()))) if scores else float("nan")
