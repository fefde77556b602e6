"""Core voxel-grid types and the elementwise operations shared by all modules.

Grid conventions used across the package:

- Scalar fields are numpy arrays of shape ``(H, W, D)`` indexed ``[y, x, z]``.
- Class-indexed fields prepend the class axis: shape ``(C, H, W, D)``.
- Binary masks are plain boolean arrays of shape ``(H, W, D)``.
- An axial slice fixes z (``field[:, :, z]``, in-plane axes y, x); a sagittal
  slice fixes x (``field[:, x, :]``, in-plane axes y, z).
- The canonical flat voxel order (used bit-exactly by file I/O) runs
  x fastest, then y, then z, with the class axis slowest.

All probability math is 32-bit float.  Constructors take ownership of the
array they are given and mark it read-only; operations are pure functions, so
everything here is safe to evaluate concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RejectedInputError

PROB_SUM_TOL = 1e-5
MAX_CLASSES = 256  # labels are stored as uint8


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _as_grid(data, dtype, ndim, what: str) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != ndim:
        raise RejectedInputError(f"{what} must be {ndim}D, got shape {arr.shape}")
    if any(n < 1 for n in arr.shape):
        raise RejectedInputError(f"{what} has an empty dimension: {arr.shape}")
    return _freeze(arr)


@dataclass
class Volume:
    """3D scalar intensity grid with voxel spacing (sx, sy, sz) in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = _as_grid(self.data, np.float32, 3, "volume data")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(not np.isfinite(s) or s <= 0.0 for s in sp):
            raise RejectedInputError(f"spacing must be 3 positive finite floats, got {self.spacing}")
        self.spacing = sp

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class ProbVolume:
    """Per-class probability field of shape (C, H, W, D).

    Entries lie in [0, 1] and sum to 1 over the class axis at every voxel
    (within PROB_SUM_TOL).
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_grid(self.data, np.float32, 4, "probability data")
        if self.data.shape[0] < 2:
            raise RejectedInputError("ProbVolume needs at least 2 classes")
        if self.data.shape[0] > MAX_CLASSES:
            raise RejectedInputError(f"ProbVolume supports at most {MAX_CLASSES} classes")
        lo = float(self.data.min())
        hi = float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise RejectedInputError(f"probabilities outside [0, 1]: min={lo}, max={hi}")
        sums = self.data.sum(axis=0, dtype=np.float64)
        err = float(np.abs(sums - 1.0).max())
        if err > PROB_SUM_TOL:
            raise RejectedInputError(f"per-voxel probabilities sum to 1 off by {err}")

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def class_probs(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.num_classes:
            raise RejectedInputError(f"class {class_id} out of range [0, {self.num_classes})")
        return self.data[class_id]


@dataclass
class LabelMap:
    """Integer label grid with values in {0, ..., num_classes-1}; 0 = background."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.data = _as_grid(self.data, np.uint8, 3, "label data")
        self.num_classes = int(self.num_classes)
        if not 2 <= self.num_classes <= MAX_CLASSES:
            raise RejectedInputError(f"num_classes must be in [2, {MAX_CLASSES}], got {self.num_classes}")
        hi = int(self.data.max())
        if hi >= self.num_classes:
            raise RejectedInputError(f"label {hi} >= num_classes {self.num_classes}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def mask_to_labels(mask: np.ndarray) -> LabelMap:
    """Wrap a binary mask as a 2-class LabelMap (for file interchange)."""
    return LabelMap(np.ascontiguousarray(mask, dtype=np.uint8), 2)


def softmax_from_logits(logits) -> ProbVolume:
    """Per-voxel softmax over the leading class axis, with max-subtraction.

    Rejects non-finite logits; the subtraction keeps exp() from overflowing
    for any finite float32 input.
    """
    arr = np.asarray(logits, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[0] < 2:
        raise RejectedInputError(f"logits must be (C>=2, H, W, D), got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise RejectedInputError("logits contain non-finite values")
    shifted = arr - arr.max(axis=0, keepdims=True)
    ex = np.exp(shifted)
    ex /= ex.sum(axis=0, keepdims=True)
    return ProbVolume(ex)


def argmax_labelmap(p: ProbVolume) -> LabelMap:
    """Voxel-wise argmax; ties break to the smallest class index."""
    return LabelMap(np.argmax(p.data, axis=0).astype(np.uint8), p.num_classes)


def class_mask(labels: LabelMap, class_id: int) -> np.ndarray:
    """Binary mask of the voxels assigned to ``class_id``."""
    if not 0 <= class_id < labels.num_classes:
        raise RejectedInputError(f"class {class_id} out of range [0, {labels.num_classes})")
    return labels.data == class_id


def voxel_entropy(p: ProbVolume) -> np.ndarray:
    """Per-voxel entropy -sum_c p_c ln p_c, with the convention 0 ln 0 = 0.

    Values lie in [0, ln C]: 0 at one-hot voxels, ln C at uniform ones.
    Invariant under permutation of the class axis.
    """
    pd = p.data
    with np.errstate(divide="ignore", invalid="ignore"):
        contrib = np.where(pd > 0.0, pd * np.log(pd), np.float32(0.0))
    return _freeze(-contrib.sum(axis=0, dtype=np.float32))
