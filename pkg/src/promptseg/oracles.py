"""Pluggable segmentation backends behind the pipeline.

Two oracle surfaces exist: a *specialist* (trainable; ``predict`` + ``fit``)
and a *generalist* (frozen, promptable; ``segment``).  The phantom
implementations below run the whole pipeline at desk scale against synthetic
ellipsoid scans with exact ground truth, while ``FileOracle`` bridges to real
external models through a directory exchange:

    req_<uid>.nii        request volume (written atomically)
    req_<uid>.prompts    box prompts, one line per box (segment only)
    resp_<uid>.nii       uint8 mask response (segment only)
    resp_<uid>.prob.nii  float32 probability response (predict and segment)
    fit_<uid>/ + fit_<uid>.req / fit_<uid>.done   training handshake

The exchange root defaults to the PROMPTSEG_EXCHANGE environment variable.
Phantom oracles are bitwise deterministic given (seed, quality, inputs):
every stochastic field is drawn from an RNG keyed on the oracle seed, a
fingerprint of the input volume, and the class (plus the prompt bytes for
the generalist), never from mutable RNG state.
"""

from __future__ import annotations

import abc
import hashlib
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from . import nifti_io
from .errors import (ConfigError, CorruptFileError, NiftiError,
                     OracleProtocolError, OracleUnavailableError,
                     RejectedInputError, UnknownVolumeError)
from .prompting import BoxPromptPair, format_prompts
from .refinement import roi_ranges
from .vls_loss import SupervisionTarget
from .volgrid import LabelMap, ProbVolume, Volume, mask_to_labels


@dataclass(frozen=True)
class TrainingExample:
    """One scan's contribution to a specialist fit: image, merged supervision
    target, the classes carrying real annotations, and an optional voxel
    weight mask (1 = use the voxel)."""

    volume: Volume
    target: SupervisionTarget
    labeled_classes: frozenset[int]
    weight_mask: np.ndarray | None = None


class SpecialistOracle(abc.ABC):
    """Trainable task model.  fit() is exclusive: no predict during fit."""

    @abc.abstractmethod
    def predict(self, volume: Volume) -> ProbVolume: ...

    @abc.abstractmethod
    def fit(self, examples: Sequence[TrainingExample], supervision: str = "full") -> None: ...


class GeneralistOracle(abc.ABC):
    """Frozen promptable model: box prompts in, candidate mask + 2-class
    (background, organ) probabilities out."""

    @abc.abstractmethod
    def segment(self, volume: Volume,
                prompts: BoxPromptPair) -> tuple[np.ndarray, ProbVolume]: ...


# --- synthetic phantoms -----------------------------------------------------

@dataclass(frozen=True)
class Ellipsoid:
    """Axis lengths are semi-axes in voxels along (y, x, z) before rotation;
    angles are intrinsic z-y-x Euler angles in radians."""

    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)
    intensity: float = 1.0


@dataclass(frozen=True)
class PhantomNoise:
    """Corruption knobs consumed by the phantom oracles and test harnesses."""

    jitter_sigma: float = 2.0     # boundary jitter scale, voxels
    blob_count: int = 3           # false-positive blobs for corrupted candidates
    blob_radius: float = 2.5
    kappa: float = 8.0            # confidence sharpness of oracle probabilities
    image_sigma: float = 0.05     # additive image noise


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    organs: tuple[Ellipsoid, ...]
    noise: PhantomNoise = PhantomNoise()

    @property
    def num_classes(self) -> int:
        return len(self.organs) + 1


def ellipsoid_mask(dims: tuple[int, int, int], ell: Ellipsoid) -> np.ndarray:
    coords = np.indices(dims, dtype=np.float64)              # (3, H, W, D), axes (y, x, z)
    offs = coords - np.asarray(ell.center, dtype=np.float64).reshape(3, 1, 1, 1)
    rot = Rotation.from_euler("zyx", ell.angles).as_matrix()
    local = np.einsum("ji,j...->i...", rot, offs)            # R^T (p - c)
    radii = np.asarray(ell.radii, dtype=np.float64).reshape(3, 1, 1, 1)
    return ((local / radii) ** 2).sum(axis=0) <= 1.0


def generate_phantom(spec: PhantomSpec, seed) -> tuple[Volume, LabelMap]:
    """Rasterize a phantom: exact label map plus a noisy intensity image.

    Deterministic for a fixed seed.  Overlapping ellipsoids are resolved by
    organ-index priority: earlier organs keep contested voxels.
    """
    labels = np.zeros(spec.dims, dtype=np.uint8)
    image = np.zeros(spec.dims, dtype=np.float64)
    for idx, ell in enumerate(spec.organs, start=1):
        mask = ellipsoid_mask(spec.dims, ell) & (labels == 0)
        labels[mask] = idx
        image[mask] = ell.intensity
    rng = np.random.default_rng(seed)
    image += rng.normal(0.0, spec.noise.image_sigma, size=spec.dims)
    return Volume(image.astype(np.float32)), LabelMap(labels, max(2, spec.num_classes))


def random_phantom_spec(dims: tuple[int, int, int], num_organs: int, rng,
                        noise: PhantomNoise = PhantomNoise()) -> PhantomSpec:
    """Random non-crowded ellipsoid layout; rejection-samples centers so
    organs rarely touch (residual overlaps fall back to rasterization
    priority)."""
    side = min(dims)
    r_lo, r_hi = 0.11 * side, 0.17 * side
    organs = []
    centers: list[np.ndarray] = []
    radii_max: list[float] = []
    for _ in range(num_organs):
        radii = rng.uniform(r_lo, r_hi, size=3)
        rmax = float(radii.max())
        margin = rmax + 1.5
        center = None
        for attempt in range(400):
            cand = np.array([rng.uniform(margin, d - 1 - margin) for d in dims])
            slack = 1.0 if attempt < 200 else 0.75
            if all(np.linalg.norm(cand - c) >= slack * (rmax + rm)
                   for c, rm in zip(centers, radii_max)):
                center = cand
                break
        if center is None:
            center = np.array([rng.uniform(margin, d - 1 - margin) for d in dims])
        centers.append(center)
        radii_max.append(rmax)
        organs.append(Ellipsoid(
            center=tuple(center),
            radii=tuple(radii),
            angles=tuple(rng.uniform(0.0, np.pi, size=3)),
            intensity=float(rng.uniform(0.4, 1.0)),
        ))
    return PhantomSpec(dims=tuple(dims), organs=tuple(organs), noise=noise)


def make_phantom_suite(n_scans: int, num_organs: int, dims: tuple[int, int, int],
                       seed: int, noise: PhantomNoise = PhantomNoise()
                       ) -> list[tuple[str, Volume, LabelMap]]:
    """Deterministic list of (scan_id, image, ground truth) phantoms."""
    scans = []
    for idx in range(n_scans):
        rng = np.random.default_rng((seed, 1000 + idx))
        spec = random_phantom_spec(dims, num_organs, rng, noise)
        vol, gt = generate_phantom(spec, (seed, 2000 + idx))
        for c in range(1, spec.num_classes):
            if not (gt.data == c).any():
                raise ConfigError(f"phantom organ {c} rasterized empty; dims too small")
        scans.append((f"scan{idx:03d}", vol, gt))
    return scans


def volume_fingerprint(volume: Volume) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(volume.dims, dtype=np.int64).tobytes())
    h.update(volume.data.tobytes())
    return h.hexdigest()[:16]


@dataclass
class _PhantomScan:
    gt: LabelMap
    sdist: dict[int, np.ndarray] = field(default_factory=dict)
    bbox: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


class PhantomRegistry:
    """Ground truth lookup for phantom oracles, keyed by volume fingerprint.

    Caches per-organ signed distance fields (positive inside, in voxels) and
    tight 3D bounding boxes.
    """

    def __init__(self):
        self._scans: dict[str, _PhantomScan] = {}

    def register(self, volume: Volume, gt: LabelMap) -> str:
        if volume.dims != gt.dims:
            raise RejectedInputError(f"volume dims {volume.dims} vs gt dims {gt.dims}")
        fp = volume_fingerprint(volume)
        self._scans[fp] = _PhantomScan(gt=gt)
        return fp

    def lookup(self, volume: Volume) -> tuple[str, _PhantomScan]:
        fp = volume_fingerprint(volume)
        scan = self._scans.get(fp)
        if scan is None:
            raise UnknownVolumeError("volume was not generated by the registered phantom suite")
        return fp, scan

    def signed_distance(self, fp: str, class_id: int) -> np.ndarray:
        scan = self._scans[fp]
        sd = scan.sdist.get(class_id)
        if sd is None:
            mask = scan.gt.data == class_id
            if not mask.any():
                raise RejectedInputError(f"phantom class {class_id} is empty")
            inside = ndimage.distance_transform_edt(mask)
            outside = ndimage.distance_transform_edt(~mask)
            sd = (inside - outside).astype(np.float32)
            sd.flags.writeable = False
            scan.sdist[class_id] = sd
        return sd

    def organ_bbox(self, fp: str, class_id: int) -> tuple[np.ndarray, np.ndarray]:
        scan = self._scans[fp]
        bb = scan.bbox.get(class_id)
        if bb is None:
            coords = np.argwhere(scan.gt.data == class_id)
            if coords.size == 0:
                raise RejectedInputError(f"phantom class {class_id} is empty")
            bb = (coords.min(axis=0), coords.max(axis=0))
            scan.bbox[class_id] = bb
        return bb


def _rng_for(*key_parts) -> np.random.Generator:
    h = hashlib.sha256()
    for part in key_parts:
        h.update(str(part).encode())
        h.update(b"\x00")
    return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))


def _onehot_probs(labels: np.ndarray, num_classes: int, kappa: float) -> ProbVolume:
    """softmax(kappa * onehot(labels)), evaluated in closed form."""
    base = 1.0 / (np.exp(kappa) + num_classes - 1)
    top = np.exp(kappa) * base
    arr = np.full((num_classes,) + labels.shape, np.float32(base), dtype=np.float32)
    np.put_along_axis(arr, labels[None].astype(np.int64), np.float32(top), axis=0)
    return ProbVolume(arr)


class PhantomSpecialist(SpecialistOracle):
    """Closed-form stand-in for a trainable segmentation network.

    Per-class prediction quality q in [0, 1] drives the corruption of the
    registered ground truth: boundary jitter scaled by (1 - q), and classes
    with q = 0 dropped entirely (never-supervised organs stay invisible).
    fit() is a closed-form quality update, not gradient descent: each
    supervised class's q moves toward a target derived from how much of the
    class's ground truth the supervision supports versus contradicts,

        target_q = clip((support - cw * contradiction) / gt_voxels, 0, 1)

    aggregated over the fit set, so quality is proportional to the labeled
    voxel coverage and repeated fits on identical data are idempotent
    (``adaptation`` = 1 models training to convergence each round).
    Under "full" supervision every voxel of every class is supervised (absent
    organs read as background and contradict); under "partial" supervision
    only channels in labeled/pseudo sets are trained and absent organs are
    simply ignored.
    """

    def __init__(self, registry: PhantomRegistry, quality: float = 0.0,
                 kappa: float = 8.0, jitter_sigma: float = 2.0,
                 contradiction_weight: float = 0.5, adaptation: float = 1.0,
                 seed: int = 0):
        if not 0.0 <= quality <= 1.0:
            raise RejectedInputError("quality must lie in [0, 1]")
        self.registry = registry
        self.kappa = float(kappa)
        self.jitter_sigma = float(jitter_sigma)
        self.contradiction_weight = float(contradiction_weight)
        self.adaptation = float(adaptation)
        self.seed = int(seed)
        self._base_quality = float(quality)
        self._quality: dict[int, float] = {}
        self._fitted = quality > 0.0

    def quality(self, class_id: int) -> float:
        return self._quality.get(class_id, self._base_quality)

    def predict(self, volume: Volume) -> ProbVolume:
        fp, scan = self.registry.lookup(volume)
        C = scan.gt.num_classes
        dims = scan.gt.dims
        if not self._fitted:
            return ProbVolume(np.full((C,) + dims, np.float32(1.0 / C)))
        labels = np.zeros(dims, dtype=np.uint8)
        for c in range(1, C):
            q = self.quality(c)
            if q <= 0.0:
                continue  # organ invisible to the model
            sd = self.registry.signed_distance(fp, c)
            if q >= 1.0:
                corrupted = sd > 0.0
            else:
                noise = _rng_for(self.seed, fp, c).standard_normal(dims).astype(np.float32)
                corrupted = sd + (1.0 - q) * self.jitter_sigma * noise > 0.0
            labels[(labels == 0) & corrupted] = c
        return _onehot_probs(labels, C, self.kappa)

    def fit(self, examples: Sequence[TrainingExample], supervision: str = "full") -> None:
        if supervision not in ("full", "partial"):
            raise RejectedInputError(f"unknown supervision mode {supervision!r}")
        if not examples:
            raise RejectedInputError("fit requires at least one example")
        support: dict[int, float] = {}
        contra: dict[int, float] = {}
        gt_total: dict[int, float] = {}
        for ex in examples:
            _, scan = self.registry.lookup(ex.volume)
            gt = scan.gt.data
            y = ex.target.labels.data
            C = scan.gt.num_classes
            w = ex.weight_mask if ex.weight_mask is not None else np.ones(gt.shape, dtype=bool)
            if supervision == "full":
                supervised = frozenset(range(1, C))
            else:
                supervised = frozenset(ex.labeled_classes) | ex.target.pseudo_classes
            for c in range(1, C):
                gt_c = gt == c
                gt_total[c] = gt_total.get(c, 0.0) + float(gt_c.sum())
                if c not in supervised:
                    continue
                t_c = y == c
                support[c] = support.get(c, 0.0) + float((gt_c & t_c & w).sum())
                wrong = (t_c & ~gt_c & w) | (gt_c & ~t_c & w)
                contra[c] = contra.get(c, 0.0) + float(wrong.sum())
        for c, total in gt_total.items():
            if total == 0.0 or (c not in support and c not in contra):
                continue
            target_q = (support.get(c, 0.0)
                        - self.contradiction_weight * contra.get(c, 0.0)) / total
            target_q = min(1.0, max(0.0, target_q))
            q = self.quality(c)
            self._quality[c] = q + self.adaptation * (target_q - q)
        self._fitted = True


class PhantomGeneralist(GeneralistOracle):
    """Closed-form stand-in for a frozen promptable segmentation model.

    The organ whose padded bounding box best overlaps the prompt-derived ROI
    is returned, degraded as a function of prompt quality: below
    ``match_threshold`` IoU the output is shifted toward the prompts, eroded
    and low-confidence.  Boundary noise and the odds of false-positive blobs
    near the organ both scale with (1 - cooperativeness), so uncooperative
    settings yield genuinely corrupted pseudo-label candidates.  Per-voxel
    organ probability is sigmoid(slope * signed_distance), so the candidate
    mask is exactly the voxel set with probability above 1/2, and sharper
    slopes (better prompts, higher cooperativeness) mean lower entropy.
    Prompts overlapping no organ yield an empty mask with uniform
    probabilities.
    """

    def __init__(self, registry: PhantomRegistry, cooperativeness: float = 1.0,
                 kappa: float = 3.0, noise_sigma: float = 1.5,
                 blob_count: int = 3, blob_radius: float = 2.5,
                 assumed_padding: int = 6, match_threshold: float = 0.25,
                 seed: int = 0):
        if not 0.0 <= cooperativeness <= 1.0:
            raise RejectedInputError("cooperativeness must lie in [0, 1]")
        self.registry = registry
        self.g = float(cooperativeness)
        self.kappa = float(kappa)
        self.noise_sigma = float(noise_sigma)
        self.blob_count = int(blob_count)
        self.blob_radius = float(blob_radius)
        self.assumed_padding = int(assumed_padding)
        self.match_threshold = float(match_threshold)
        self.seed = int(seed)

    def _match(self, fp: str, scan: _PhantomScan,
               prompts: BoxPromptPair) -> tuple[int | None, float, np.ndarray]:
        dims = scan.gt.dims
        ranges = roi_ranges(prompts, 0, dims)
        roi_lo = np.array([r[0] for r in ranges], dtype=np.float64)
        roi_hi = np.array([r[1] for r in ranges], dtype=np.float64)
        best_c, best_iou = None, 0.0
        best_center = np.zeros(3)
        for c in range(1, scan.gt.num_classes):
            lo, hi = self.registry.organ_bbox(fp, c)
            plo = np.maximum(lo - self.assumed_padding, 0)
            phi = np.minimum(hi + self.assumed_padding, np.asarray(dims) - 1)
            ilo = np.maximum(roi_lo, plo)
            ihi = np.minimum(roi_hi, phi)
            if np.any(ihi < ilo):
                continue
            inter = float(np.prod(ihi - ilo + 1))
            vol_roi = float(np.prod(roi_hi - roi_lo + 1))
            vol_box = float(np.prod(phi - plo + 1))
            iou = inter / (vol_roi + vol_box - inter)
            if iou > best_iou:
                best_c, best_iou = c, iou
                best_center = (plo + phi) / 2.0
        roi_center = (roi_lo + roi_hi) / 2.0
        return best_c, best_iou, roi_center - best_center

    def segment(self, volume: Volume, prompts: BoxPromptPair) -> tuple[np.ndarray, ProbVolume]:
        fp, scan = self.registry.lookup(volume)
        dims = scan.gt.dims
        c, iou, offset = self._match(fp, scan, prompts)
        if c is None:
            probs = ProbVolume(np.full((2,) + dims, np.float32(0.5)))
            return np.zeros(dims, dtype=bool), probs
        sd = self.registry.signed_distance(fp, c).astype(np.float64)
        if iou < self.match_threshold:
            shift = np.clip(np.round(offset).astype(int), -8, 8)
            sd = _shift_field(sd, shift, fill=-float(max(dims)))
            sd -= 1.0 + 2.0 * (self.match_threshold - iou) / self.match_threshold  # erode
        rng = _rng_for(self.seed, fp, c, format_prompts(prompts))
        noise = rng.standard_normal(dims)
        sd = sd + (1.0 - self.g) * self.noise_sigma * noise
        lo, hi = self.registry.organ_bbox(fp, c)
        spread = (np.asarray(hi) - lo) / 2.0 + self.assumed_padding
        organ_center = (np.asarray(lo) + hi) / 2.0
        for _ in range(self.blob_count):
            blob_center = organ_center + rng.uniform(-spread, spread)
            if rng.uniform() >= 1.0 - self.g:
                continue
            bump = self.blob_radius - _distance_from(dims, blob_center)
            sd = np.maximum(sd, bump)
        slope = self.kappa * (0.2 + 0.8 * self.g * min(1.0, iou))
        p_fg = 1.0 / (1.0 + np.exp(-slope * sd))
        p_fg = p_fg.astype(np.float32)
        probs = ProbVolume(np.stack([np.float32(1.0) - p_fg, p_fg]))
        return sd > 0.0, probs


def _distance_from(dims: tuple[int, int, int], center: np.ndarray) -> np.ndarray:
    coords = np.indices(dims, dtype=np.float64)
    offs = coords - np.asarray(center, dtype=np.float64).reshape(3, 1, 1, 1)
    return np.sqrt((offs ** 2).sum(axis=0))


def _shift_field(field_arr: np.ndarray, shift: np.ndarray, fill: float) -> np.ndarray:
    out = np.full_like(field_arr, fill)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for ax, s in enumerate(shift):
        n = field_arr.shape[ax]
        if abs(s) >= n:
            return out
        if s >= 0:
            dst[ax], src[ax] = slice(s, n), slice(0, n - s)
        else:
            dst[ax], src[ax] = slice(0, n + s), slice(-s, n)
    out[tuple(dst)] = field_arr[tuple(src)]
    return out


# --- directory-exchange oracle ----------------------------------------------

EXCHANGE_ENV = "PROMPTSEG_EXCHANGE"


class FileOracle(SpecialistOracle, GeneralistOracle):
    """Bridge to external model processes through a polled exchange directory.

    Requests are written atomically (temp file + rename); responses are read
    with retry until the deadline, so responders need not write atomically.
    One FileOracle instance serializes its own requests; run separate
    exchange directories for separate models.
    """

    def __init__(self, exchange_dir=None, timeout: float = 60.0,
                 poll_interval: float = 0.05, spacing=(1.0, 1.0, 1.0)):
        root = exchange_dir or os.environ.get(EXCHANGE_ENV)
        if not root:
            raise ConfigError(f"no exchange dir given and {EXCHANGE_ENV} is unset")
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.timeout = float(timeout)
        self.poll_interval = float(poll_interval)
        self.spacing = spacing

    def _write_atomic(self, path: Path, writer) -> None:
        tmp = path.with_name(path.name + ".tmp")
        writer(tmp)
        tmp.rename(path)

    def _await_file(self, path: Path, deadline: float):
        while True:
            if path.exists():
                try:
                    return nifti_io.read_volume(path)
                except CorruptFileError:
                    pass  # mid-write; retry
                except (NiftiError, RejectedInputError) as exc:
                    raise OracleProtocolError(f"{path}: {exc}") from exc
            if time.monotonic() > deadline:
                raise OracleUnavailableError(f"no response at {path} within {self.timeout}s")
            time.sleep(self.poll_interval)

    def _await_marker(self, path: Path, deadline: float) -> None:
        while not path.exists():
            if time.monotonic() > deadline:
                raise OracleUnavailableError(f"no response at {path} within {self.timeout}s")
            time.sleep(self.poll_interval)

    def predict(self, volume: Volume) -> ProbVolume:
        uid = uuid.uuid4().hex
        deadline = time.monotonic() + self.timeout
        self._write_atomic(self.root / f"req_{uid}.nii",
                           lambda p: nifti_io.write_volume(p, volume))
        probs = self._await_file(self.root / f"resp_{uid}.prob.nii", deadline)
        if not isinstance(probs, ProbVolume):
            raise OracleProtocolError("predict response is not a 4D probability image")
        if probs.dims != volume.dims:
            raise OracleProtocolError(
                f"predict response dims {probs.dims} != request dims {volume.dims}")
        return probs

    def segment(self, volume: Volume, prompts: BoxPromptPair) -> tuple[np.ndarray, ProbVolume]:
        uid = uuid.uuid4().hex
        deadline = time.monotonic() + self.timeout
        self._write_atomic(self.root / f"req_{uid}.nii",
                           lambda p: nifti_io.write_volume(p, volume))
        self._write_atomic(self.root / f"req_{uid}.prompts",
                           lambda p: p.write_text(format_prompts(prompts)))
        mask_img = self._await_file(self.root / f"resp_{uid}.nii", deadline)
        probs = self._await_file(self.root / f"resp_{uid}.prob.nii", deadline)
        if not isinstance(mask_img, LabelMap):
            raise OracleProtocolError("segment mask response is not a uint8 label image")
        if mask_img.dims != volume.dims:
            raise OracleProtocolError(
                f"segment response dims {mask_img.dims} != request dims {volume.dims}")
        if int(mask_img.data.max()) > 1:
            raise OracleProtocolError("segment mask response is not binary")
        if not isinstance(probs, ProbVolume) or probs.num_classes != 2:
            raise OracleProtocolError("segment probability response must be 2-class")
        if probs.dims != volume.dims:
            raise OracleProtocolError(
                f"segment probability dims {probs.dims} != request dims {volume.dims}")
        return mask_img.data > 0, probs

    def fit(self, examples: Sequence[TrainingExample], supervision: str = "full") -> None:
        uid = uuid.uuid4().hex
        deadline = time.monotonic() + self.timeout
        fit_dir = self.root / f"fit_{uid}"
        fit_dir.mkdir()
        for idx, ex in enumerate(examples):
            stem = fit_dir / f"scan_{idx:04d}"
            nifti_io.write_volume(stem.with_suffix(".nii"), ex.volume)
            nifti_io.write_volume(Path(str(stem) + ".target.nii"), ex.target.labels)
            if ex.weight_mask is not None:
                nifti_io.write_volume(Path(str(stem) + ".mask.nii"),
                                      mask_to_labels(ex.weight_mask))
            man = nifti_io.ScanManifest()
            for c in range(1, ex.target.labels.num_classes):
                if c in ex.target.pseudo_classes:
                    man.statuses[c] = "pseudo"
                elif c in ex.labeled_classes:
                    man.statuses[c] = "labeled"
                else:
                    man.statuses[c] = "unlabeled"
            nifti_io.write_manifest(Path(str(stem) + ".manifest"), man)
        self._write_atomic(self.root / f"fit_{uid}.req",
                           lambda p: p.write_text(f"supervision={supervision}\n"))
        self._await_marker(self.root / f"fit_{uid}.done", deadline)
