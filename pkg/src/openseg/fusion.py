"""Multi-layer activation fusion.

Upsamples lower-resolution activation layers to the output resolution,
concatenates them along the channel axis into a per-pixel feature field,
and extracts per-class training rows from correctly classified pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoSamples, ScaleMismatch
from .tensor_store import IGNORE_LABEL, Scene


@dataclass(frozen=True)
class LayerSpec:
    """Selects one activation layer and how it is brought to output resolution."""

    layer: int
    scale: int
    mode: str = "nearest"  # nearest | bilinear


@dataclass(frozen=True)
class FeatureField:
    """Fused per-pixel features, D x H x W, float64, finite."""

    data: np.ndarray
    provenance: list[LayerSpec] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class SampleMatrix:
    """Per-class training rows (N x D) with their source pixel coordinates."""

    rows: np.ndarray
    class_id: int
    coords: np.ndarray  # N x 2 (row, col)


def upsample(t: np.ndarray, factor: int, mode: str = "nearest") -> np.ndarray:
    """Upsample a C x h x w tensor by an integer factor.

    Nearest replicates each value into a factor x factor block. Bilinear
    uses the align-corners=false convention: output pixel j samples the
    input at (j + 0.5) / factor - 0.5, clamped at the borders.
    """
    if factor < 1:
        raise ScaleMismatch(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return np.asarray(t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if mode == "nearest":
        return np.repeat(np.repeat(t, factor, axis=1), factor, axis=2)
    if mode != "bilinear":
        raise ScaleMismatch(f"unknown upsampling mode {mode!r}")

    c, h, w = t.shape

    def _axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) / factor - 0.5
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        i1 = np.clip(i0 + 1, 0, n_in - 1)
        i0 = np.clip(i0, 0, n_in - 1)
        return i0, i1, frac

    r0, r1, rf = _axis_weights(h, h * factor)
    c0, c1, cf = _axis_weights(w, w * factor)
    top = t[:, r0, :] * (1.0 - rf)[None, :, None] + t[:, r1, :] * rf[None, :, None]
    out = top[:, :, c0] * (1.0 - cf)[None, None, :] + top[:, :, c1] * cf[None, None, :]
    return out


def fuse(scene: Scene, spec: list[LayerSpec]) -> FeatureField:
    """Concatenate the upsampled layers named by ``spec`` into one feature field."""
    if not spec:
        raise ScaleMismatch("fusion spec must name at least one layer")
    h, w = scene.shape
    parts = []
    for s in spec:
        if not 0 <= s.layer < len(scene.layers):
            raise ScaleMismatch(f"layer index {s.layer} out of range")
        up = upsample(scene.layers[s.layer].data, s.scale, s.mode)
        if up.shape[1:] != (h, w):
            raise ScaleMismatch(
                f"layer {s.layer} upsampled to {up.shape[1:]}, expected {(h, w)}"
            )
        parts.append(up)
    return FeatureField(data=np.concatenate(parts, axis=0), provenance=list(spec))


def default_spec(scene: Scene) -> list[LayerSpec]:
    """Fuse every layer in the scene at its declared scale, nearest mode."""
    return [LayerSpec(layer=i, scale=l.scale) for i, l in enumerate(scene.layers)]


def gather_class_samples(
    field: FeatureField,
    predicted: np.ndarray,
    truth: np.ndarray,
    class_id: int,
    cap: int = 200_000,
    seed: int = 0,
) -> SampleMatrix:
    """Rows of the feature field at correctly classified pixels of one class.

    If more than ``cap`` pixels qualify, a seeded reservoir sample of
    exactly ``cap`` rows is kept; deterministic for a fixed seed.
    """
    d, h, w = field.data.shape
    if predicted.shape != (h, w) or truth.shape != (h, w):
        raise ScaleMismatch("predicted/truth dims do not match the feature field")
    if cap < 1:
        raise ScaleMismatch(f"cap must be >= 1, got {cap}")

    mask = (predicted == class_id) & (truth == class_id) & (truth != IGNORE_LABEL)
    flat = np.flatnonzero(mask.ravel())
    if flat.size == 0:
        raise NoSamples(f"no correctly classified pixels for class {class_id}")

    if flat.size > cap:
        flat = _reservoir(flat, cap, seed)
    rows = field.data.reshape(d, h * w)[:, flat].T.copy()
    coords = np.stack([flat // w, flat % w], axis=1)
    return SampleMatrix(rows=rows, class_id=class_id, coords=coords)


def _reservoir(candidates: np.ndarray, cap: int, seed: int) -> np.ndarray:
    """Algorithm-R reservoir over an index array, deterministic per seed."""
    rng = np.random.default_rng(seed)
    reservoir = candidates[:cap].copy()
    n = candidates.size
    slots = rng.integers(0, np.arange(cap + 1, n + 1))
    for i in range(cap, n):
        j = slots[i - cap]
        if j < cap:
            reservoir[j] = candidates[i]
    return reservoir
