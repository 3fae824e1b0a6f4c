"""Deterministic synthetic scene generator.

Tiles a label grid into class regions, draws per-pixel activations from
per-class gaussian clusters at each declared layer resolution, and
derives logits from feature-space distances to the class centers so the
closed-set prediction matches the labels up to configurable noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadConfig
from .tensor_store import Layer, Scene, validate_scene


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 5
    height: int = 96
    width: int = 96
    layers: tuple[tuple[int, int], ...] = ((4, 1), (8, 2), (16, 4))  # (channels, scale)
    separation: float = 6.0
    feature_noise: float = 1.0
    logit_temperature: float = 4.0
    logit_noise: float = 0.0
    mode: str = "stripes"  # stripes | blobs
    seed: int = 0

    @property
    def n_features(self) -> int:
        return sum(c for c, _ in self.layers)


def _validate(cfg: SynthConfig) -> int:
    if cfg.n_classes < 2:
        raise BadConfig("need at least 2 classes")
    if cfg.separation <= 0.0:
        raise BadConfig("separation factor must be positive")
    if not cfg.layers:
        raise BadConfig("at least one activation layer required")
    if cfg.mode not in ("stripes", "blobs"):
        raise BadConfig(f"unknown region mode {cfg.mode!r}")
    s_max = max(s for _, s in cfg.layers)
    if cfg.height % s_max or cfg.width % s_max:
        raise BadConfig(f"grid dims must be multiples of the max scale {s_max}")
    if (cfg.height // s_max) < cfg.n_classes:
        raise BadConfig("grid too small to give every class a region")
    return s_max


def _coarse_labels(cfg: SynthConfig, s_max: int, rng: np.random.Generator) -> np.ndarray:
    ch, cw = cfg.height // s_max, cfg.width // s_max
    if cfg.mode == "stripes":
        rows = (np.arange(ch) * cfg.n_classes) // ch
        return np.repeat(rows[:, None], cw, axis=1).astype(np.int32)
    # blobs: nearest-seed regions, one seed per class
    seeds_r = rng.integers(0, ch, cfg.n_classes)
    seeds_c = rng.integers(0, cw, cfg.n_classes)
    rr, cc = np.meshgrid(np.arange(ch), np.arange(cw), indexing="ij")
    d2 = (rr[None] - seeds_r[:, None, None]) ** 2 + (cc[None] - seeds_c[:, None, None]) ** 2
    return np.argmin(d2, axis=0).astype(np.int32)


def class_means(cfg: SynthConfig) -> np.ndarray:
    """Per-class feature cluster centers: random unit directions x separation."""
    rng = np.random.default_rng(cfg.seed + 1_000_003)
    m = rng.standard_normal((cfg.n_classes, cfg.n_features))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    m *= cfg.separation
    dists = np.linalg.norm(m[:, None] - m[None, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    if dists.min() < 1e-9:
        raise BadConfig("class means coincide; increase separation")
    return m


def generate_scene(cfg: SynthConfig, patch_id: str = "synth_0",
                   noise_seed: int | None = None) -> Scene:
    """Build one fully deterministic scene from the config and seed.

    The class geometry (cluster centers) depends only on ``cfg.seed``;
    ``noise_seed`` varies the per-scene draws so datasets share geometry.
    """
    s_max = _validate(cfg)
    rng = np.random.default_rng(cfg.seed if noise_seed is None else noise_seed)
    means = class_means(cfg)

    coarse = _coarse_labels(cfg, s_max, rng)
    labels = np.repeat(np.repeat(coarse, s_max, axis=0), s_max, axis=1)

    layers = []
    fused_parts = []
    offset = 0
    for channels, scale in cfg.layers:
        lh, lw = cfg.height // scale, cfg.width // scale
        lab_l = labels[::scale, ::scale]  # pure cells by construction
        base = means[lab_l, offset:offset + channels]  # lh x lw x C_l
        noise = cfg.feature_noise * rng.standard_normal((lh, lw, channels))
        data = np.moveaxis(base + noise, 2, 0).astype(np.float32)
        layers.append(Layer(data=data, scale=scale))
        up = np.repeat(np.repeat(data, scale, axis=1), scale, axis=2)
        fused_parts.append(up.astype(np.float64))
        offset += channels

    fused = np.concatenate(fused_parts, axis=0)  # D x H x W
    flat = fused.reshape(cfg.n_features, -1).T   # N x D

    # logit_c = -||a - m_c||^2 / (2 T); softmax shift-invariance drops ||a||^2.
    # A global offset re-centers off-class logits near zero so correct-class
    # activations come out large and positive, as trained networks produce.
    cross = flat @ means.T
    sq = np.sum(means**2, axis=1)
    offset = cfg.separation**2 / (2.0 * cfg.logit_temperature)
    logits = (cross - 0.5 * sq) / cfg.logit_temperature + offset
    if cfg.logit_noise > 0.0:
        logits = logits + cfg.logit_noise * rng.standard_normal(logits.shape)
    logits = logits.T.reshape(cfg.n_classes, cfg.height, cfg.width).astype(np.float32)

    scene = Scene(
        layers=layers,
        logits=logits,
        labels=labels.astype(np.int32),
        class_names=[f"class_{i}" for i in range(cfg.n_classes)],
        patch_id=patch_id,
    )
    return validate_scene(scene)


def generate_dataset(cfg: SynthConfig, n_scenes: int) -> list[Scene]:
    """Independent scenes sharing the class geometry, noise seeded per scene."""
    return [
        generate_scene(cfg, patch_id=f"synth_{i}", noise_seed=cfg.seed + 7919 * i)
        for i in range(n_scenes)
    ]
