"""Run a segmentation model over tiled patches and write scene directories.

The exporter only serializes: it tiles each image into (optionally
overlapping) square patches, runs the model once per patch with forward
hooks on the declared layers, and writes one scene per patch in the
format the scoring toolkit reads.  All numerics stay downstream.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from openseg.errors import ScaleMismatch, ShapeMismatch
from openseg.tensor_store import IGNORE_LABEL, Layer, Scene, write_scene

from .models import build_model


class HookFailure(Exception):
    """A declared capture layer was missing or produced no activation."""


@dataclass(frozen=True)
class CaptureLayer:
    name: str          # dotted module path inside the model
    scale: int         # expected downsampling factor vs. the input patch


@dataclass(frozen=True)
class ExportSpec:
    model: torch.nn.Module
    layers: tuple[CaptureLayer, ...]
    class_names: list[str]
    out_dir: Path
    patch_size: int = 224
    stride: int = 224  # stride < patch_size gives overlapping test tiling

    def __post_init__(self):
        if self.patch_size < 1 or not 1 <= self.stride <= self.patch_size:
            raise ValueError("need 1 <= stride <= patch_size")
        for cl in self.layers:
            if self.patch_size % cl.scale:
                raise ScaleMismatch(
                    f"layer {cl.name!r}: scale {cl.scale} does not divide "
                    f"patch size {self.patch_size}")


def tile_starts(dim: int, patch: int, stride: int) -> list[int]:
    """Top-left offsets covering ``dim``; the last patch is clamped inward."""
    if dim < patch:
        raise ShapeMismatch(f"image extent {dim} smaller than patch size {patch}")
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] + patch < dim:
        starts.append(dim - patch)
    return starts


def _capture(model: torch.nn.Module, layers: tuple[CaptureLayer, ...],
             patch: torch.Tensor) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    modules = dict(model.named_modules())
    grabbed: dict[str, torch.Tensor] = {}
    handles = []
    try:
        for cl in layers:
            if cl.name not in modules:
                raise HookFailure(f"model has no module named {cl.name!r}")
            handles.append(modules[cl.name].register_forward_hook(
                lambda _m, _inp, out, name=cl.name: grabbed.__setitem__(name, out)))
        with torch.no_grad():
            logits = model(patch)
    finally:
        for h in handles:
            h.remove()
    for cl in layers:
        if cl.name not in grabbed:
            raise HookFailure(f"layer {cl.name!r} never fired during the forward pass")
    return grabbed, logits


def export_patch(spec: ExportSpec, image: np.ndarray, labels: np.ndarray,
                 patch_id: str) -> Scene:
    """One forward pass -> one validated scene (not yet written)."""
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    grabbed, logits = _capture(spec.model.eval(), spec.layers, x)

    layers = []
    for cl in spec.layers:
        act = grabbed[cl.name][0].numpy().astype(np.float32)
        want = spec.patch_size // cl.scale
        if act.shape[1:] != (want, want):
            raise ScaleMismatch(
                f"layer {cl.name!r}: declared scale {cl.scale} expects "
                f"{want}x{want}, model emitted {act.shape[1]}x{act.shape[2]}")
        layers.append(Layer(data=act, scale=cl.scale))

    return Scene(
        layers=layers,
        logits=logits[0].numpy().astype(np.float32),
        labels=np.ascontiguousarray(labels, dtype=np.int32),
        class_names=list(spec.class_names),
        patch_id=patch_id,
    )


def export(spec: ExportSpec, images: list[np.ndarray],
           labels: list[np.ndarray]) -> list[Path]:
    """Tile, run, and write every patch; returns the scene directories."""
    if len(images) != len(labels):
        raise ShapeMismatch("images and labels lists differ in length")
    out = Path(spec.out_dir)
    written = []
    manifest_patches = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        if img.ndim != 3 or lab.shape != img.shape[1:]:
            raise ShapeMismatch(
                f"image {i}: expected C x H x W with aligned H x W labels, "
                f"got {img.shape} vs {lab.shape}")
        h, w = lab.shape
        p, s = spec.patch_size, spec.stride
        for r in tile_starts(h, p, s):
            for c in tile_starts(w, p, s):
                patch_id = f"img{i:03d}_r{r:05d}_c{c:05d}"
                scene = export_patch(spec, img[:, r:r + p, c:c + p],
                                     lab[r:r + p, c:c + p], patch_id)
                sdir = out / patch_id
                write_scene(sdir, scene)
                written.append(sdir)
                manifest_patches.append({"patch_id": patch_id, "image": i,
                                         "row": r, "col": c})
    # record the tiling so downstream stitching can average overlapped logits
    manifest = {
        "patch_size": spec.patch_size,
        "stride": spec.stride,
        "layers": [{"name": cl.name, "scale": cl.scale} for cl in spec.layers],
        "patches": manifest_patches,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "export.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return written


# --- script entry point: JSON spec in, scene directories out ---

def _load_spec(cfg: dict) -> tuple[ExportSpec, list[np.ndarray], list[np.ndarray]]:
    model, class_names = build_model(cfg["model"])
    layers = tuple(CaptureLayer(name=e["name"], scale=int(e["scale"]))
                   for e in cfg["layers"])
    spec = ExportSpec(model=model, layers=layers, class_names=class_names,
                      out_dir=Path(cfg["out"]),
                      patch_size=int(cfg.get("patch_size", 224)),
                      stride=int(cfg.get("stride", cfg.get("patch_size", 224))))
    images, labels = [], []
    for entry in cfg["inputs"]:
        images.append(np.load(entry["image"]))
        if "labels" in entry:
            labels.append(np.load(entry["labels"]))
        else:
            h, w = images[-1].shape[1:]
            labels.append(np.full((h, w), IGNORE_LABEL, dtype=np.int32))
    return spec, images, labels


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="openseg-export",
                                 description="Export model activations as scenes")
    ap.add_argument("spec", help="JSON export spec")
    args = ap.parse_args(argv)
    try:
        with open(args.spec) as fh:
            cfg = json.load(fh)
        spec, images, labels = _load_spec(cfg)
        written = export(spec, images, labels)
    except (OSError, KeyError, ValueError, json.JSONDecodeError,
            HookFailure, ScaleMismatch, ShapeMismatch) as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(written)} scenes to {spec.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
