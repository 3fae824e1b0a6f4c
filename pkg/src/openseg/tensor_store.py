"""NPY tensor I/O and scene bundles.

A scene directory holds one NPY file per tensor plus a ``scene.json``
manifest naming the activation layers (with their upsampling scales),
logits, labels, and class names. Tensors are stored little-endian,
row-major, as f32 or i32; wider on-disk dtypes are narrowed on read with
an explicit overflow check.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    IoFailure,
    LabelOutOfRange,
    MalformedFile,
    ManifestMissing,
    ShapeMismatch,
    UnsupportedDtype,
)

NPY_MAGIC = b"\x93NUMPY"

_READ_DTYPES = {"<f4", "<f8", "<i4", "<i8"}
_WRITE_DESCR = {np.dtype(np.float32): "<f4", np.dtype(np.int32): "<i4"}

IGNORE_LABEL = -1


def write_tensor(path, arr: np.ndarray) -> None:
    """Write ``arr`` (f32 or i32, any rank) as an NPY v1.0 file."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _WRITE_DESCR:
        raise UnsupportedDtype(f"refusing to write dtype {arr.dtype}; use float32 or int32")
    descr = _WRITE_DESCR[arr.dtype]
    shape = ",".join(str(s) for s in arr.shape)
    if arr.ndim == 1:
        shape += ","
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': ({shape}), }}"
    # pad so that magic + version + length field + header is a multiple of 64
    base = len(NPY_MAGIC) + 2 + 2
    pad = 64 - ((base + len(header) + 1) % 64)
    header = header + " " * pad + "\n"
    try:
        with open(path, "wb") as fh:
            fh.write(NPY_MAGIC)
            fh.write(bytes([1, 0]))
            fh.write(struct.pack("<H", len(header)))
            fh.write(header.encode("latin1"))
            fh.write(arr.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    """Read an NPY v1.0/v2.0 file; returns a float32 or int32 array.

    f64/i64 payloads are narrowed with an overflow check; other dtypes
    are rejected.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(raw) < 10 or raw[:6] != NPY_MAGIC:
        raise MalformedFile(f"{path}: bad NPY magic")
    major, minor = raw[6], raw[7]
    if major == 1:
        (hlen,) = struct.unpack_from("<H", raw, 8)
        data_off = 10 + hlen
        header_bytes = raw[10:data_off]
    elif major == 2:
        if len(raw) < 12:
            raise MalformedFile(f"{path}: truncated v2 header")
        (hlen,) = struct.unpack_from("<I", raw, 8)
        data_off = 12 + hlen
        header_bytes = raw[12:data_off]
    else:
        raise MalformedFile(f"{path}: unsupported NPY version {major}.{minor}")
    if len(header_bytes) != hlen:
        raise MalformedFile(f"{path}: truncated header")

    try:
        header = ast.literal_eval(header_bytes.decode("latin1"))
        descr = header["descr"]
        fortran = header["fortran_order"]
        shape = tuple(header["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError) as exc:
        raise MalformedFile(f"{path}: unparseable header") from exc

    if descr not in _READ_DTYPES:
        raise UnsupportedDtype(f"{path}: dtype {descr!r} not supported")
    if fortran:
        raise MalformedFile(f"{path}: fortran_order arrays not supported")
    if any((not isinstance(s, int)) or s < 0 for s in shape):
        raise MalformedFile(f"{path}: bad shape {shape}")

    dtype = np.dtype(descr)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = raw[data_off:]
    if len(payload) != count * dtype.itemsize:
        raise MalformedFile(
            f"{path}: payload is {len(payload)} bytes, expected {count * dtype.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return _narrow(arr, path)


def _narrow(arr: np.ndarray, path) -> np.ndarray:
    if arr.dtype == np.float32 or arr.dtype == np.int32:
        return arr.copy()
    if arr.dtype == np.float64:
        finite = np.isfinite(arr)
        if np.any(finite & (np.abs(arr) > np.finfo(np.float32).max)):
            raise UnsupportedDtype(f"{path}: f64 values overflow f32")
        return arr.astype(np.float32)
    if arr.dtype == np.int64:
        info = np.iinfo(np.int32)
        if np.any((arr < info.min) | (arr > info.max)):
            raise UnsupportedDtype(f"{path}: i64 values overflow i32")
        return arr.astype(np.int32)
    raise UnsupportedDtype(f"{path}: dtype {arr.dtype} not supported")


@dataclass(frozen=True)
class Layer:
    """One activation tensor (C x h x w) with its scale relative to the output map."""

    data: np.ndarray
    scale: int


@dataclass(frozen=True)
class Scene:
    """One patch's activations, logits, labels and metadata.

    Immutable after construction; safe to share across threads.
    """

    layers: list[Layer]
    logits: np.ndarray        # C_kkc x H x W, float32
    labels: np.ndarray        # H x W, int32; -1 = ignore
    class_names: list[str]
    patch_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape[1], self.logits.shape[2]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[0]


def validate_scene(scene: Scene) -> Scene:
    """Check every scene invariant; raises on the first violation."""
    if scene.logits.ndim != 3:
        raise ShapeMismatch(f"logits must be C x H x W, got shape {scene.logits.shape}")
    if scene.labels.ndim != 2:
        raise ShapeMismatch(f"labels must be H x W, got shape {scene.labels.shape}")
    h, w = scene.shape
    if scene.labels.shape != (h, w):
        raise ShapeMismatch(
            f"labels shape {scene.labels.shape} != logits spatial dims {(h, w)}"
        )
    for i, layer in enumerate(scene.layers):
        if layer.data.ndim != 3:
            raise ShapeMismatch(f"layer {i} must be C x h x w, got {layer.data.shape}")
        lh, lw = layer.data.shape[1], layer.data.shape[2]
        if (lh * layer.scale, lw * layer.scale) != (h, w):
            raise ShapeMismatch(
                f"layer {i}: dims {(lh, lw)} at scale {layer.scale} "
                f"do not reach output dims {(h, w)}"
            )
    n = scene.n_classes
    lab = scene.labels
    bad = lab[(lab < IGNORE_LABEL) | (lab >= n)]
    if bad.size:
        raise LabelOutOfRange(f"label value {int(bad[0])} outside [-1, {n - 1}]")
    if len(scene.class_names) != n:
        raise ShapeMismatch(
            f"{len(scene.class_names)} class names for {n} logit channels"
        )
    return scene


def write_scene(directory, scene: Scene) -> None:
    """Write a validated scene as NPY tensors plus ``scene.json``."""
    validate_scene(scene)
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {directory}: {exc}") from exc
    manifest = {"layers": [], "logits": "logits.npy", "labels": "labels.npy",
                "classes": list(scene.class_names), "patch_id": scene.patch_id}
    for i, layer in enumerate(scene.layers):
        name = f"layer_{i}.npy"
        write_tensor(directory / name, layer.data.astype(np.float32))
        manifest["layers"].append({"file": name, "scale": int(layer.scale)})
    write_tensor(directory / "logits.npy", scene.logits.astype(np.float32))
    write_tensor(directory / "labels.npy", scene.labels.astype(np.int32))
    try:
        with open(directory / "scene.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise IoFailure(f"cannot write manifest in {directory}: {exc}") from exc


def read_scene(directory) -> Scene:
    """Read and validate a scene directory written by :func:`write_scene`."""
    directory = Path(directory)
    manifest_path = directory / "scene.json"
    if not manifest_path.is_file():
        raise ManifestMissing(f"no scene.json in {directory}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestMissing(f"unreadable manifest {manifest_path}: {exc}") from exc

    layers = [
        Layer(data=read_tensor(directory / entry["file"]), scale=int(entry["scale"]))
        for entry in manifest.get("layers", [])
    ]
    scene = Scene(
        layers=layers,
        logits=read_tensor(directory / manifest["logits"]),
        labels=read_tensor(directory / manifest["labels"]),
        class_names=list(manifest["classes"]),
        patch_id=str(manifest.get("patch_id", directory.name)),
    )
    return validate_scene(scene)
