from .export import (
    CaptureLayer,
    ExportSpec,
    HookFailure,
    export,
    export_patch,
    tile_starts,
)
from .models import ToySegNet, build_model, toy_model

__all__ = [
    "CaptureLayer",
    "ExportSpec",
    "HookFailure",
    "ToySegNet",
    "build_model",
    "export",
    "export_patch",
    "tile_starts",
    "toy_model",
]

__version__ = "0.1.0"
