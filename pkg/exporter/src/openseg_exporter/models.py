"""Built-in toy backbone plus loading of user TorchScript models."""

from __future__ import annotations

import torch
from torch import nn


class ToySegNet(nn.Module):
    """Two conv blocks with a stride-2 stage, logits upsampled to input size.

    Small enough to run anywhere, but shaped like a real encoder: the
    first block keeps full resolution (scale 1), the second halves it
    (scale 2), so both make sensible capture targets.
    """

    def __init__(self, in_channels: int = 3, n_classes: int = 4, width: int = 8):
        super().__init__()
        self.block1 = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.ReLU(),
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.head = nn.Conv2d(2 * width, n_classes, 1)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x):
        x = self.block1(x)
        x = self.block2(x)
        return self.up(self.head(x))


def toy_model(in_channels: int = 3, n_classes: int = 4, width: int = 8,
              seed: int = 0) -> ToySegNet:
    torch.manual_seed(seed)
    model = ToySegNet(in_channels, n_classes, width)
    return model.eval()


def build_model(cfg: dict) -> tuple[nn.Module, list[str]]:
    """Instantiate the model a JSON spec refers to."""
    kind = cfg.get("kind", "toy")
    if kind == "toy":
        n = int(cfg.get("classes", 4))
        model = toy_model(in_channels=int(cfg.get("in_channels", 3)),
                          n_classes=n, width=int(cfg.get("width", 8)),
                          seed=int(cfg.get("seed", 0)))
        names = cfg.get("class_names", [f"class_{i}" for i in range(n)])
        return model, names
    if kind == "torchscript":
        model = torch.jit.load(cfg["path"]).eval()
        return model, list(cfg["class_names"])
    raise ValueError(f"unknown model kind {kind!r}")
