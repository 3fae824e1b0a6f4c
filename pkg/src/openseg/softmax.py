"""Maximum-softmax-probability baseline scorer."""

from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    """Channel-wise softmax over a C x H x W logit map, max-subtracted for stability."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def score_softmax(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel max softmax probability and argmax class.

    Returns (score H x W, prior prediction H x W). Higher score = more
    known. Argmax ties break toward the lowest class index.
    """
    probs = softmax(logits)
    # argmax on raw logits: sub-epsilon logit gaps vanish in the exp
    prior = np.argmax(np.asarray(logits), axis=0).astype(np.int32)
    score = np.take_along_axis(probs, prior[None].astype(np.int64), axis=0)[0]
    return score, prior
