"""Per-class extreme-value meta-recognition over last-layer activations.

Fits one Weibull distribution per class to the tail of the distances
between correctly classified activation vectors and the class mean
activation vector (MAV), then recalibrates per-pixel activations into a
C+1 probability vector with an explicit unknown channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateTail,
    InsufficientSamples,
    ModelMissing,
    NoSamples,
    ZeroVector,
)
from .fusion import SampleMatrix

SHAPE_LO = 0.05
SHAPE_HI = 50.0


@dataclass(frozen=True)
class WeibullModel:
    """Fitted tail model for one class."""

    class_id: int
    mav: np.ndarray
    shape: float
    scale: float
    tail_size: int
    distance_kind: str = "euclidean"
    median_tail_euclid: float = 1.0  # normalizer for the hybrid mix
    degenerate_threshold: float | None = None  # point-mass fallback distance


@dataclass(frozen=True)
class OpenMaxConfig:
    """Knobs for fitting and recalibration."""

    alpha: int | None = None          # None = revise all classes
    tail_size: int = 2000
    distance_kind: str = "euclidean"  # euclidean | cosine | hybrid
    quantile: float = 0.5             # CDF quantile deriving the per-class threshold
    hybrid_weights: tuple[float, float] = (0.5, 0.5)


def compute_mav(samples: SampleMatrix | np.ndarray) -> np.ndarray:
    """Arithmetic mean of the sample rows."""
    rows = samples.rows if isinstance(samples, SampleMatrix) else np.asarray(samples)
    if rows.size == 0 or rows.shape[0] == 0:
        raise NoSamples("cannot average zero rows")
    return rows.mean(axis=0)


def distance(
    a: np.ndarray,
    mav: np.ndarray,
    kind: str = "euclidean",
    median_euclid: float = 1.0,
    weights: tuple[float, float] = (0.5, 0.5),
) -> float:
    """Distance between one activation vector and a MAV."""
    return float(
        distances_to_mav(np.asarray(a, dtype=np.float64)[None, :], mav, kind,
                         median_euclid, weights)[0]
    )


def distances_to_mav(
    x: np.ndarray,
    mav: np.ndarray,
    kind: str = "euclidean",
    median_euclid: float = 1.0,
    weights: tuple[float, float] = (0.5, 0.5),
) -> np.ndarray:
    """Distances from each row of ``x`` (N x D) to ``mav``."""
    x = np.asarray(x, dtype=np.float64)
    mav = np.asarray(mav, dtype=np.float64)
    if x.shape[1] != mav.shape[0]:
        raise ZeroVector(f"dim mismatch: rows of {x.shape[1]} vs mav of {mav.shape[0]}")
    diff = x - mav[None, :]
    euc = np.sqrt(np.einsum("nd,nd->n", diff, diff))
    if kind == "euclidean":
        return euc
    mav_norm = float(np.linalg.norm(mav))
    x_norm = np.linalg.norm(x, axis=1)
    if kind in ("cosine", "hybrid"):
        if mav_norm == 0.0 or np.any(x_norm == 0.0):
            raise ZeroVector("cosine distance undefined for a zero-norm operand")
        cos = 1.0 - (x @ mav) / (x_norm * mav_norm)
        if kind == "cosine":
            return cos
        w_e, w_c = weights
        return w_e * euc / median_euclid + w_c * cos
    raise ZeroVector(f"unknown distance kind {kind!r}")


def _profile_score(k: float, x: np.ndarray, logx: np.ndarray, mean_logx: float):
    """Profile log-likelihood derivative in the shape parameter and its slope."""
    xk = x**k
    a = np.sum(xk * logx)
    b = np.sum(xk)
    a2 = np.sum(xk * logx * logx)
    g = a / b - 1.0 / k - mean_logx
    gp = (a2 * b - a * a) / (b * b) + 1.0 / (k * k)
    return g, gp


def fit_weibull_tail(distances: np.ndarray, tail_size: int) -> tuple[float, float]:
    """Two-parameter Weibull MLE on the largest ``tail_size`` distances.

    Solves the profile-likelihood equation for the shape by bisection
    plus Newton polish (shape in [0.05, 50], |step| < 1e-9), then sets
    scale = (mean of x^shape)^(1/shape).
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    if tail_size < 3:
        raise InsufficientSamples(f"tail_size must be >= 3, got {tail_size}")
    if d.size < tail_size:
        raise InsufficientSamples(f"{d.size} distances for tail_size {tail_size}")
    tail = np.sort(d)[-tail_size:]
    if tail[-1] <= 0.0 or tail[-1] == tail[0]:
        raise DegenerateTail("all tail values equal; no Weibull MLE exists")

    # scale-invariance of the shape MLE lets us normalize for stability
    xmax = tail[-1]
    x = tail / xmax
    x = x[x > 0.0]
    if x.size < 3 or np.ptp(x) == 0.0:
        raise DegenerateTail("tail collapses to a point after removing zeros")
    logx = np.log(x)
    mean_logx = float(logx.mean())

    lo, hi = SHAPE_LO, SHAPE_HI
    g_lo, _ = _profile_score(lo, x, logx, mean_logx)
    g_hi, _ = _profile_score(hi, x, logx, mean_logx)
    if g_lo >= 0.0:
        k = lo
    elif g_hi <= 0.0:
        k = hi
    else:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            g, _ = _profile_score(mid, x, logx, mean_logx)
            if g < 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-6:
                break
        k = 0.5 * (lo + hi)
        for _ in range(50):
            g, gp = _profile_score(k, x, logx, mean_logx)
            step = g / gp
            k_new = min(max(k - step, SHAPE_LO), SHAPE_HI)
            if abs(k_new - k) < 1e-9:
                k = k_new
                break
            k = k_new

    scale = xmax * float(np.mean(x**k)) ** (1.0 / k)
    return float(k), scale


def weibull_cdf(shape: float, scale: float, x) -> np.ndarray | float:
    """CDF 1 - exp(-(x / scale)^shape), clamped to x >= 0."""
    xv = np.clip(np.asarray(x, dtype=np.float64), 0.0, None)
    out = 1.0 - np.exp(-((xv / scale) ** shape))
    return float(out) if np.isscalar(x) else out


def fit_class_model(samples: SampleMatrix, cfg: OpenMaxConfig) -> WeibullModel:
    """MAV plus tail Weibull for one class from its sample matrix."""
    mav = compute_mav(samples)
    euc = distances_to_mav(samples.rows, mav, "euclidean")
    tail_size = min(cfg.tail_size, euc.size)
    median_tail = float(np.median(np.sort(euc)[-tail_size:])) or 1.0
    dists = distances_to_mav(samples.rows, mav, cfg.distance_kind,
                             median_tail, cfg.hybrid_weights)
    try:
        shape, scale = fit_weibull_tail(dists, min(tail_size, dists.size))
        degenerate = None
    except DegenerateTail:
        # point-mass fallback: threshold at the common tail value
        shape, scale = 1.0, max(float(np.max(dists)), np.finfo(float).tiny)
        degenerate = float(np.max(dists))
    return WeibullModel(
        class_id=samples.class_id,
        mav=mav,
        shape=shape,
        scale=scale,
        tail_size=tail_size,
        distance_kind=cfg.distance_kind,
        median_tail_euclid=median_tail,
        degenerate_threshold=degenerate,
    )


def _check_models(models: dict[int, WeibullModel], n_classes: int) -> list[WeibullModel]:
    out = []
    for c in range(n_classes):
        if c not in models or models[c] is None:
            raise ModelMissing(f"no fitted tail model for class {c}")
        out.append(models[c])
    return out


def _rejection_weights(a: np.ndarray, models: list[WeibullModel],
                       cfg: OpenMaxConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-class CDF rejection weights with top-alpha rank scaling.

    ``a`` is C x N. Returns (w, cdf) both C x N; w already includes the
    rank factor and is zero outside the top-alpha classes.
    """
    c, n = a.shape
    alpha = c if cfg.alpha is None else min(cfg.alpha, c)
    cdf = np.empty((c, n))
    for ci, m in enumerate(models):
        d = distances_to_mav(a.T, m.mav, m.distance_kind, m.median_tail_euclid,
                             cfg.hybrid_weights)
        if m.degenerate_threshold is not None:
            cdf[ci] = (d > m.degenerate_threshold).astype(np.float64)
        else:
            cdf[ci] = weibull_cdf(m.shape, m.scale, d)
    order = np.argsort(-a, axis=0, kind="stable")
    pos = np.empty_like(order)
    np.put_along_axis(pos, order, np.arange(c)[:, None], axis=0)
    rank_factor = np.where(pos < alpha, (alpha - pos) / alpha, 0.0)
    return cdf * rank_factor, cdf


def _softmax_with_unknown(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Softmax over revised activations plus the aggregated unknown channel.

    Pixels with zero rejection weight everywhere degrade exactly to the
    closed-set softmax with unknown probability 0.
    """
    revised = np.vstack([a * (1.0 - w), np.sum(a * w, axis=0, keepdims=True)])
    revised = revised - revised.max(axis=0, keepdims=True)
    e = np.exp(revised)
    probs = e / e.sum(axis=0, keepdims=True)

    untouched = w.max(axis=0) == 0.0
    if np.any(untouched):
        z = a[:, untouched]
        z = z - z.max(axis=0, keepdims=True)
        ez = np.exp(z)
        probs[:-1, untouched] = ez / ez.sum(axis=0, keepdims=True)
        probs[-1, untouched] = 0.0
    return probs


def recalibrate_map(a: np.ndarray, models: dict[int, WeibullModel],
                    cfg: OpenMaxConfig) -> np.ndarray:
    """Recalibrated (C+1) x N probabilities for activation columns ``a`` (C x N)."""
    a = np.asarray(a, dtype=np.float64)
    c, n = a.shape
    mods = _check_models(models, c)
    w, _ = _rejection_weights(a, mods, cfg)
    return _softmax_with_unknown(a, w)


def openmax_recalibrate(activation: np.ndarray, models: dict[int, WeibullModel],
                        cfg: OpenMaxConfig) -> np.ndarray:
    """Recalibrated C+1 probability vector for a single activation vector."""
    return recalibrate_map(np.asarray(activation, dtype=np.float64)[:, None],
                           models, cfg)[:, 0]


def score_openfcn(
    logits: np.ndarray,
    models: dict[int, WeibullModel],
    cfg: OpenMaxConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score a C x H x W logit map.

    Returns (score H x W, prior H x W, posterior H x W). The score is
    1 - recalibrated unknown probability (higher = more known). The
    posterior keeps the prior class where the tail CDF of the distance
    to its MAV stays at or below the configured quantile, else flags
    unknown (sentinel = C).
    """
    c, h, w_ = logits.shape
    a = np.asarray(logits, dtype=np.float64).reshape(c, h * w_)
    mods = _check_models(models, c)
    weights, cdf = _rejection_weights(a, mods, cfg)
    probs = _softmax_with_unknown(a, weights)
    score = (1.0 - probs[-1]).reshape(h, w_)

    prior = np.argmax(a, axis=0)
    cdf_at_prior = np.take_along_axis(cdf, prior[None, :], axis=0)[0]
    posterior = np.where(cdf_at_prior > cfg.quantile, c, prior).astype(np.int32)
    return score, prior.reshape(h, w_).astype(np.int32), posterior.reshape(h, w_)


def save_models(path, models: dict[int, WeibullModel], cfg: OpenMaxConfig) -> None:
    payload = {
        "config": {
            "alpha": cfg.alpha,
            "tail_size": cfg.tail_size,
            "distance_kind": cfg.distance_kind,
            "quantile": cfg.quantile,
            "hybrid_weights": list(cfg.hybrid_weights),
        },
        "models": {
            str(c): {
                "class_id": m.class_id,
                "mav": np.asarray(m.mav, dtype=np.float64).tolist(),
                "shape": m.shape,
                "scale": m.scale,
                "tail_size": m.tail_size,
                "distance_kind": m.distance_kind,
                "median_tail_euclid": m.median_tail_euclid,
                "degenerate_threshold": m.degenerate_threshold,
            }
            for c, m in models.items()
            if m is not None
        },
        "unscoreable": sorted(c for c, m in models.items() if m is None),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_models(path) -> tuple[dict[int, WeibullModel | None], OpenMaxConfig]:
    with open(path) as fh:
        payload = json.load(fh)
    c = payload["config"]
    cfg = OpenMaxConfig(
        alpha=c["alpha"],
        tail_size=c["tail_size"],
        distance_kind=c["distance_kind"],
        quantile=c["quantile"],
        hybrid_weights=tuple(c["hybrid_weights"]),
    )
    models: dict[int, WeibullModel | None] = {}
    for key, m in payload["models"].items():
        models[int(key)] = WeibullModel(
            class_id=m["class_id"],
            mav=np.asarray(m["mav"], dtype=np.float64),
            shape=m["shape"],
            scale=m["scale"],
            tail_size=m["tail_size"],
            distance_kind=m["distance_kind"],
            median_tail_euclid=m["median_tail_euclid"],
            degenerate_threshold=m["degenerate_threshold"],
        )
    for c_id in payload.get("unscoreable", []):
        models[int(c_id)] = None
    return models, cfg
