"""Per-class PCA density models over fused features.

Fits one PCA per class on the fused features of correctly classified
pixels and scores pixels by the multivariate gaussian log-likelihood
implied by the retained components plus an isotropic residual
(Tipping-Bishop probabilistic PCA covariance).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateData,
    DimMismatch,
    InsufficientSamples,
    ModelMissing,
    SingularModel,
)
from .fusion import FeatureField, SampleMatrix
from . import tensor_store

EIG_FLOOR_REL = 1e-9
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PcaModel:
    """Low-rank gaussian density for one class."""

    class_id: int
    mean: np.ndarray          # D
    components: np.ndarray    # n_comp x D, orthonormal rows
    eigenvalues: np.ndarray   # n_comp, descending
    noise_variance: float     # mean of the discarded eigenvalues
    n_fit: int

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def n_features(self) -> int:
        return self.components.shape[1]


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: largest-magnitude entry positive."""
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit_pca(samples: SampleMatrix | np.ndarray, n_comp: int,
            class_id: int | None = None) -> PcaModel:
    """Batch PCA via SVD of the centered sample matrix (divisor N - 1)."""
    if isinstance(samples, SampleMatrix):
        rows, cid = samples.rows, samples.class_id
    else:
        rows, cid = np.asarray(samples, dtype=np.float64), class_id if class_id is not None else -1
    n, d = rows.shape
    if n < 2:
        raise InsufficientSamples(f"PCA needs at least 2 rows, got {n}")
    if n_comp < 1:
        raise DimMismatch(f"n_comp must be >= 1, got {n_comp}")

    mean = rows.mean(axis=0)
    centered = rows - mean
    total_var = float(np.sum(centered**2)) / (n - 1)
    if total_var <= 0.0:
        raise DegenerateData("all rows identical; zero covariance")

    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    eig = s**2 / (n - 1)
    k = min(n_comp, n - 1, d)
    kept = eig[:k]
    noise = (total_var - float(kept.sum())) / (d - k) if k < d else 0.0
    return PcaModel(
        class_id=cid,
        mean=mean,
        components=_fix_signs(vt[:k]),
        eigenvalues=kept,
        noise_variance=max(noise, 0.0),
        n_fit=n,
    )


def project(model: PcaModel, a: np.ndarray) -> np.ndarray:
    """Coordinates of ``a`` (D or N x D) in the retained component basis."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != model.n_features:
        raise DimMismatch(
            f"vector of dim {a.shape[-1]} vs model of dim {model.n_features}"
        )
    return (a - model.mean) @ model.components.T


def _regularized(model: PcaModel) -> tuple[np.ndarray, float]:
    floor = EIG_FLOOR_REL * float(model.eigenvalues[0]) if model.eigenvalues.size else 0.0
    eig = np.maximum(model.eigenvalues, floor)
    noise = max(model.noise_variance, floor)
    if np.any(eig <= 0.0) or (model.n_components < model.n_features and noise <= 0.0):
        raise SingularModel("covariance not positive definite after regularization")
    return eig, noise


def ppca_loglik(model: PcaModel, a: np.ndarray) -> float:
    """Gaussian log-density of a single feature vector under the model."""
    return float(loglik_rows(model, np.asarray(a, dtype=np.float64)[None, :])[0])


def loglik_rows(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """Log-densities for rows of ``x`` (N x D) in O(D * n_comp) per row.

    The model covariance is sum_i (lambda_i - s2) v_i v_i^T + s2 I; its
    determinant and the Mahalanobis form decompose along the retained
    components plus the isotropic residual.
    """
    eig, noise = _regularized(model)
    d, k = model.n_features, model.n_components
    centered = np.asarray(x, dtype=np.float64) - model.mean
    z = centered @ model.components.T
    comp_quad = np.einsum("nk,k->n", z**2, 1.0 / eig)
    logdet = float(np.sum(np.log(eig)))
    if k < d:
        resid = np.maximum(np.einsum("nd,nd->n", centered, centered)
                           - np.einsum("nk,nk->n", z, z), 0.0)
        quad = comp_quad + resid / noise
        logdet += (d - k) * float(np.log(noise))
    else:
        quad = comp_quad
    return -0.5 * (d * LOG_2PI + logdet + quad)


def dense_covariance(model: PcaModel) -> np.ndarray:
    """Explicit D x D covariance; for verification and small-D use only."""
    eig, noise = _regularized(model)
    v = model.components
    return (v.T * (eig - noise)) @ v + noise * np.eye(model.n_features)


def score_openpcs(
    field: FeatureField,
    prior: np.ndarray,
    models: dict[int, PcaModel | None],
    strict: bool = False,
) -> tuple[np.ndarray, list[int]]:
    """Per-pixel log-likelihood under the model of the pixel's prior class.

    Classes with a missing or rejected model score -inf; the list of such
    classes present in the prior map is returned alongside. With
    ``strict`` a missing model raises instead.
    """
    d, h, w = field.data.shape
    if prior.shape != (h, w):
        raise DimMismatch("prior prediction dims do not match the feature field")
    flat = field.data.reshape(d, h * w).T
    prior_flat = prior.ravel()
    score = np.full(h * w, -np.inf)
    unscored: list[int] = []
    for c in np.unique(prior_flat):
        sel = prior_flat == c
        model = models.get(int(c))
        if model is None:
            if strict:
                raise ModelMissing(f"no PCA model for class {int(c)}")
            unscored.append(int(c))
            continue
        score[sel] = loglik_rows(model, flat[sel])
    return score.reshape(h, w), unscored


def save_models(directory, models: dict[int, PcaModel | None]) -> None:
    """Store models as NPY tensors plus a JSON header per class."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"classes": {}}
    for c, m in sorted(models.items()):
        if m is None:
            header["classes"][str(c)] = None
            continue
        prefix = f"class_{c}"
        tensor_store.write_tensor(directory / f"{prefix}_mean.npy",
                                  m.mean.astype(np.float32))
        tensor_store.write_tensor(directory / f"{prefix}_components.npy",
                                  m.components.astype(np.float32))
        tensor_store.write_tensor(directory / f"{prefix}_eigenvalues.npy",
                                  m.eigenvalues.astype(np.float32))
        header["classes"][str(c)] = {
            "prefix": prefix,
            "noise_variance": m.noise_variance,
            "n_fit": m.n_fit,
        }
    with open(directory / "pca_models.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)


def load_models(directory) -> dict[int, PcaModel | None]:
    directory = Path(directory)
    with open(directory / "pca_models.json") as fh:
        header = json.load(fh)
    models: dict[int, PcaModel | None] = {}
    for key, entry in header["classes"].items():
        c = int(key)
        if entry is None:
            models[c] = None
            continue
        prefix = entry["prefix"]
        models[c] = PcaModel(
            class_id=c,
            mean=tensor_store.read_tensor(directory / f"{prefix}_mean.npy").astype(np.float64),
            components=tensor_store.read_tensor(
                directory / f"{prefix}_components.npy").astype(np.float64),
            eigenvalues=tensor_store.read_tensor(
                directory / f"{prefix}_eigenvalues.npy").astype(np.float64),
            noise_variance=float(entry["noise_variance"]),
            n_fit=int(entry["n_fit"]),
        )
    return models
