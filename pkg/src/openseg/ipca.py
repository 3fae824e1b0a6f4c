"""Mini-batch incremental PCA.

Absorbs arbitrarily many feature rows in batches via the incremental
SVD update (previous components scaled by their singular values, a mean
correction row, and the centered batch are stacked and re-decomposed),
then finalizes into the same model type as batch PCA.
"""

from __future__ import annotations

import numpy as np

from .errors import BadConfig, DimMismatch, FirstBatchTooSmall, InsufficientSamples
from .pca import PcaModel, _fix_signs


class IncrementalPca:
    """Streaming PCA state for one class.

    Single-writer: ``partial_fit`` calls are sequential by contract.
    Tracks the running total sum of squared deviations so the residual
    noise variance can be estimated without a second pass.
    """

    def __init__(self, n_components: int, n_features: int, class_id: int = -1):
        if n_components < 1 or n_components > n_features:
            raise BadConfig(
                f"need 1 <= n_components <= n_features, got "
                f"{n_components} and {n_features}"
            )
        self.n_components = n_components
        self.n_features = n_features
        self.class_id = class_id
        self.n_seen = 0
        self.mean = np.zeros(n_features)
        self.components = None      # k x D orthonormal
        self.singular_values = None
        self.total_sq_dev = 0.0     # sum of squared deviations from the running mean

    def partial_fit(self, batch: np.ndarray) -> "IncrementalPca":
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise DimMismatch(
                f"batch shape {x.shape} incompatible with {self.n_features} features"
            )
        m = x.shape[0]
        if self.n_seen == 0:
            if m < self.n_components + 1:
                raise FirstBatchTooSmall(
                    f"first batch needs >= {self.n_components + 1} rows, got {m}"
                )
        elif m < 1:
            raise DimMismatch("empty batch")

        batch_mean = x.mean(axis=0)
        centered = x - batch_mean
        n_new = self.n_seen + m
        mean_shift = batch_mean - self.mean

        if self.n_seen == 0:
            stack = centered
        else:
            correction = np.sqrt(self.n_seen * m / n_new) * mean_shift
            stack = np.vstack([
                self.components * self.singular_values[:, None],
                centered,
                correction[None, :],
            ])
        _, s, vt = np.linalg.svd(stack, full_matrices=False)
        k = min(self.n_components, s.size)
        self.components = vt[:k]
        self.singular_values = s[:k]

        self.total_sq_dev += float(np.sum(centered**2))
        self.total_sq_dev += self.n_seen * m / n_new * float(mean_shift @ mean_shift)
        self.mean = self.mean + m / n_new * mean_shift
        self.n_seen = n_new
        return self

    def finalize(self) -> PcaModel:
        """Freeze into a density model; same conventions as batch PCA."""
        if self.n_seen < 2:
            raise InsufficientSamples(f"need >= 2 absorbed rows, got {self.n_seen}")
        n, d = self.n_seen, self.n_features
        eig = self.singular_values**2 / (n - 1)
        k = min(self.n_components, n - 1, d, eig.size)
        kept = eig[:k]
        total_var = self.total_sq_dev / (n - 1)
        noise = (total_var - float(kept.sum())) / (d - k) if k < d else 0.0
        return PcaModel(
            class_id=self.class_id,
            mean=self.mean.copy(),
            components=_fix_signs(self.components[:k]),
            eigenvalues=kept,
            noise_variance=max(noise, 0.0),
            n_fit=n,
        )


def ipca_new(n_comp: int, d: int, class_id: int = -1) -> IncrementalPca:
    return IncrementalPca(n_comp, d, class_id)


def ipca_partial_fit(state: IncrementalPca, batch: np.ndarray) -> IncrementalPca:
    return state.partial_fit(batch)


def ipca_finalize(state: IncrementalPca) -> PcaModel:
    return state.finalize()
