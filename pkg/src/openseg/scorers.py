"""Estimator-style scorers binding fitting and per-scene scoring.

Each scorer follows the fit/score convention: ``fit`` consumes a list
of scenes (optionally with overridden logits and training labels, as
the leave-one-class-out protocol requires), ``score_scene`` turns one
scene into a knownness score map plus the prior prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import openmax as om
from . import pca as pd_
from .errors import (
    DegenerateData,
    InsufficientSamples,
    ModelMissing,
    NoSamples,
)
from .fusion import (
    FeatureField,
    LayerSpec,
    SampleMatrix,
    default_spec,
    fuse,
    gather_class_samples,
)
from .ipca import IncrementalPca
from .softmax import score_softmax
from .tensor_store import Scene


@dataclass(frozen=True)
class ScoreResult:
    """Output of scoring one scene."""

    score: np.ndarray                 # H x W, higher = more known
    prior: np.ndarray                 # H x W int32 closed-set prediction
    posterior: np.ndarray | None = None   # H x W int32 with unknown sentinel
    unscored_classes: list[int] = field(default_factory=list)


def _logits_of(scene: Scene, logits: np.ndarray | None) -> np.ndarray:
    return scene.logits if logits is None else logits


def _labels_of(scene: Scene, labels: np.ndarray | None) -> np.ndarray:
    return scene.labels if labels is None else labels


def _collect_rows(
    fields: list[FeatureField],
    priors: list[np.ndarray],
    truths: list[np.ndarray],
    class_id: int,
    cap: int,
    seed: int,
) -> np.ndarray | None:
    """Qualifying feature rows for one class pooled over scenes, capped."""
    parts = []
    for i, (fld, pri, tru) in enumerate(zip(fields, priors, truths)):
        try:
            sm = gather_class_samples(fld, pri, tru, class_id, cap=cap,
                                      seed=seed + 31 * i + class_id)
            parts.append(sm.rows)
        except NoSamples:
            continue
    if not parts:
        return None
    rows = np.concatenate(parts, axis=0)
    if rows.shape[0] > cap:
        rng = np.random.default_rng(seed + class_id)
        rows = rows[np.sort(rng.choice(rows.shape[0], cap, replace=False))]
    return rows


class SoftmaxScorer(BaseEstimator):
    """Maximum softmax probability; stateless."""

    def fit(self, scenes=None, y=None, **kwargs):
        return self

    def score_scene(self, scene: Scene, logits: np.ndarray | None = None) -> ScoreResult:
        score, prior = score_softmax(_logits_of(scene, logits))
        return ScoreResult(score=score, prior=prior)


class OpenFCNScorer(BaseEstimator):
    """Per-class Weibull tail models over last-layer activations."""

    def __init__(self, tail_size: int = 2000, distance_kind: str = "euclidean",
                 alpha: int | None = None, quantile: float = 0.5,
                 cap: int = 200_000, seed: int = 0):
        self.tail_size = tail_size
        self.distance_kind = distance_kind
        self.alpha = alpha
        self.quantile = quantile
        self.cap = cap
        self.seed = seed

    @property
    def config(self) -> om.OpenMaxConfig:
        return om.OpenMaxConfig(alpha=self.alpha, tail_size=self.tail_size,
                                distance_kind=self.distance_kind,
                                quantile=self.quantile)

    def fit(self, scenes: list[Scene], train_labels=None, logits_list=None):
        logit_maps = [_logits_of(s, None if logits_list is None else logits_list[i])
                      for i, s in enumerate(scenes)]
        truths = [_labels_of(s, None if train_labels is None else train_labels[i])
                  for i, s in enumerate(scenes)]
        fields = [FeatureField(data=np.asarray(lm, dtype=np.float64)) for lm in logit_maps]
        priors = [np.argmax(lm, axis=0).astype(np.int32) for lm in logit_maps]
        n_classes = logit_maps[0].shape[0]

        self.models_: dict[int, om.WeibullModel | None] = {}
        for c in range(n_classes):
            rows = _collect_rows(fields, priors, truths, c, self.cap, self.seed)
            if rows is None or rows.shape[0] < 3:
                self.models_[c] = None
                continue
            sm = SampleMatrix(rows=rows, class_id=c,
                              coords=np.zeros((rows.shape[0], 2), dtype=np.int64))
            self.models_[c] = om.fit_class_model(sm, self.config)
        return self

    def score_scene(self, scene: Scene, logits: np.ndarray | None = None) -> ScoreResult:
        if not hasattr(self, "models_"):
            raise ModelMissing("scorer is not fitted")
        score, prior, posterior = om.score_openfcn(
            np.asarray(_logits_of(scene, logits), dtype=np.float64),
            self.models_, self.config,
        )
        return ScoreResult(score=score, prior=prior, posterior=posterior)


class _PcaScorerBase(BaseEstimator):
    """Shared scoring path: likelihood of each pixel under its prior class model."""

    layer_spec: list[LayerSpec] | None

    def _spec(self, scene: Scene) -> list[LayerSpec]:
        return self.layer_spec if self.layer_spec else default_spec(scene)

    def score_scene(self, scene: Scene, logits: np.ndarray | None = None) -> ScoreResult:
        if not hasattr(self, "models_"):
            raise ModelMissing("scorer is not fitted")
        field_ = fuse(scene, self._spec(scene))
        prior = np.argmax(_logits_of(scene, logits), axis=0).astype(np.int32)
        score, unscored = pd_.score_openpcs(field_, prior, self.models_)
        return ScoreResult(score=score, prior=prior, unscored_classes=unscored)


class OpenPCSScorer(_PcaScorerBase):
    """Batch PCA density models on fused multi-layer features."""

    def __init__(self, layer_spec: list[LayerSpec] | None = None,
                 n_components: int = 16, cap: int = 200_000, seed: int = 0):
        self.layer_spec = layer_spec
        self.n_components = n_components
        self.cap = cap
        self.seed = seed

    def fit(self, scenes: list[Scene], train_labels=None, logits_list=None):
        fields = [fuse(s, self._spec(s)) for s in scenes]
        logit_maps = [_logits_of(s, None if logits_list is None else logits_list[i])
                      for i, s in enumerate(scenes)]
        priors = [np.argmax(lm, axis=0).astype(np.int32) for lm in logit_maps]
        truths = [_labels_of(s, None if train_labels is None else train_labels[i])
                  for i, s in enumerate(scenes)]
        n_classes = logit_maps[0].shape[0]

        self.models_: dict[int, pd_.PcaModel | None] = {}
        for c in range(n_classes):
            rows = _collect_rows(fields, priors, truths, c, self.cap, self.seed)
            if rows is None:
                self.models_[c] = None
                continue
            try:
                self.models_[c] = pd_.fit_pca(rows, self.n_components, class_id=c)
            except (InsufficientSamples, DegenerateData):
                self.models_[c] = None
        return self


class OpenIPCSScorer(_PcaScorerBase):
    """Incremental PCA variant: absorbs each scene's pixels as mini-batches."""

    def __init__(self, layer_spec: list[LayerSpec] | None = None,
                 n_components: int = 16, batch_rows: int = 65_536,
                 cap: int = 200_000, seed: int = 0):
        self.layer_spec = layer_spec
        self.n_components = n_components
        self.batch_rows = batch_rows
        self.cap = cap
        self.seed = seed

    def fit(self, scenes: list[Scene], train_labels=None, logits_list=None):
        states: dict[int, IncrementalPca] = {}
        buffers: dict[int, list[np.ndarray]] = {}
        n_classes = None
        for i, scene in enumerate(scenes):
            field_ = fuse(scene, self._spec(scene))
            lm = _logits_of(scene, None if logits_list is None else logits_list[i])
            prior = np.argmax(lm, axis=0).astype(np.int32)
            truth = _labels_of(scene, None if train_labels is None else train_labels[i])
            n_classes = lm.shape[0]
            for c in range(n_classes):
                try:
                    sm = gather_class_samples(field_, prior, truth, c, cap=self.cap,
                                              seed=self.seed + 31 * i + c)
                except NoSamples:
                    continue
                self._absorb(states, buffers, c, sm.rows, field_.n_features)
        # flush rows still buffered below the first-batch minimum
        for c, parts in buffers.items():
            if parts and c in states and states[c].n_seen > 0:
                states[c].partial_fit(np.concatenate(parts, axis=0))

        self.models_ = {}
        for c in range(n_classes or 0):
            state = states.get(c)
            if state is None or state.n_seen < 2:
                self.models_[c] = None
                continue
            try:
                self.models_[c] = state.finalize()
            except InsufficientSamples:
                self.models_[c] = None
        return self

    def _absorb(self, states, buffers, c, rows, d):
        if c not in states:
            states[c] = IncrementalPca(self.n_components, d, class_id=c)
            buffers[c] = []
        state = states[c]
        pending = buffers[c]
        pending.append(rows)
        stacked = np.concatenate(pending, axis=0) if len(pending) > 1 else pending[0]
        if state.n_seen == 0 and stacked.shape[0] < self.n_components + 1:
            buffers[c] = [stacked]
            return
        buffers[c] = []
        for start in range(0, stacked.shape[0], self.batch_rows):
            state.partial_fit(stacked[start:start + self.batch_rows])


SCORERS = {
    "softmax": SoftmaxScorer,
    "openfcn": OpenFCNScorer,
    "openpcs": OpenPCSScorer,
    "openipcs": OpenIPCSScorer,
}
