"""Open-set scoring and evaluation toolkit for dense semantic segmentation."""

from .errors import OpensegError
from .fusion import FeatureField, LayerSpec, SampleMatrix, fuse, upsample
from .ipca import IncrementalPca
from .openmax import OpenMaxConfig, WeibullModel, fit_weibull_tail, weibull_cdf
from .pca import PcaModel, fit_pca, ppca_loglik
from .scorers import (
    OpenFCNScorer,
    OpenIPCSScorer,
    OpenPCSScorer,
    ScoreResult,
    SoftmaxScorer,
)
from .softmax import score_softmax, softmax
from .synth import SynthConfig, generate_dataset, generate_scene
from .tensor_store import Layer, Scene, read_scene, read_tensor, write_scene, write_tensor

__version__ = "0.1.0"

__all__ = [
    "OpensegError",
    "FeatureField", "LayerSpec", "SampleMatrix", "fuse", "upsample",
    "IncrementalPca",
    "OpenMaxConfig", "WeibullModel", "fit_weibull_tail", "weibull_cdf",
    "PcaModel", "fit_pca", "ppca_loglik",
    "OpenFCNScorer", "OpenIPCSScorer", "OpenPCSScorer", "ScoreResult", "SoftmaxScorer",
    "score_softmax", "softmax",
    "SynthConfig", "generate_dataset", "generate_scene",
    "Layer", "Scene", "read_scene", "read_tensor", "write_scene", "write_tensor",
]
