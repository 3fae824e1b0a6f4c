"""Exception types raised across the toolkit.

Every malformed input maps to one of these; callers can catch
``OpensegError`` to handle any toolkit failure uniformly.
"""


class OpensegError(Exception):
    """Base class for all toolkit errors."""


# --- tensor_store ---

class MalformedFile(OpensegError):
    """File is not a well-formed NPY array."""


class UnsupportedDtype(OpensegError):
    """Array dtype outside f32/f64/i32/i64, or narrowing would overflow."""


class IoFailure(OpensegError):
    """Underlying I/O operation failed."""


class ManifestMissing(OpensegError):
    """Scene directory has no manifest."""


class ShapeMismatch(OpensegError):
    """Tensor dimensions violate a scene invariant."""


class LabelOutOfRange(OpensegError):
    """Label value outside the declared class set."""


# --- fusion ---

class ScaleMismatch(OpensegError):
    """Upsampled layer does not reach the output resolution."""


class NoSamples(OpensegError):
    """No qualifying pixels for a class."""


# --- openmax_evt ---

class ZeroVector(OpensegError):
    """Cosine distance with a zero-norm operand."""


class DegenerateTail(OpensegError):
    """All tail values equal; Weibull MLE undefined."""


class InsufficientSamples(OpensegError):
    """Fewer samples than the operation requires."""


class ModelMissing(OpensegError):
    """No fitted model for a class that needs scoring."""


# --- pca_density / ipca ---

class DegenerateData(OpensegError):
    """Zero covariance; PCA model rejected."""


class SingularModel(OpensegError):
    """Model covariance not positive definite after regularization."""


class BadConfig(OpensegError):
    """Invalid configuration values."""


class FirstBatchTooSmall(OpensegError):
    """First incremental batch smaller than n_components + 1."""


class DimMismatch(OpensegError):
    """Operand dimensions do not agree."""


# --- eval_harness ---

class BadClass(OpensegError):
    """Class id outside the known class range."""


class NoUnknowns(OpensegError):
    """Calibration requires at least one unknown pixel."""


class SingleClassMask(OpensegError):
    """ROC needs both known and unknown pixels."""


class EmptyMatrix(OpensegError):
    """Confusion matrix has zero total count."""


# --- cli ---

class ConfigError(OpensegError):
    """Invalid CLI configuration."""


class MissingArtifact(OpensegError):
    """A required artifact from an earlier stage is absent."""
