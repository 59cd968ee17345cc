"""
Exception hierarchy for unlearnlab.

Every module raises subclasses of its own family so that orchestration code
(harness, CLI) can decide per family whether a failure is a configuration
problem, a numerical problem or an I/O problem.
"""


class LabError(Exception):
    """Base class for all errors raised by unlearnlab."""


class ConfigInvalid(LabError):
    """Configuration is malformed or violates a documented range."""


# --- linalg ---------------------------------------------------------------

class LinalgError(LabError):
    pass


class NonSquare(LinalgError):
    pass


class NonSymmetric(LinalgError):
    pass


class NonFinite(LinalgError):
    pass


class NoConvergence(LinalgError):
    pass


class AllZero(LinalgError):
    pass


class InvalidSpectrum(LinalgError):
    """Eigenvalue vector contains entries below the clamping tolerance."""


class KOutOfRange(LinalgError):
    pass


# --- nnet -----------------------------------------------------------------

class NnetError(LabError):
    pass


class ShapeMismatch(NnetError):
    pass


class LabelOutOfRange(NnetError):
    pass


class SupportViolation(NnetError):
    pass


class NotNormalized(NnetError):
    pass


class NonScalarLoss(NnetError):
    pass


class CheckpointIo(NnetError):
    pass


class SchemaVersionMismatch(NnetError):
    pass


class CorruptPayload(NnetError):
    pass


# --- datagen --------------------------------------------------------------

class DataError(LabError):
    pass


class InvalidCounts(DataError):
    pass


class TargetMissing(DataError):
    pass


class EmptyForgetSet(DataError):
    pass


class InvalidFraction(DataError):
    pass


class DimOutOfRange(DataError):
    pass


class AuditViolation(DataError):
    """An unlearning method read a partition it is not allowed to see."""


# --- unlearn --------------------------------------------------------------

class UnlearnError(LabError):
    pass


class DegenerateForgetFeatures(UnlearnError):
    pass


class DegenerateRetainFeatures(UnlearnError):
    pass


class MassConcentrated(UnlearnError):
    pass


# --- metrics --------------------------------------------------------------

class MetricsError(LabError):
    pass


class SingleClassTrainingSet(MetricsError):
    pass


class TooFewSamples(MetricsError):
    pass


class DegenerateMask(MetricsError):
    pass


class ZeroEntropy(MetricsError):
    pass
