"""Exception hierarchy.

Input/contract violations derive from :class:`ValidationError` (CLI exit
code 2); numerical failures derive from :class:`NumericalError` (exit code 3).
"""


class CraniosynthError(Exception):
    pass


class ValidationError(CraniosynthError, ValueError):
    pass


class NumericalError(CraniosynthError, ArithmeticError):
    pass


# geometry
class CollinearLandmarks(ValidationError):
    pass


class NameMismatch(ValidationError):
    pass


class DegenerateMesh(ValidationError):
    pass


class NoConvergence(UserWarning):
    """Iterative alignment hit ``max_iter`` before reaching ``tol``."""


# morphing
class EmptyTarget(ValidationError):
    pass


class SingularSystem(NumericalError):
    pass


# ssm / image pca
class InsufficientSamples(ValidationError):
    pass


class NonpositiveWeights(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


# distance maps
class DegenerateLandmarks(ValidationError):
    pass


class EmptyMesh(ValidationError):
    pass


# networks
class ShapeMismatch(ValidationError):
    def __init__(self, message, layer_index=None):
        super().__init__(message if layer_index is None else f"layer {layer_index}: {message}")
        self.layer_index = layer_index


class UnsupportedLayer(ValidationError):
    pass


class BadLabel(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


# ssim
class EmptyReference(ValidationError):
    pass


class EmptyClass(ValidationError):
    pass


# surrogate / pipeline
class BadClass(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class InsufficientClassSamples(ValidationError):
    pass
