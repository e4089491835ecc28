"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class ShapeError(ValueError):
    pass


class EmptyWindowError(InvalidArgument):
    pass


class TapeError(RuntimeError):
    """A tape was replayed against a network it was not recorded on."""


class NumericalError(ArithmeticError):
    pass


class DegenerateVectorError(ValueError):
    pass


class DegenerateEmbeddingError(DegenerateVectorError):
    def __init__(self, candidate_id, message=None):
        self.candidate_id = candidate_id
        super().__init__(message or f"candidate {candidate_id} has a zero-norm embedding")


class ConfigError(ValueError):
    pass


class VariantError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``last_good`` holds the last finite model."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ShapeInconsistencyError(FormatError):
    pass


class VersionError(FormatError):
    pass
