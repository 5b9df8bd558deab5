"""Exception hierarchy shared across the package."""


class ClusCompError(Exception):
    pass


class InvalidArgument(ClusCompError, ValueError):
    pass


class DegenerateInput(InvalidArgument):
    pass


class CorruptLayer(ClusCompError):
    pass


class CorruptFile(ClusCompError):
    pass


class BadMagic(CorruptFile):
    pass


class BadVersion(CorruptFile):
    pass


class ChecksumError(CorruptFile):
    pass


class TruncatedFile(CorruptFile):
    pass


class ManifestError(ClusCompError):
    pass


class TrainingDiverged(ClusCompError, FloatingPointError):
    """Raised when a training loss becomes non-finite.

    ``state`` carries the last parameters that produced a finite loss.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
