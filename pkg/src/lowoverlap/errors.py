"""Exception hierarchy shared by all pipeline stages."""


class LowOverlapError(Exception):
    """Base class for every error raised by this package."""


# geometry / rasters


class BehindCamera(LowOverlapError, ValueError):
    pass


class NonPositiveDepth(LowOverlapError, ValueError):
    pass


class InvalidPose(LowOverlapError, ValueError):
    pass


class OutOfRange(LowOverlapError, IndexError):
    pass


# file formats


class FormatError(LowOverlapError, ValueError):
    """A file could not be parsed. Parsers only ever raise subclasses of this."""


class MalformedLine(FormatError):
    def __init__(self, path, lineno, reason):
        self.path = str(path)
        self.lineno = lineno
        self.reason = reason
        super().__init__(f"{self.path}:{lineno}: {reason}")


class UnsupportedCameraModel(FormatError):
    pass


class DanglingReference(FormatError):
    pass


class MalformedHeader(FormatError):
    pass


class TruncatedData(FormatError):
    pass


class UnsupportedPlyVariant(FormatError):
    pass


class UnsupportedImageFormat(FormatError):
    pass


class SchemaError(FormatError):
    def __init__(self, field_path, message):
        self.field_path = field_path
        super().__init__(f"{field_path or '<root>'}: {message}")


class MissingFile(LowOverlapError, FileNotFoundError):
    pass


# recovery


class DegenerateSystem(LowOverlapError, ValueError):
    pass


class InsufficientPairs(LowOverlapError, ValueError):
    pass


# fusion / products / evaluation


class KindMismatch(LowOverlapError, ValueError):
    pass


class EmptyExtent(LowOverlapError, ValueError):
    pass


class DimensionMismatch(LowOverlapError, ValueError):
    pass


class GridMismatch(LowOverlapError, ValueError):
    pass


class NoOverlap(LowOverlapError, ValueError):
    pass


class EmptyInput(LowOverlapError, ValueError):
    pass


class EmptyAoi(LowOverlapError, ValueError):
    pass


# synthetic scenes


class OutOfExtent(LowOverlapError, ValueError):
    pass


class InfeasibleOverlap(LowOverlapError, ValueError):
    pass


class PoleInRange(LowOverlapError, ValueError):
    pass


# orchestration


class ConfigError(LowOverlapError, ValueError):
    """Invalid run configuration or command-line usage."""


class StageError(LowOverlapError, RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {message}")
