"""Exception types shared across the toolkit."""


class CellCountError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(CellCountError, ValueError):
    """Operands or model inputs have incompatible dimensions."""


class ParameterError(CellCountError, ValueError):
    """A configuration value or function argument is invalid."""


class AnnotationError(CellCountError, ValueError):
    """An annotation file could not be parsed or is inconsistent."""


class ImageFormatError(CellCountError, ValueError):
    """An image file is unsupported, truncated, or malformed."""


class GenerationError(CellCountError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""


class TrainingDivergedError(CellCountError, RuntimeError):
    """Training produced a non-finite loss."""
