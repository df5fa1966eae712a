"""Exception hierarchy shared by every glyphprior module."""

from typing import Optional


class GlyphPriorError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(GlyphPriorError):
    pass


class CharsetError(GlyphPriorError):
    pass


class GlyphMissingError(GlyphPriorError):
    def __init__(self, char: str, font_id: Optional[int] = None):
        self.char = char
        self.font_id = font_id
        where = f" in font {font_id}" if font_id is not None else ""
        super().__init__(f"Glyph for character {char!r} is missing or empty{where}")


class TextSamplingError(GlyphPriorError):
    pass


class ManifestError(GlyphPriorError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegradationError(GlyphPriorError):
    pass


class PriorIndexError(GlyphPriorError, IndexError):
    pass


class EncoderInputError(GlyphPriorError):
    pass


class GeometryError(GlyphPriorError):
    pass


class LossInputError(GlyphPriorError):
    pass


class CTCFeasibilityError(LossInputError):
    pass


class NonFiniteLossError(GlyphPriorError):
    def __init__(self, term: str, value: float, diagnostics: Optional[dict] = None):
        self.term = term
        self.value = value
        self.diagnostics = diagnostics or {}
        extra = f" ({self.diagnostics})" if self.diagnostics else ""
        super().__init__(f"Non-finite loss term '{term}': {value}{extra}")


class TrainingDivergedError(GlyphPriorError):
    pass


class CheckpointMismatchError(GlyphPriorError):
    pass


class MetricInputError(GlyphPriorError):
    pass
