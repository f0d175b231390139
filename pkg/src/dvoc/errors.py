"""Exception hierarchy shared across the toolkit.

Every error raised on purpose derives from DvocError so the CLI can map
tool failures to a single exit code while argparse keeps its own usage
exit code.
"""


class DvocError(Exception):
    """Base class for all toolkit errors."""


class ParseError(DvocError):
    """Malformed input document.

    ``offset`` is the byte offset of the first offending character when
    known, ``line`` the 1-based line number for line-oriented formats.
    """

    def __init__(self, message, offset=None, line=None):
        super().__init__(message)
        self.offset = offset
        self.line = line


class ValidationError(DvocError):
    """Structurally valid input that violates a documented invariant."""


class CodecError(DvocError):
    """Invalid run-length data or undecodable mask payload."""


class GeometryError(DvocError):
    """Incompatible geometry, e.g. masks with mismatched dimensions."""


class InputError(DvocError):
    """Out-of-range or malformed in-memory argument."""


class DegenerateWeightsError(InputError):
    """All aggregation weights are zero; a weighted mean is undefined."""


class EvaluationError(DvocError):
    """Evaluation cannot proceed, e.g. masks missing in mask mode."""


class TransientProviderError(DvocError):
    """Retryable captioning failure: transport errors, rate limits, 5xx."""


class PermanentProviderError(DvocError):
    """Non-retryable captioning failure; carries the provider message."""


class CaptionSkip(DvocError):
    """Object cannot be prompted for, e.g. absent from all sampled frames."""
