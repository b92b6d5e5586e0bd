"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class BidcError(Exception):
    exit_code = 1


class ConfigError(BidcError, ValueError):
    exit_code = 1


class DimensionError(BidcError, ValueError):
    exit_code = 3


class DataError(BidcError):
    exit_code = 2


class VocabularyError(DataError, IndexError):
    pass


class AlignmentError(DataError, ValueError):
    pass


class ParseError(DataError, ValueError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class FormatError(DataError):
    """Wrong magic or version in a checkpoint."""


class CorruptionError(DataError):
    """Checkpoint payload disagrees with its header (truncation, bad shapes)."""


class CompatibilityError(DataError):
    """Checkpoint and dataset were built over different vocabularies."""


class NumericError(BidcError, ArithmeticError):
    exit_code = 3


class EmptyLossError(NumericError):
    pass
