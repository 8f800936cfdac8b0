"""Exception hierarchy shared by all modules.

Data problems (bad files, violated invariants, mismatched schemas) derive from
:class:`DataError` so the command-line front-end can map them to exit code 2.
"""


class DataError(ValueError):
    """Base class for every input/data related failure."""


class CloudParseError(DataError):
    """A cloud file row could not be parsed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class SchemaError(DataError):
    """Required attribute missing, or a per-point invariant is violated."""


class FeatureSyntaxError(DataError):
    """A feature token does not follow the FEAT_SC#_STAT_PC# grammar."""

    def __init__(self, token, segment, message):
        self.token = token
        self.segment = segment
        where = f"segment {segment}" if segment else "token"
        super().__init__(f"{token!r}: {where}: {message}")


class ParameterFileError(DataError):
    """Structured parameter-file error carrying the offending line number."""

    def __init__(self, line, message):
        self.line = line
        prefix = f"line {line}: " if line else ""
        super().__init__(prefix + message)


class ConfigurationError(DataError):
    """The pipeline asks for something the supplied inputs cannot provide."""


class TrainingError(DataError):
    """The forest cannot be trained on the given labels/matrix."""


class ModelFormatError(DataError):
    """A model file is truncated, malformed or of an unsupported version."""
