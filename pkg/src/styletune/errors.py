"""Exception hierarchy shared by all styletune modules.

Each class carries a short machine-readable ``category`` used by the CLI
to emit one-line parsable errors.
"""


class StyleTuneError(Exception):
    category = "internal"


class DimensionError(StyleTuneError):
    """Shapes or axes do not line up."""

    category = "dimension"


class NumericDomainError(StyleTuneError):
    """Value outside the numeric domain of an operation (non-finite, zero norm, ...)."""

    category = "numeric-domain"


class ContractError(StyleTuneError):
    """A documented precondition was violated by the caller."""

    category = "contract"


class ConfigurationError(StyleTuneError):
    category = "configuration"


class VocabularyError(StyleTuneError):
    """Token id outside the configured vocabulary."""

    category = "vocabulary"


class IntegrityError(StyleTuneError):
    """Stored artifact does not match its manifest or is corrupted."""

    category = "integrity"


class CompatibilityError(StyleTuneError):
    """Artifact format version not supported by this build."""

    category = "compatibility"


class TrainingError(StyleTuneError):
    """Training diverged or violated a frozen-parameter invariant."""

    category = "training"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class UsageError(StyleTuneError):
    category = "usage"
