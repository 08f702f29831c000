"""Exception hierarchy shared across the package."""


class GAPruneError(Exception):
    """Base class; ``kind`` is the machine-readable tag the CLI prints."""

    kind = "error"


class DimensionError(GAPruneError, ValueError):
    kind = "dimension"


class ContractError(GAPruneError):
    kind = "contract"


class ConfigError(GAPruneError, ValueError):
    kind = "config"


class InputError(GAPruneError, ValueError):
    kind = "input"


class ParseError(GAPruneError, ValueError):
    kind = "parse"


class EmptyDatasetError(GAPruneError, ValueError):
    kind = "empty_dataset"


class IntegrityError(GAPruneError):
    kind = "integrity"


class TrainingError(GAPruneError, RuntimeError):
    kind = "training"


class StateError(GAPruneError):
    kind = "state"


class SplitError(GAPruneError, ValueError):
    kind = "split"


class ReportError(GAPruneError, ValueError):
    kind = "report"


class UndefinedMetricError(GAPruneError, ValueError):
    """A metric is mathematically undefined for the given input."""

    kind = "undefined"


class DependencyError(GAPruneError):
    kind = "dependency"

    def __init__(self, stage: str, requires: str):
        super().__init__(f"stage {stage!r} requires {requires!r} to have run first")
        self.stage = stage
        self.requires = requires
