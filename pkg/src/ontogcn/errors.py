"""Exception hierarchy shared across the package."""


class OntoGcnError(Exception):
    """Base class for all package errors."""


class DimensionError(OntoGcnError, ValueError):
    pass


class ProbeError(OntoGcnError, ArithmeticError):
    """A finite-difference probe produced a non-finite loss."""


class IngestionError(OntoGcnError):
    pass


class ModeError(IngestionError):
    pass


class SpecError(OntoGcnError, ValueError):
    pass


class GraphError(OntoGcnError, ArithmeticError):
    pass


class EmbeddingError(OntoGcnError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class TrainingError(OntoGcnError, ArithmeticError):
    pass


class MetricError(OntoGcnError, ValueError):
    pass


class CheckpointError(OntoGcnError):
    pass


class ConfigError(OntoGcnError, ValueError):
    pass
