"""Exception types shared across the simulator."""


class CimSimError(Exception):
    """Base class for all simulator errors."""


class DomainError(CimSimError, ValueError):
    """An input fell outside its physical or mathematical domain."""


class ShapeError(CimSimError, ValueError):
    """Array dimensions are inconsistent."""


class FitError(CimSimError, RuntimeError):
    """Parameter fitting could not proceed or converge."""


class TrainingError(CimSimError, RuntimeError):
    """Training produced an invalid state (e.g. non-finite gradients)."""


class IngestError(CimSimError, ValueError):
    """A dataset or measurement file failed validation."""


class ConfigError(CimSimError, ValueError):
    """An experiment configuration is invalid or incomplete."""
