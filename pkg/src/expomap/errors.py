"""Exception types shared across the package."""


class ExpomapError(Exception):
    """Base class for all expomap errors."""


class OutOfBounds(ExpomapError):
    """A projected coordinate falls outside the grid extent."""


class ShapeMismatch(ExpomapError):
    """Two grids that must share a shape do not."""


class MissingColumn(ExpomapError):
    """Sensor CSV lacks a required header column."""


class DegenerateRange(ExpomapError):
    """Normalization range has max == min."""


class EmptyObservation(ExpomapError):
    """An operation requires at least one observed pixel."""


class DomainTooSmall(ExpomapError):
    """Kernel layer step requires neighbor entries that were not computed."""


class OutOfMemory(ExpomapError):
    """Requested kernel block exceeds the memory ceiling.

    Carries ``suggested_tile_rows``, the largest row-chunk size that fits.
    """

    def __init__(self, msg, suggested_tile_rows=None):
        super().__init__(msg)
        self.suggested_tile_rows = suggested_tile_rows


class NotPositiveDefinite(ExpomapError):
    """Kernel system could not be factorized even after jitter escalation."""


class Divergence(ExpomapError):
    """Iterative solve diverged. Carries the residual trace so far."""

    def __init__(self, msg, residual_trace=None):
        super().__init__(msg)
        self.residual_trace = residual_trace


class IndexMismatch(ExpomapError):
    """Kernel block columns do not match the coefficient index set."""


class EmptyMask(ExpomapError):
    """Masked loss evaluated with zero observed pixels."""


class BadWidths(ExpomapError):
    """Generator channel widths must start and end at 1."""


class NonFiniteLoss(ExpomapError):
    """Training loss became NaN or infinite. Carries the trace so far."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class EmptyInput(ExpomapError):
    """Metric evaluated on empty sequences."""


class UnitMismatch(ExpomapError):
    """Metric inputs must be in V/m, not normalized units."""


class TooManySensors(ExpomapError):
    """Requested more simulated sensors than available pixels."""


class ConfigError(ExpomapError):
    """Run configuration is invalid or incomplete."""
