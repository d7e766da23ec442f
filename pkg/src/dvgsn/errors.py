"""Exception hierarchy.

Two branches matter operationally: :class:`InputError` (bad files, bad
arguments, bad shapes -> CLI exit code 2) and :class:`NumericalError`
(degenerate data, divergence, non-finite values -> CLI exit code 3).
"""


class DvgsnError(Exception):
    """Base class for all package errors."""


class InputError(DvgsnError):
    """Problems with user-supplied data or arguments."""


class NumericalError(DvgsnError):
    """Numerical failures: degenerate statistics, divergence, non-finite values."""


class FormatError(InputError):
    """Malformed input file (missing columns, unparseable cells)."""


class GapError(InputError):
    """Non-contiguous weekly series."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class SeriesTooShortError(InputError):
    """Series shorter than the minimum required by the windowing."""


class ShapeError(InputError):
    """Matrix dimensions do not conform."""


class StampNotFoundError(InputError):
    """A requested year/week timepoint is not in the dataset."""


class UnsupportedHorizonError(InputError):
    """Operation only defined for a restricted predictive window."""


class DegenerateSeriesError(NumericalError):
    """Zero-variance data where standardization is required."""


class RankError(NumericalError):
    """Least-squares fit failed."""


class TrainingDivergedError(NumericalError):
    """Non-finite loss during training."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
