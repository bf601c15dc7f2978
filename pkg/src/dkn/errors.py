"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems (bad shapes,
malformed files, inconsistent arguments) exit with 2, solver failures
(rank deficiency, non-convergence, degenerate inputs) exit with 3.
"""


class DknError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DknError, ValueError):
    """Tensor extents, orders, or structure parameters do not line up."""


class DataFormatError(DknError, ValueError):
    """A serialized artifact (DKT1 blob, model manifest, CSV) is malformed."""


class RankDeficiencyError(DknError, RuntimeError):
    """Normal equations are singular and no ridge was requested."""


class ConvergenceError(DknError, RuntimeError):
    """An iterative solver ran out of iterations.

    Carries the last iterate so callers can inspect how far it got.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class DegenerateDataError(DknError, RuntimeError):
    """Input data admits no meaningful answer (zero norms, empty spectra)."""
