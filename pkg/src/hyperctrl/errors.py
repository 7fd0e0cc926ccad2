"""Exception hierarchy for hyperctrl.

All library-raised errors derive from :class:`HyperctrlError` so callers can
catch everything from this package with a single handler while the CLI maps
subclasses onto distinct exit codes.
"""


class HyperctrlError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(HyperctrlError):
    """A system description is malformed (bad shapes, wrong signs, bad JSON)."""


class PreconditionError(HyperctrlError):
    """A structural precondition fails (boundary-matrix class, time horizon,
    speed ordering), so the requested construction is not defined."""


class SolverConvergenceError(HyperctrlError):
    """An iterative stage (fixed-point sweep, conjugate gradient) failed to
    reach its tolerance within the allowed number of iterations."""


class ConstructionError(HyperctrlError):
    """A derived object could not be built from valid inputs (e.g. empty
    mollifier support window, singular reflection block)."""
