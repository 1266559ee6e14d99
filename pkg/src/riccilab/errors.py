"""Exception types shared across the laboratory modules."""


class RicciLabError(Exception):
    """Base class for all laboratory errors."""


# --- geometry ---

class OutOfChart(RicciLabError):
    """Queried point lies outside the model's coordinate range."""


class PastSingularTime(RicciLabError):
    """Queried time is at or beyond the singular time of the model."""


class NoFlowData(RicciLabError):
    """Numeric model queried outside its tabulated time range."""


class GridMismatch(RicciLabError):
    """Sampled field grid incompatible with the model chart or a peer grid."""


# --- flow ---

class CflViolation(RicciLabError):
    """Requested time step exceeds the stability bound."""


class PoleDegeneracy(RicciLabError):
    """Smooth pole closure lost: radial slope drifted from +-1."""


class Blowup(RicciLabError):
    """Curvature exceeded the overflow guard; the run ended near singular time.

    Signals proximity to the singular time, not solver failure.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class NoBlowupTrend(RicciLabError):
    """max|Rm| is not increasing in the tail; no singular time to estimate."""


class InsufficientTail(RicciLabError):
    """Too few states in the fit window for a curvature-exponent fit."""


# --- lgeodesic ---

class ShapeMismatch(RicciLabError):
    """Vector field sampling does not match curve nodes."""


class LeftChart(RicciLabError):
    """Trajectory exited a noncompact coordinate range."""


class BlowupOnPath(RicciLabError):
    """Curvature overflow guard hit along an integrated trajectory."""


class NoConvergence(RicciLabError):
    """Shooting failed to hit the target after multistart enlargement."""


class AmbiguousMinimizer(RicciLabError):
    """Two distinct minimizing basins within tolerance.

    Solvers normally flag and return both rather than raise; the exception
    exists for callers that demand uniqueness.
    """


# --- reduced ---

class UnresolvedNodes(RicciLabError):
    """Field build left more nodes unresolved than the rejection threshold."""

    def __init__(self, message, nodes=None):
        super().__init__(message)
        self.nodes = nodes if nodes is not None else []


class GridTooCoarse(RicciLabError):
    """Inequality tolerances unmet and refinement did not resolve them."""


class NotCauchy(RicciLabError):
    """Field deltas fail to decrease toward singular time."""


# --- volume ---

class TailUncontrolled(RicciLabError):
    """Integration domain too small for the requested tail error budget."""


class MissingLimitField(RicciLabError):
    """Equality-case detection needs a singular limit field."""


# --- cli ---

class ConfigInvalid(RicciLabError):
    """Scenario configuration failed validation."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = violations if violations is not None else []


class StageFailed(RicciLabError):
    """A pipeline stage raised; carries stage context."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
