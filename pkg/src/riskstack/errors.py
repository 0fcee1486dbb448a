"""Exception types shared across the package."""


class RiskStackError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(RiskStackError, ValueError):
    """An argument violates a documented precondition."""


class FusionError(RiskStackError):
    """A Gaussian fusion update is numerically singular."""


class InsufficientDataError(RiskStackError):
    """Too few demonstrations were supplied for tube fitting."""


class InfeasibleManeuverError(RiskStackError):
    """A reference cannot be tracked within the control envelope."""


class MissingManeuverError(RiskStackError, KeyError):
    """A maneuver id cannot be resolved against a catalog."""


class AlignmentError(RiskStackError):
    """Two flow tubes cannot be aligned in time."""


class UnrelaxableError(RiskStackError):
    """Temporal infeasibility cannot be removed by relaxing upper bounds."""


class IncompletePolicyError(RiskStackError):
    """A policy is missing an action at a reachable node."""


class NoActionError(RiskStackError):
    """A non-terminal belief node has an empty action catalog."""


class InstanceTooLargeError(RiskStackError):
    """Exhaustive policy enumeration would exceed the safety guard."""


class ScenarioError(RiskStackError, ValueError):
    """A scenario document failed validation."""
