"""Exception types raised across the package."""


class GimbalLock(ValueError):
    """Z-Y-X Euler extraction requested too close to pitch = +-pi/2."""


class NonFiniteState(FloatingPointError):
    """The integrator produced a NaN or inf; the episode must be aborted."""


class NoSolution(RuntimeError):
    """Inverse kinematics failed from every seed."""


class PlanningFailed(RuntimeError):
    """RRT* did not connect to the goal set within its iteration budget."""


class ShapeMismatch(ValueError):
    pass


class IncompleteTrace(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
