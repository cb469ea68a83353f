"""Exception hierarchy.  Everything derives from ``NLObstacleError``."""


class NLObstacleError(Exception):
    pass


class InputError(NLObstacleError, ValueError):
    """Malformed or inconsistent input data."""


class ConfigurationError(NLObstacleError, ValueError):
    pass


class UnsupportedExteriorError(NLObstacleError):
    pass


class ResolutionError(NLObstacleError):
    """Requested radius or window is below the grid resolution."""


class InsufficientResolutionError(ResolutionError):
    pass


class NotABoundaryPointError(NLObstacleError):
    pass


class SharpnessError(NLObstacleError):
    """Operation requires a sharp (0/1 valued) indicator."""


class SteepGraphError(NLObstacleError):
    pass


class DivergenceError(NLObstacleError):
    """An interaction integral is infinite (overlapping supports)."""


class OracleRefusal(NLObstacleError):
    """Instance exceeds the oracle's enumeration or quadrature budget."""
