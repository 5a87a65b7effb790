"""Exception types shared across the package."""


class G2LError(Exception):
    """Base class for every error raised by g2lsearch."""


class ConfigError(G2LError, ValueError):
    """A configuration value is missing, malformed or out of range."""


class StructureParseError(G2LError, ValueError):
    """Malformed structure text.

    ``token`` and ``position`` point at the offending piece of the input
    (``position`` is a character offset).
    """

    def __init__(self, message, token, position):
        super().__init__(f"{message}: token {token!r} at position {position}")
        self.token = token
        self.position = position


class ShapeError(G2LError, ValueError):
    """Array or structure shapes do not line up."""


class DegenerateFitnessError(G2LError, ValueError):
    """Every fitness value is zero, so proportional selection is undefined."""


class DegenerateWeightsError(G2LError, ValueError):
    """Every branch weight is zero, so the branch PMF is undefined."""


class PopulationError(G2LError, ValueError):
    """Too few candidates to fill a population."""


class DivergenceError(G2LError, RuntimeError):
    """Training produced a non-finite loss."""


class DatasetError(G2LError, OSError):
    """A dataset file is missing or inconsistent."""


class CheckpointError(G2LError, ValueError):
    """A checkpoint file cannot be read back."""
