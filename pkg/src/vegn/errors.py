"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`VEGNError`,
so the CLI can report a single machine-parsable error class per failure.
"""


class VEGNError(Exception):
    """Base class for all package errors."""


class DimensionError(VEGNError, ValueError):
    pass


class NonFiniteError(VEGNError, FloatingPointError):
    pass


class EmptyNeighborhoodError(VEGNError, ValueError):
    pass


class ContractError(VEGNError, ValueError):
    pass


class StaleTapeError(VEGNError, RuntimeError):
    pass


class BoundsError(VEGNError, IndexError):
    pass


class ReferentialError(VEGNError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DuplicationError(VEGNError, ValueError):
    pass


class SchemaError(VEGNError, ValueError):
    pass


class RowError(VEGNError, ValueError):
    """A single input row could not be parsed."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: " if path is not None else f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class NumericalDegeneracyError(VEGNError, FloatingPointError):
    pass


class DivergenceError(VEGNError, FloatingPointError):
    pass


class StateCorruptionError(VEGNError, RuntimeError):
    pass


class DegenerateMetricError(VEGNError, ValueError):
    pass


class IncompatibleCheckpointError(VEGNError, ValueError):
    pass


class IntegrityError(VEGNError, ValueError):
    pass


class CapabilityError(VEGNError, RuntimeError):
    pass
