"""Exception types raised across the toolkit.

Names mirror the failure they describe; the CLI prints the class name on exit.
"""


class PPDeidError(Exception):
    """Base class for all toolkit errors."""


# data pipeline
class MissingFile(PPDeidError, FileNotFoundError):
    pass


class SchemaMismatch(PPDeidError, ValueError):
    pass


class EmptyManifest(PPDeidError, ValueError):
    pass


class TooFewSubjects(PPDeidError, ValueError):
    pass


class InfeasiblePositives(PPDeidError, ValueError):
    pass


class DecodeError(PPDeidError, ValueError):
    pass


# networks / losses
class ShapeMismatch(PPDeidError, ValueError):
    pass


class DimensionMismatch(PPDeidError, ValueError):
    pass


class InvalidConfig(PPDeidError, ValueError):
    pass


class Diverged(PPDeidError, RuntimeError):
    pass


class NonFiniteLoss(PPDeidError, FloatingPointError):
    pass


class MissingVerificator(PPDeidError, ValueError):
    pass


class CheckpointError(PPDeidError, ValueError):
    pass


# evaluation
class UnbalancedPairs(PPDeidError, ValueError):
    pass


class TooFewPairs(PPDeidError, ValueError):
    pass


class AdapterFailure(PPDeidError, RuntimeError):
    pass


class LabelMismatch(PPDeidError, ValueError):
    pass


class EmptyInput(PPDeidError, ValueError):
    pass


class EmptyGroupWarning(UserWarning):
    """A demographic group has fewer than two subjects."""
