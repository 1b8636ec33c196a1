"""Exception types raised across the package.

Every error carries a short machine-readable ``code`` so the CLI can report
failures uniformly.
"""

from __future__ import annotations


class DPConsensusError(Exception):
    code = "ERROR"


class DisconnectedGraphError(DPConsensusError, ValueError):
    code = "DISCONNECTED"


class TargetUnreachableError(DPConsensusError, RuntimeError):
    code = "TARGET_UNREACHABLE"


class NotRegularError(DPConsensusError, ValueError):
    code = "NOT_REGULAR"


class InvalidOrderError(DPConsensusError, ValueError):
    code = "INVALID_ORDER"


class EmptyCurveError(DPConsensusError, ValueError):
    code = "EMPTY_CURVE"


class UnsatisfiableError(DPConsensusError, ValueError):
    code = "UNSATISFIABLE"


class DimensionMismatchError(DPConsensusError, ValueError):
    code = "DIMENSION_MISMATCH"


class SingularError(DPConsensusError, ValueError):
    code = "SINGULAR"


class EmptyClassError(DPConsensusError, ValueError):
    code = "EMPTY_CLASS"


class BadMagicError(DPConsensusError, ValueError):
    code = "BAD_MAGIC"


class CountMismatchError(DPConsensusError, ValueError):
    code = "COUNT_MISMATCH"


class TruncatedFileError(DPConsensusError, ValueError):
    code = "TRUNCATED_FILE"


class ConfigInvalidError(DPConsensusError, ValueError):
    code = "CONFIG_INVALID"
