"""Exception hierarchy with stable machine-readable codes.

Every error the pipeline can emit maps to one of four exit codes:
config (2), data (3), numeric divergence (4), infeasible selection (5).
The ``code`` string is stable across releases and is what the CLI writes
to stderr as JSON.
"""

from __future__ import annotations


class ClearError(Exception):
    """Base class for all pipeline errors."""

    code = "error"
    exit_code = 1

    def to_json(self) -> dict:
        return {"error": self.code, "message": str(self)}


class ConfigError(ClearError):
    code = "config"
    exit_code = 2


class DataError(ClearError):
    code = "data"
    exit_code = 3


class BadMagicError(DataError):
    code = "bad_magic"


class VersionMismatchError(DataError):
    code = "version_mismatch"


class TruncatedFileError(DataError):
    code = "truncated"


class NonFiniteDataError(DataError):
    code = "non_finite"


class SchemaError(DataError):
    code = "schema"


class DanglingIndexError(DataError):
    code = "dangling_index"


class DuplicateDescriptorError(DataError):
    code = "duplicate_descriptor"


class ZeroNormError(DataError):
    code = "zero_norm"


class EmptySplitError(DataError):
    code = "empty_split"


class ShapeMismatchError(DataError):
    code = "shape_mismatch"


class DivergenceError(ClearError):
    """Non-finite loss or sample: the run cannot continue."""

    code = "divergence"
    exit_code = 4


class InfeasibleSelectionError(ClearError):
    """Fewer pool descriptors than concepts to assign."""

    code = "infeasible_selection"
    exit_code = 5
