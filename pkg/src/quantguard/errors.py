"""Exception hierarchy shared by all quantguard modules.

Every error carries a short machine-readable ``code`` so the CLI can emit
single-line parseable failures, and an ``exit_code`` matching the documented
process exit codes (2 bad input, 3 numeric failure, 4 format error).
"""


class QuantGuardError(Exception):
    code = "error"
    exit_code = 2


class DimensionError(QuantGuardError):
    """Operand or layer shapes are incompatible."""

    code = "dimension_mismatch"
    exit_code = 2


class ContractError(QuantGuardError):
    """An argument violates a documented precondition (e.g. non-binary strategy)."""

    code = "contract_violation"
    exit_code = 2


class CalibrationError(QuantGuardError):
    code = "calibration_failed"
    exit_code = 2


class DegenerateScaleError(QuantGuardError):
    """Weight tensor cannot produce a positive quantization scale."""

    code = "degenerate_scale"
    exit_code = 3


class OptimizationDivergedError(QuantGuardError):
    """Loss became non-finite; reports the offending iteration."""

    code = "optimization_diverged"
    exit_code = 3

    def __init__(self, iteration, message=""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


class PlantingError(QuantGuardError):
    code = "planting_failed"
    exit_code = 3


class UndefinedMetricError(QuantGuardError):
    """Metric has an empty sample set (e.g. every label equals the target)."""

    code = "undefined_metric"
    exit_code = 2


class FormatError(QuantGuardError):
    """Base for container file problems."""

    code = "format_error"
    exit_code = 4


class BadMagicError(FormatError):
    code = "bad_magic"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


class TruncatedFileError(FormatError):
    code = "truncated_file"


class ChecksumError(FormatError):
    code = "checksum_mismatch"


class HeaderError(FormatError):
    """Malformed or inconsistent container header."""

    code = "bad_header"


class ShapeIncompatibilityError(FormatError):
    """Layer chain in a model container does not shape-check."""

    code = "shape_incompatible"
