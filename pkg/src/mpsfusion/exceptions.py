"""Exception hierarchy. Every error carries a stable ``code`` for metrics records."""


class MpsFusionError(Exception):
    code = "error"


class NonUnitQuaternion(MpsFusionError, ValueError):
    code = "non_unit_quaternion"


class NonPositiveScale(MpsFusionError, ValueError):
    code = "non_positive_scale"


class AllInvalid(MpsFusionError, ValueError):
    code = "all_invalid"


class InsufficientPriors(MpsFusionError):
    code = "insufficient_priors"


class DegeneratePriors(MpsFusionError):
    code = "degenerate_priors"


class SingularMixing(MpsFusionError):
    code = "singular_mixing"


class EmptyInput(MpsFusionError, ValueError):
    code = "empty_input"


class SolverDiverged(MpsFusionError):
    code = "solver_diverged"


class DegenerateCorrespondences(MpsFusionError, ValueError):
    code = "degenerate_correspondences"


class InsufficientOverlap(MpsFusionError):
    code = "insufficient_overlap"

    def __init__(self, message, registration=None):
        super().__init__(message)
        self.registration = registration


class DimensionMismatch(MpsFusionError, ValueError):
    code = "dimension_mismatch"


class InputValidationError(MpsFusionError, ValueError):
    code = "input_validation"
