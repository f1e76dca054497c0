"""Error taxonomy shared by all stages.

Every failure mode carries a distinct process exit code so that batch runs
can tell them apart without parsing messages.
"""


class LapGuideError(Exception):
    exit_code = 1


class ConfigurationError(LapGuideError):
    """Invalid user input: bad interval, mesh size, N, unknown example, ..."""

    exit_code = 2


class SupportError(LapGuideError):
    """A compactly supported field leaks outside the cell it was declared on."""

    exit_code = 3


class SingularCellProblemError(LapGuideError):
    """A(alpha, k) is numerically singular (alpha sits on an exceptional value)."""

    exit_code = 4

    def __init__(self, alpha, rcond):
        self.alpha = alpha
        self.rcond = rcond
        super().__init__(
            f"cell problem singular at alpha={alpha:.6g} (rcond estimate {rcond:.3g})"
        )


class EigensolverError(LapGuideError):
    exit_code = 5


class StandingWaveError(LapGuideError):
    """Some propagating mode has zero group velocity (|lambda| below tolerance)."""

    exit_code = 6


class ClassificationError(LapGuideError):
    """sign(lambda) and the finite-difference slope of the dispersion branch disagree."""

    exit_code = 7


class ContourConfigurationError(LapGuideError):
    """Indentation radius or shift violates the disjointness / analyticity guards."""

    exit_code = 8


class AssumptionViolationError(LapGuideError):
    """S+ and S- intersect, so no admissible CCI contour exists."""

    exit_code = 9


class TrappedModeError(LapGuideError):
    """The coupled block is singular: k^2 is an eigenvalue of the perturbed operator."""

    exit_code = 10


class DivisionDegeneracyError(LapGuideError):
    exit_code = 11


class DecayCheckError(LapGuideError):
    """Truncated damped solution has not decayed at the artificial boundary."""

    exit_code = 12


class NoConvergenceError(LapGuideError):
    exit_code = 13


class MissingArtifactError(LapGuideError):
    exit_code = 14
