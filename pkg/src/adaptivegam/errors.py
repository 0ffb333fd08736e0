"""Exception taxonomy shared by all subsystems.

Every error raised on purpose by this package derives from AdaptiveGamError,
so callers can catch the whole family with one clause while still getting
ValueError semantics from the usual builtins.
"""


class AdaptiveGamError(ValueError):
    pass


# --- ingestion / time tables ---------------------------------------------

class MalformedRow(AdaptiveGamError):
    def __init__(self, line_number, message=""):
        self.line_number = line_number
        super().__init__(f"malformed row at line {line_number}" + (f": {message}" if message else ""))


class GapInSeries(AdaptiveGamError):
    def __init__(self, first_missing, message=""):
        self.first_missing = first_missing
        super().__init__(f"gap in series, first missing instant {first_missing}" + (f" ({message})" if message else ""))


class DuplicateTimestamp(AdaptiveGamError):
    pass


class MissingColumn(AdaptiveGamError):
    pass


class FactorOutOfRange(AdaptiveGamError):
    pass


class InterpolationGapTooLong(AdaptiveGamError):
    pass


# --- spline model ----------------------------------------------------------

class TooFewDistinctValues(AdaptiveGamError):
    pass


class RankDeficientDesign(AdaptiveGamError):
    pass


class NoUsableRows(AdaptiveGamError):
    pass


class DegenerateEffect(AdaptiveGamError):
    pass


# --- online adaptation -----------------------------------------------------

class SingularGram(AdaptiveGamError):
    pass


class NonFiniteInput(AdaptiveGamError):
    pass


class NonFiniteLikelihood(AdaptiveGamError):
    pass


class SingularSystem(AdaptiveGamError):
    pass


# --- transfer --------------------------------------------------------------

class ZeroGram(AdaptiveGamError):
    pass


class DimensionMismatch(AdaptiveGamError):
    pass


class ZeroDenominator(AdaptiveGamError):
    pass


class UnmappedRequiredTerm(AdaptiveGamError):
    pass


# --- residual models -------------------------------------------------------

class TooShort(AdaptiveGamError):
    pass


class NonStationaryFit(AdaptiveGamError):
    pass


class InsufficientLags(AdaptiveGamError):
    pass


# --- aggregation -----------------------------------------------------------

class NoActiveExpert(AdaptiveGamError):
    pass


class DuplicateExpert(AdaptiveGamError):
    pass


# --- evaluation ------------------------------------------------------------

class LeakageGuardTripped(AdaptiveGamError):
    pass


class MissingExpert(AdaptiveGamError):
    pass


class InvalidScenario(AdaptiveGamError):
    pass
