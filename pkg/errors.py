# errors.py

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class CeclError(Exception):
    """Base class for every error the toolkit raises on purpose."""
    exit_code = EXIT_DATA


# --- usage (exit 1) ---

class UsageError(CeclError):
    exit_code = EXIT_USAGE


# --- data (exit 2) ---

class DataError(CeclError):
    exit_code = EXIT_DATA

class LexiconError(DataError):
    pass

class BadRecord(DataError):
    pass

class EmptyCaption(DataError):
    pass

class UnknownToken(DataError):
    pass

class DimensionMismatch(DataError):
    pass

class FillerViolation(DataError):
    pass

class EmptyBenchmark(DataError):
    pass

class EmptySamples(DataError):
    pass

class KTooLarge(DataError):
    pass


# --- numerical (exit 3) ---

class NumericalError(CeclError):
    exit_code = EXIT_NUMERICAL

class ZeroNorm(NumericalError):
    pass

class NonFinite(NumericalError):
    def __init__(self, message: str, batch_id: str = "", dump_path: str = ""):
        super().__init__(message)
        self.batch_id = batch_id
        self.dump_path = dump_path
