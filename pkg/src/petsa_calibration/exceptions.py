class PetsaError(Exception):
    """Base class for errors that should end a CLI invocation with a specific exit code."""

    exit_code: int = 1


class UsageError(PetsaError):
    exit_code = 2


class DataError(PetsaError):
    exit_code = 3


class NumericalError(PetsaError):
    exit_code = 4
