from typing import Literal, Optional

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DB_FAILS = 2


def exit_code(state) -> Literal[0, 1, 2]:
    """
    Routing function that maps a finished run to the process exit code.

    Exit codes:
    - 1 when the run recorded an error (usage, IO, parse or domain error)
    - 2 when an analysis refuted detailed balance
    - 0 otherwise
    """
    if state.get("error"):
        return EXIT_ERROR

    # analysis negative
    if state.get("detailed_balance") is False:
        return EXIT_DB_FAILS

    return EXIT_OK


def error_kind(exc: BaseException) -> Optional[str]:
    """Short label recorded in the run state for a caught exception."""
    if exc is None:
        return None
    return type(exc).__name__
