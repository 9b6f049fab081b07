"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the CLI can map domain failures to
distinct process exit statuses without a lookup table.
"""


class MudGuardError(Exception):
    exit_code = 1


class MudParseError(MudGuardError):
    """The document is not valid JSON (or not UTF-8)."""

    exit_code = 3

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MudValidationError(MudGuardError):
    exit_code = 4


class RateGrammarError(MudGuardError):
    exit_code = 5


class CompileError(MudGuardError):
    exit_code = 6


class FetchError(MudGuardError):
    exit_code = 7

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class FetchTimeout(FetchError):
    pass


class TraceLoadError(MudGuardError):
    exit_code = 8


class LearnerError(MudGuardError):
    exit_code = 9


class TableFullError(MudGuardError):
    exit_code = 10


class MalformedPacket(MudGuardError):
    """Raised by the header parser; the datapath turns it into an abort verdict."""

    exit_code = 11
