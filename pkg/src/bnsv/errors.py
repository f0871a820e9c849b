"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes.
"""


class BnsvError(Exception):
    exit_code = 1


class ConfigError(BnsvError, ValueError):
    exit_code = 2


class DependencyError(BnsvError):
    exit_code = 3


class NumericalError(BnsvError, ArithmeticError):
    exit_code = 4


class EmptyInputError(BnsvError, ValueError):
    pass


class DegenerateInputError(BnsvError, ValueError):
    pass


class ParseError(BnsvError, ValueError):
    """Malformed binary artifact. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
