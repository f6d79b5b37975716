"""Exception hierarchy.  The CLI maps InputError to exit 1, NumericalError to exit 2."""


class NsslError(Exception):
    pass


class InputError(NsslError, ValueError):
    """Bad user input: malformed files, invalid configs, failed validation."""


class FormatError(InputError):
    pass


class ValidationError(InputError):
    pass


class ConfigError(InputError):
    pass


class NumericalError(NsslError, ArithmeticError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass
