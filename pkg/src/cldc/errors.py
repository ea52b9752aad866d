"""Exception and warning types shared across the package."""


class ShapeError(ValueError):
    pass


class EmptySupportError(ValueError):
    """Raised when an action mask leaves no action to choose from."""


class NumericFaultError(ArithmeticError):
    """Non-finite values reached a loss or a parameter update."""


class ConfigError(ValueError):
    pass


class IllegalActionError(ValueError):
    """An agent tried an action that is not active in the current task."""


class DataError(ValueError):
    """A transition buffer does not agree with the action space it is used with."""


class DataInconsistencyWarning(UserWarning):
    pass
