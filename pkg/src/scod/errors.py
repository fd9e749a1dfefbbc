"""Exception hierarchy shared by all modules.

The CLI maps the three families onto exit codes: configuration problems (2),
bad input data (3) and numerical failures (4).
"""


class ScodError(Exception):
    """Base class for every error raised by this package."""

    kind = "error"


class ConfigError(ScodError):
    kind = "config"


class DataError(ScodError):
    kind = "data"


class NumericalError(ScodError):
    kind = "numerical"
