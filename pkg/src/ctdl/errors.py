"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid spec, config, or argument combination (detected before compute)."""


class NumericalError(ArithmeticError):
    """A non-finite value reached an update; the update was not applied."""


class ExplanationFormatError(ValueError):
    """Malformed explanation or checkpoint document.

    ``path`` names the offending field (``entries[2].beta``) or, for JSON
    syntax errors, a ``line:col`` location.
    """

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class UnsupportedVersionError(ExplanationFormatError):
    pass
