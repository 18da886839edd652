"""Exception hierarchy. Each family maps to a CLI exit code."""


class AttrSerError(Exception):
    exit_code = 1


class ConfigError(AttrSerError, ValueError):
    exit_code = 1


class DataError(AttrSerError, ValueError):
    exit_code = 2


class FeatureError(DataError):
    """Raised for waveforms that cannot be turned into features.

    ``code`` is one of ``"utterance_too_short"`` or ``"invalid_waveform"``.
    """

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


class NumericalError(AttrSerError, ArithmeticError):
    exit_code = 3
