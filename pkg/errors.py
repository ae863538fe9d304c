"""
Exception types shared across the lab.

Every error that can reach the command line carries an exit code and a
human-readable detail; `main.run` maps the code to the process exit status.
"""


class LabError(Exception):
    """Base class for all lab errors"""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(LabError, ValueError):
    exit_code = 1


class DataError(LabError):
    exit_code = 2


class DataFormatError(DataError):
    pass


class NumericError(LabError):
    exit_code = 3


class ShapeError(LabError, ValueError):
    pass


class AutogradError(LabError, RuntimeError):
    pass


class DegenerateProfileError(NumericError, ValueError):
    pass


class EnumerationLimitError(LabError, ValueError):
    pass
