"""
Contextrast Exceptions
Error types raised by the library and mapped to CLI exit codes
"""


class ContextrastError(Exception):
    """Base error for the package"""


class ConfigurationError(ContextrastError):
    """Invalid run configuration or mismatched model dimensions"""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ArgumentError(ContextrastError, ValueError):
    """Operation called with arguments outside its contract"""


class FormatError(ContextrastError):
    """Malformed PGM / CTXF / JSON artefact"""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class StateError(ContextrastError):
    """Operation called in the wrong state, e.g. backward before forward"""


class NumericError(ContextrastError):
    """Non-finite loss or failed gradient check"""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class UndefinedMetricError(ContextrastError):
    """Metric requested over an empty population"""
