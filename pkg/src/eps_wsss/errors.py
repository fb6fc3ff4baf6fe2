"""Exception hierarchy shared by the library and the command line driver."""


class EPSError(Exception):
    """Base class. ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 2
    kind = "error"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field

    def one_line(self):
        msg = " ".join(str(self).split())
        if self.field:
            return f"{self.kind}: field={self.field}: {msg}"
        return f"{self.kind}: {msg}"


class ConfigError(EPSError):
    exit_code = 1
    kind = "config_error"


class ShapeError(EPSError, ValueError):
    kind = "shape_error"


class StaleTapeError(EPSError, RuntimeError):
    kind = "stale_tape"


class DataError(EPSError):
    kind = "data_error"
