"""Exception hierarchy shared across the package."""


class PcdeformError(Exception):
    """Base class for all errors raised by pcdeform."""


class ParameterError(PcdeformError, ValueError):
    pass


class DimensionError(PcdeformError, ValueError):
    pass


class InvalidTransformError(PcdeformError, ValueError):
    pass


class EmptyInputError(PcdeformError, ValueError):
    pass


class InputError(PcdeformError, ValueError):
    pass


class GenerationError(PcdeformError, RuntimeError):
    pass


class StateError(PcdeformError, RuntimeError):
    pass


class BundleFormatError(PcdeformError):
    """A bundle or archive is missing a part or has the wrong structure."""


class BundleParseError(BundleFormatError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class BundleIOError(PcdeformError, OSError):
    pass


class ConfigError(PcdeformError, ValueError):
    pass


class CompatibilityError(PcdeformError):
    pass


class DivergenceError(PcdeformError, RuntimeError):
    def __init__(self, epoch, value):
        self.epoch = epoch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}")
