"""Exception hierarchy shared by all eigeniris modules."""


class EigenIrisError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(EigenIrisError, ValueError):
    pass


class ImageIOError(EigenIrisError, OSError):
    pass


class MissingFileError(ImageIOError, FileNotFoundError):
    pass


class MalformedFileError(ImageIOError):
    pass


class UnsupportedFormatError(ImageIOError):
    """Raised for unknown magic numbers or unsupported bit depths."""


class NumericalError(EigenIrisError, ArithmeticError):
    pass


class InvalidAnnotationError(EigenIrisError, ValueError):
    pass


class AnnotationParseError(EigenIrisError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FusionTrainingError(EigenIrisError, RuntimeError):
    def __init__(self, message, iterations=None, grad_norm=None):
        self.iterations = iterations
        self.grad_norm = grad_norm
        super().__init__(message)


class ConfigError(EigenIrisError, ValueError):
    pass
