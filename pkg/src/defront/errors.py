"""Exception hierarchy shared by all modules."""


class DefrontError(Exception):
    """Base class for every error raised by this package."""


class DegenerateInput(DefrontError, ValueError):
    pass


class MissingLandmark(DefrontError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class InvalidState(DefrontError, RuntimeError):
    pass


class ShapeMismatch(DefrontError, ValueError):
    pass


class UnknownTap(DefrontError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class LabelOutOfRange(DefrontError, IndexError):
    pass


class ParseError(DefrontError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class MissingFile(DefrontError, FileNotFoundError):
    pass


class IOFailure(DefrontError, OSError):
    pass


class DetectorError(DefrontError):
    retriable = False


class DetectorTimeout(DetectorError, TimeoutError):
    retriable = True


class AuthFailure(DetectorError):
    retriable = False


class DetectorMiss(DetectorError):
    retriable = False


class EmptyInput(DefrontError, ValueError):
    pass


class InfeasibleTarget(DefrontError, ValueError):
    pass


class ModelNotLoaded(DefrontError, RuntimeError):
    pass


class PolicyUncalibrated(DefrontError, RuntimeError):
    pass


class DataEmpty(DefrontError, ValueError):
    pass


class NonFiniteLoss(DefrontError, FloatingPointError):
    def __init__(self, message, step=None, components=None):
        self.step = step
        self.components = components or {}
        super().__init__(message)


class CheckpointIOFailure(DefrontError, OSError):
    pass


class EmbeddingFailure(DefrontError, RuntimeError):
    def __init__(self, path, cause=None):
        self.path = path
        super().__init__(f"could not embed {path}: {cause}")


class DuplicateGalleryIdentity(DefrontError, ValueError):
    pass


class EmptyBin(DefrontError, ValueError):
    pass


class PipelineLoadFailure(DefrontError, RuntimeError):
    pass


class MissingAnnotation(DefrontError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigInvalid(DefrontError, ValueError):
    pass


class InputMissing(DefrontError, FileNotFoundError):
    pass
