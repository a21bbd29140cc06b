class SkipEpisode(RuntimeError):
    pass


class ViewgenError(ValueError):
    pass


class ConfigError(ViewgenError):
    def __init__(self, message, issues=None):
        super().__init__(message)
        self.issues = issues or []


class InvalidSpecError(ViewgenError):
    pass


class EpisodeDoneError(ViewgenError):
    pass


class DegeneratePoseError(ViewgenError):
    pass


class ShapeMismatchError(ViewgenError):
    pass


class NonInvertibleHomographyError(ViewgenError):
    pass


class ObjectiveError(ViewgenError):
    pass


class EmptyBufferError(ViewgenError):
    pass


class NonFiniteLossError(ViewgenError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointMismatchError(ViewgenError):
    pass


class MissingStateError(ViewgenError):
    pass


class ViewError(ViewgenError):
    pass
