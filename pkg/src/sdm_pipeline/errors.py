"""Exception hierarchy shared across the package."""


class SdmError(Exception):
    """Base class for all package errors."""


class ParseError(SdmError):
    pass


class ValidationError(SdmError):
    pass


class DegenerateInput(SdmError):
    pass


class OutOfBounds(SdmError):
    pass


class MismatchedInput(SdmError):
    pass


class UnsupportedLoop(SdmError):
    def __init__(self, message, loop=None):
        super().__init__(message)
        self.loop = loop


class BadThreshold(SdmError):
    pass


class BackendUnavailable(SdmError):
    pass


class BackendError(SdmError):
    def __init__(self, status, message):
        super().__init__(f"backend error {status}: {message}")
        self.status = status
        self.message = message


class EmptyMask(SdmError):
    pass


class AtlasOverflow(SdmError):
    pass


class SpecError(SdmError):
    pass


class MissingOutput(SdmError):
    pass


class RefusesFurnished(SdmError):
    pass


class StageFailure(SdmError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
