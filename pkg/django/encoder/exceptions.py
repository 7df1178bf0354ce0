from core.exceptions import BackendFailureError, InvalidInputError


class EncoderSpecError(InvalidInputError):
    pass


class EncoderBackendError(BackendFailureError):
    pass
