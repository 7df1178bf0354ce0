from core.exceptions import BackendFailureError, InvalidInputError


class ActionParseError(InvalidInputError):
    """
    A backend reply does not follow the action grammar or names an impossible action
    """
    pass


class MemoryConsistencyError(InvalidInputError):
    pass


class PartitionError(InvalidInputError):
    pass


class TraceFormatError(InvalidInputError):
    pass


class BackendConfigError(InvalidInputError):
    pass


class BackendTransportError(BackendFailureError):
    pass
