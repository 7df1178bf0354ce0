from core.exceptions import InvalidInputError, MissingDependencyError


class RunConfigError(InvalidInputError):
    """
    A run configuration value is invalid; field is the dotted config path at fault
    """

    def __init__(self, field, message):
        super().__init__(f'{field}: {message}')
        self.field = field


class OutputExistsError(InvalidInputError):
    pass


class ConfigHashMismatchError(InvalidInputError):
    pass


class OverlayLevelMismatchError(InvalidInputError):
    pass


class DatasetMissingError(MissingDependencyError):

    def __init__(self, message):
        super().__init__(message, producer='synth')


class TracesMissingError(MissingDependencyError):

    def __init__(self, message):
        super().__init__(message, producer='navigate')
