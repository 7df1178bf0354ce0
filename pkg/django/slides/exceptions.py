from core.exceptions import InvalidInputError


class LevelNotFoundError(InvalidInputError):
    pass


class SynthConfigError(InvalidInputError):
    """
    A synthetic slide configuration is invalid; field is the dotted config path at fault
    """

    def __init__(self, field, message):
        super().__init__(f'{field}: {message}')
        self.field = field


class PyramidValidationError(InvalidInputError):
    pass


class ManifestMissingError(PyramidValidationError):
    pass


class DimensionMismatchError(PyramidValidationError):
    pass


class ValueRangeError(PyramidValidationError):
    pass
