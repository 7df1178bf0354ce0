from core.exceptions import InvalidInputError


class NumericInputError(InvalidInputError):
    pass


class McfnConfigurationError(InvalidInputError):
    pass


class ResampleError(InvalidInputError):
    pass


class DimensionError(InvalidInputError):
    pass
