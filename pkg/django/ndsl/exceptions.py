from core.exceptions import InvalidInputError


class LossShapeError(InvalidInputError):
    pass


class LossConfigError(InvalidInputError):
    pass


class DatasetError(InvalidInputError):
    pass
