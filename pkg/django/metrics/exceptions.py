from core.exceptions import InvalidInputError


class MetricShapeError(InvalidInputError):
    pass


class UndefinedMetricError(InvalidInputError):
    """
    The metric has no value for this input (constant map, zero mass, empty tumour mask)
    """
    pass
