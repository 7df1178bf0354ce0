from core.exceptions import InvalidInputError


class EmptyBagError(InvalidInputError):
    pass


class SingleClassError(InvalidInputError):
    pass


class BudgetError(InvalidInputError):
    pass


class ClassifierConfigError(InvalidInputError):
    pass
