"""
Base error hierarchy shared by every app in the project.

Each app declares its own exceptions (in its exceptions.py) by subclassing one of these.
The exit_code is what the management commands return when the error reaches them.
"""


class NavigatorError(Exception):
    exit_code = 1


class InvalidInputError(NavigatorError):
    """
    Bad configuration, malformed files or inputs that break a documented invariant
    """
    exit_code = 2


class MissingDependencyError(NavigatorError):
    """
    An upstream artifact (dataset, checkpoint, traces) is missing
    """
    exit_code = 3

    def __init__(self, message, producer=None):
        if producer:
            message = f'{message} (produce it with `manage.py {producer}`)'
        super().__init__(message)
        self.producer = producer


class BackendFailureError(NavigatorError):
    """
    An encoder or decision backend failed in a way the caller cannot repair
    """
    exit_code = 4
