"""Exception hierarchy shared by every module."""


class DynFilterError(Exception):
    """Base class for all errors raised by this package."""


class InputError(DynFilterError, ValueError):
    """Bad user input: malformed files, invalid parameters, usage errors."""


class ParameterError(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class ValidationError(InputError):
    pass


class DegenerateError(DynFilterError, ValueError):
    """Geometric configuration does not determine the requested quantity."""


class DegeneratePlaneError(DegenerateError):
    pass


class DegenerateFitError(DegenerateError):
    pass


class DegenerateAlignmentError(DegenerateError):
    pass


class BehindCameraError(DegenerateError):
    pass


class InsufficientDataError(DegenerateError):
    pass


class NoPlaneError(DegenerateError):
    pass


class UnderdeterminedError(DegenerateError):
    pass


class NoConvergenceError(DynFilterError, RuntimeError):
    def __init__(self, message, best_pose=None, best_cost=None):
        super().__init__(message)
        self.best_pose = best_pose
        self.best_cost = best_cost


class GenerationError(DynFilterError, RuntimeError):
    pass
