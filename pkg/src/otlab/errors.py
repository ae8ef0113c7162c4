"""Exception hierarchy shared by all otlab modules."""


class OTLabError(Exception):
    """Base class. ``exit_code`` is what the CLI returns when it escapes."""

    exit_code = 1

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self)}


class InputError(OTLabError):
    exit_code = 2


class EmptyRestriction(OTLabError):
    pass


class MassMismatch(InputError):
    pass


class ProblemTooLarge(OTLabError):
    pass


class ConvergenceFailure(OTLabError):
    def __init__(self, message, defect=None):
        super().__init__(message)
        self.defect = defect


class IncompatibleData(OTLabError):
    pass


class SolverFailure(OTLabError):
    pass


class FitDegenerate(OTLabError):
    pass


class NotSymmetric(OTLabError):
    pass


class DomainExceeded(OTLabError):
    pass


class SmallnessViolated(OTLabError):
    def __init__(self, message, quantity=None):
        super().__init__(message)
        self.quantity = quantity


class InsufficientTrace(OTLabError):
    pass


class ConfigError(InputError):
    pass
