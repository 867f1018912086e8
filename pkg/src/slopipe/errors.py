"""Exception types raised across the package."""


class SlopipeError(Exception):
    pass


# kvs
class PoolExists(SlopipeError):
    pass


class NoSuchPool(SlopipeError):
    pass


class TooOld(SlopipeError):
    pass


class BadRoute(SlopipeError):
    pass


class NoWorker(SlopipeError):
    pass


class NotFound(SlopipeError):
    pass


class NotStable(SlopipeError):
    """A read could only be served from unstable data and the wait timed out."""


class BadRange(SlopipeError):
    pass


class NoSuchHandler(SlopipeError):
    pass


# runtime
class AlreadyRegistered(SlopipeError):
    pass


class NotADag(SlopipeError):
    pass


class Unschedulable(SlopipeError):
    pass


class NoSuchPipeline(SlopipeError):
    pass


class DuplicateInput(SlopipeError):
    pass


class IncastTimeout(SlopipeError):
    pass


class DrainTimeout(SlopipeError):
    def __init__(self, remaining: int):
        super().__init__(f"{remaining} queries still in flight")
        self.remaining = remaining


# executor
class NoProfile(SlopipeError):
    pass


class ColdInstance(SlopipeError):
    pass


class OutOfMemory(SlopipeError):
    pass


class BadLayout(SlopipeError):
    pass


class NodeBusy(SlopipeError):
    pass


# planner
class Infeasible(SlopipeError):
    def __init__(self, msg: str, violations=()):
        super().__init__(msg)
        self.violations = list(violations)


# elasticity
class BadTransition(SlopipeError):
    pass


# bench
class NoData(SlopipeError):
    pass


class IoError(SlopipeError, OSError):
    pass


class ConfigError(SlopipeError):
    pass
