class DBPFError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ConfigError(DBPFError, ValueError):
    exit_code = 2

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class SolverError(DBPFError):
    """A linear solve hit its iteration cap (or broke down) above tolerance."""

    exit_code = 3

    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        # filled in by the time loop so callers keep what was computed before the failure
        self.partial_record = None
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")


class AcceptanceError(DBPFError):
    exit_code = 4


class SnapshotFormatError(DBPFError):
    pass


class GridMismatchError(DBPFError, ValueError):
    pass


class NoJunctionError(DBPFError):
    pass


class DegenerateFitError(DBPFError):
    pass
