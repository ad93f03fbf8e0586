"""Exception hierarchy.

Each family maps to a CLI exit code: validation problems exit with 2,
infeasible instances with 3 and tripped resource guards with 4.
"""


class RDPolicyError(Exception):
    exit_code = 1


class ValidationError(RDPolicyError, ValueError):
    exit_code = 2


class CycleDetected(ValidationError):
    pass


class Disconnected(ValidationError):
    pass


class BadBounds(ValidationError):
    pass


class EmptyAgentSet(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class MissingColumn(ValidationError, KeyError):
    pass


class SingularCovariance(ValidationError):
    pass


class SingularObservedCovariance(SingularCovariance):
    pass


class Infeasible(RDPolicyError):
    exit_code = 3


class InfeasibleRow(Infeasible):
    def __init__(self, row, message=None):
        self.row = row
        super().__init__(message or f"OPF infeasible at row {row}")


class Unbounded(RDPolicyError):
    pass


class ResourceGuard(RDPolicyError):
    exit_code = 4


class AlphabetExplosion(ResourceGuard):
    def __init__(self, occupied, limit, dims=None):
        self.occupied = occupied
        self.limit = limit
        self.dims = dims
        super().__init__(
            f"joint alphabet has {occupied} occupied cells, guard allows {limit}"
            + (f" ({dims} non-degenerate dimensions)" if dims is not None else "")
        )


class CombinatorialBudgetExceeded(ResourceGuard):
    pass
