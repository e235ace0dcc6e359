"""Exception hierarchy shared across the toolkit.

Data errors (bad input files, invalid networks) and numeric errors (solver
failures) are kept apart so the command line can map them to distinct exit
codes.
"""
from __future__ import annotations


class DataError(ValueError):
    """Input data is malformed or violates a model invariant."""


class NumericError(RuntimeError):
    """A numerical procedure failed to produce a result."""


class CaseSyntaxError(DataError):
    def __init__(self, line: int, column: int, msg: str = "invalid JSON"):
        self.line = line
        self.column = column
        super().__init__(f"{msg} at line {line}, column {column}")


class SchemaError(DataError):
    def __init__(self, table: str, row: int | None, reason: str):
        self.table = table
        self.row = row
        self.reason = reason
        where = table if row is None else f"{table}[{row}]"
        super().__init__(f"{where}: {reason}")


class NoSlack(DataError):
    def __init__(self):
        super().__init__("case has no slack bus")


class GenOnMissingBus(DataError):
    def __init__(self, bus: int):
        self.bus = bus
        super().__init__(f"generator attached to missing bus {bus}")


class UnsupportedElement(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class SingularBranch(DataError):
    def __init__(self, branch: int):
        self.branch = branch
        super().__init__(f"branch {branch} has zero impedance")


class ComponentWithoutSlack(DataError):
    def __init__(self, component: int):
        self.component = component
        super().__init__(f"connected component {component} has no slack bus")


class InvalidNetwork(DataError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid network: " + ", ".join(map(str, self.violations)))


class ManifestMissing(DataError):
    pass


class CountMismatch(DataError):
    def __init__(self, expected: int, found: int):
        self.expected = expected
        self.found = found
        super().__init__(f"manifest declares {expected} cases, found {found}")


class EmptyBatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class GenerationStalled(NumericError):
    def __init__(self, attempts: int, accepted: int):
        self.attempts = attempts
        self.accepted = accepted
        super().__init__(
            f"acceptance rate below 1% ({accepted} of last {attempts} attempts)"
        )


class Diverged(NumericError):
    def __init__(self, iterations: int, final_mismatch: float):
        self.iterations = iterations
        self.final_mismatch = final_mismatch
        super().__init__(
            f"Newton-Raphson diverged after {iterations} iterations "
            f"(mismatch {final_mismatch:.3e})"
        )


class SingularJacobian(NumericError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"singular Jacobian at iteration {iteration}")
