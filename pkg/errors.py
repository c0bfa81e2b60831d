"""
Error hierarchy for the kitbash assembler.
Every error carries the process exit code the CLI reports for it.
"""

from typing import List, Optional


class KitbashError(Exception):
    """Base class for all assembler errors"""

    exit_code = 1

    def with_context(self, context: str) -> "KitbashError":
        """Return a copy of this error with a context prefix (e.g. a part id)"""
        err = self.__class__.__new__(self.__class__)
        err.__dict__.update(self.__dict__)
        err.args = (f"{context}: {self}",)
        return err


# ===== VALIDATION (exit 2) =====

class ValidationError(KitbashError):
    exit_code = 2


class SchemaError(ValidationError):
    pass


class ParseError(ValidationError):
    """Malformed input file; line/column or field path when known"""

    def __init__(self, message: str, line: Optional[int] = None,
                 column: Optional[int] = None, field: Optional[str] = None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if column is not None:
            location.append(f"column {column}")
        if field:
            location.append(f"field '{field}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.line = line
        self.column = column
        self.field = field


class InvalidMesh(ValidationError):
    pass


class DofMismatch(ValidationError):
    pass


class LimitViolation(ValidationError):
    pass


class MissingJointValue(ValidationError):
    pass


class MissingSourceParent(ValidationError):
    pass


class NoDofOnChain(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class TreeError(SchemaError):
    """Kinematic tree failed validation"""

    def __init__(self, diagnostics: List[str]):
        super().__init__("invalid kinematic tree: " + "; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


# ===== SOLVER (exit 3) =====

class SolverError(KitbashError):
    exit_code = 3


class AngleNearPi(SolverError):
    pass


class SingularSystem(SolverError):
    pass


class AllWeightsZero(SolverError):
    pass


class NoGroundContact(SolverError):
    pass


# ===== I/O (exit 4) =====

class IoError(KitbashError):
    exit_code = 4


class MissingFile(IoError):
    def __init__(self, path):
        super().__init__(f"file not found: {path}")
        self.path = str(path)
