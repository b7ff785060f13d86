"""Exception types raised by the package."""


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration (domain spec, flags, presets)."""


class MeshError(Exception):
    """Invalid mesh topology or geometry."""


class MeshFormatError(MeshError):
    """Malformed mesh file; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RefinementError(MeshError):
    """Bisection closure failed to terminate within its work bound."""


class HierarchyError(MeshError):
    """A mesh appended to a hierarchy is not nested in the finest level."""


class AssemblyError(Exception):
    """Element matrices could not be assembled (degenerate element)."""


class ProjectionError(Exception):
    """An inner solve of the divergence projection failed to converge."""


class ShiftTooLargeError(Exception):
    """A shifted smoother diagonal is nonpositive: the coarse mesh is too
    coarse for the requested shift."""

    def __init__(self, message, level=None, edge=None):
        super().__init__(message)
        self.level = level
        self.edge = edge


class PreconditionerError(Exception):
    """Coarse-level solve inside the multilevel preconditioner failed."""


class SolverError(Exception):
    """Eigensolver failure (breakdown, invalid state)."""


class NonConvergenceError(SolverError):
    """Outer iteration hit its iteration cap; carries the history so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []
