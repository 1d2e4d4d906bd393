"""
Domain exceptions raised by the lab services.

Every exception carries enough context to be embedded in a JSON report
via ``to_dict()``.
"""
from typing import Any, Dict, Optional, Sequence


class LabError(Exception):
    """Base class for all lab errors."""

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"error": type(self).__name__, "message": self.message}
        for key, value in self.context.items():
            if key in ("iterate",):
                continue
            payload[key] = _jsonable(value)
        return payload


def _jsonable(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


# ============ Configuration ============
class ConfigError(LabError):
    """Problem file could not be turned into a RunConfig."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message, key=key, line=line)
        self.key = key
        self.line = line


class UnknownKey(ConfigError):
    pass


class TypeMismatch(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


# ============ Geometry ============
class GeometryError(LabError):
    """Rejected geometric input."""


class NotPositiveDefinite(GeometryError):
    def __init__(self, message: str, point: Optional[Sequence[int]] = None, min_eigenvalue: Optional[float] = None):
        super().__init__(message, point=point, min_eigenvalue=min_eigenvalue)
        self.point = tuple(point) if point is not None else None
        self.min_eigenvalue = min_eigenvalue


class DegreeOverflow(GeometryError):
    pass


class InvalidDegree(GeometryError):
    pass


class PositivityViolation(LabError):
    """A path left the mixed-volume set."""

    def __init__(self, message: str, point: Optional[Sequence[int]] = None, value: Optional[float] = None):
        super().__init__(message, point=point, value=value)
        self.point = tuple(point) if point is not None else None
        self.value = value


# ============ Solvers ============
class SolverError(LabError):
    """A nonlinear or linear solve did not produce an accepted answer."""

    def __init__(
        self,
        message: str,
        iterate: Any = None,
        point: Optional[Sequence[int]] = None,
        s: Optional[float] = None,
        **context: Any,
    ):
        super().__init__(message, iterate=iterate, point=point, s=s, **context)
        self.iterate = iterate
        self.point = tuple(point) if point is not None else None
        self.s = s


class ConeExit(SolverError):
    pass


class LineSearchFail(SolverError):
    pass


class MaxIterations(SolverError):
    pass


class PathStuck(SolverError):
    pass


class LinearSolveError(SolverError):
    pass


class SearchExhausted(SolverError):
    def __init__(self, message: str, best_margin: float, best_params: Dict[str, float]):
        super().__init__(message, best_margin=best_margin, best_params=best_params)
        self.best_margin = best_margin
        self.best_params = best_params


# ============ Verification ============
class VerificationFailure(LabError):
    """One or more checks reported a failure."""

    def __init__(self, message: str, failures: Sequence[Dict[str, Any]] = (), **context: Any):
        super().__init__(message, failures=list(failures), **context)
        self.failures = list(failures)
