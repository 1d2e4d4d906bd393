"""
Expression Service
Turns problem-file expressions over the real coordinates x1 … x{2n} into grid
fields, and builds the named metrics from them.
"""
from functools import lru_cache
import logging

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import parse_expr, standard_transformations

from app.core.exceptions import ConfigError
from app.schemas.geometry import GridDomain, HermitianMetricField
from app.services import field_io
from app.services.geometry_service import GeometryService

logger = logging.getLogger(__name__)

FILE_PREFIX = "file:"

_FUNCTIONS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
    "pi": sp.pi,
}


def coordinate_symbols(n: int):
    """x1 … x{2n}; x_{2j+1} + i·x_{2j+2} is the j-th complex coordinate (0-based j)."""
    return sp.symbols(f"x1:{2 * n + 1}", real=True)


@lru_cache(maxsize=128)
def parse(text: str, n: int) -> sp.Expr:
    symbols = coordinate_symbols(n)
    local = {str(s): s for s in symbols}
    local.update(_FUNCTIONS)
    try:
        expr = parse_expr(text, local_dict=local, transformations=standard_transformations)
    except (SyntaxError, TypeError, sp.SympifyError) as e:
        raise ConfigError(f"cannot parse expression '{text}': {e}")
    unknown = expr.free_symbols - set(symbols)
    if unknown:
        names = ", ".join(sorted(str(s) for s in unknown))
        raise ConfigError(f"expression '{text}' uses unknown symbols: {names}")
    return expr


def evaluate(expr: sp.Expr, domain: GridDomain) -> np.ndarray:
    """Sample a real expression on the grid of ``domain``."""
    symbols = coordinate_symbols(domain.n)
    for index, symbol in enumerate(symbols):
        if symbol in expr.free_symbols and domain.axis_of(index) is None:
            raise ConfigError(
                f"expression depends on {symbol}, which is not an active coordinate"
            )
    func = sp.lambdify(symbols, expr, modules="numpy")
    values = func(*(domain.coordinate(c) for c in range(2 * domain.n)))
    values = np.broadcast_to(np.asarray(values), domain.shape)
    if np.iscomplexobj(values):
        if np.max(np.abs(values.imag)) > 0:
            raise ConfigError("expression is not real-valued on the grid")
        values = values.real
    return np.array(values, dtype=float)


def scalar_field(source: str, domain: GridDomain) -> np.ndarray:
    """A sympy expression or ``file:path.npz``."""
    source = source.strip()
    if source.startswith(FILE_PREFIX):
        return field_io.load_scalar(source[len(FILE_PREFIX):], domain)
    return evaluate(parse(source, domain.n), domain)


# ============================================
# Named metrics
# ============================================

def build_metric(geometry: GeometryService, kind: str, expr: str = "0") -> HermitianMetricField:
    """flat | kahler_perturbed(ρ) | balanced_root(f) | conformal(f) | file:path.npz."""
    if kind.startswith(FILE_PREFIX):
        metric = field_io.load_metric(kind[len(FILE_PREFIX):])
        if metric.domain != geometry.domain:
            raise ConfigError(f"metric file {kind} was written on a different grid")
        return metric
    builders = {
        "flat": lambda f: geometry.flat_metric(),
        "kahler_perturbed": geometry.kahler_perturbed,
        "balanced_root": geometry.balanced_root,
        "conformal": geometry.conformal,
    }
    if kind not in builders:
        raise ConfigError(f"unknown metric kind '{kind}'", key="metric")
    values = scalar_field(expr, geometry.domain)
    logger.info(f"Building {kind} metric on a {geometry.domain.shape} grid")
    return builders[kind](values)


def sympy_wirtinger(expr: sp.Expr, n: int, j: int, conjugate: bool = False) -> sp.Expr:
    """Symbolic ∂_j (or ∂_j̄) of an expression in the real coordinates."""
    symbols = coordinate_symbols(n)
    x, y = symbols[2 * j], symbols[2 * j + 1]
    sign = 1 if conjugate else -1
    return (sp.diff(expr, x) + sign * sp.I * sp.diff(expr, y)) / 2


def sympy_complex_hessian(expr: sp.Expr, n: int) -> sp.Matrix:
    """H[j, k] = ∂_j ∂_k̄ expr."""
    return sp.Matrix(
        n, n,
        lambda j, k: sympy_wirtinger(sympy_wirtinger(expr, n, k, conjugate=True), n, j),
    )


def evaluate_matrix(matrix: sp.Matrix, domain: GridDomain) -> np.ndarray:
    """Sample a symbolic matrix entrywise; the result has shape grid + (n, n)."""
    symbols = coordinate_symbols(domain.n)
    coords = [domain.coordinate(c) for c in range(2 * domain.n)]
    rows, cols = matrix.shape
    out = np.zeros(domain.shape + (rows, cols), dtype=complex)
    for j in range(rows):
        for k in range(cols):
            entry = sp.lambdify(symbols, matrix[j, k], modules="numpy")(*coords)
            out[..., j, k] = np.broadcast_to(entry, domain.shape)
    return out
