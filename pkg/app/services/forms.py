"""
Coefficient algebra for complex differential forms on grid domains.

A (p,q)-form is stored on ordered multi-indices (see ComplexForm). Signs
come from sorting the concatenated index lists, so every identity of the
exterior algebra holds exactly up to floating point roundoff.
"""
from functools import lru_cache
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import DegreeOverflow, InvalidDegree
from app.schemas.geometry import ComplexForm, FormKey, GridDomain
from app.services.spectral import Differentiator


def sort_with_sign(indices: Sequence[int]) -> Tuple[int, Optional[Tuple[int, ...]]]:
    """Sort ``indices`` and return (permutation sign, sorted tuple).

    A repeated index gives sign 0.
    """
    items = list(indices)
    if len(set(items)) != len(items):
        return 0, None
    sign = 1
    # insertion sort counting transpositions
    for i in range(1, len(items)):
        j = i
        while j > 0 and items[j - 1] > items[j]:
            items[j - 1], items[j] = items[j], items[j - 1]
            sign = -sign
            j -= 1
    return sign, tuple(items)


def _accumulate(out: Dict[FormKey, np.ndarray], key: FormKey, value: np.ndarray) -> None:
    if key in out:
        out[key] = out[key] + value
    else:
        out[key] = value


# ============================================
# Constructors
# ============================================

def zero_form(domain: GridDomain, p: int, q: int) -> ComplexForm:
    return ComplexForm(domain=domain, p=p, q=q, coeffs={})


def scalar_form(domain: GridDomain, f) -> ComplexForm:
    """The (0,0)-form with coefficient ``f`` (scalar or field)."""
    values = np.broadcast_to(np.asarray(f, dtype=complex), domain.shape).copy()
    return ComplexForm(domain=domain, p=0, q=0, coeffs={((), ()): values})


def form_from_matrix(domain: GridDomain, b: np.ndarray) -> ComplexForm:
    """(1,1)-form i Σ b_{jk̄} dz^j∧dz̄^k from a matrix field b[..., j, k]."""
    n = domain.n
    b = np.broadcast_to(np.asarray(b, dtype=complex), domain.shape + (n, n))
    coeffs = {}
    for j in range(n):
        for k in range(n):
            c = 1j * b[..., j, k]
            if np.any(c != 0):
                coeffs[((j,), (k,))] = np.array(c)
    return ComplexForm(domain=domain, p=1, q=1, coeffs=coeffs)


def matrix_from_form(beta: ComplexForm) -> np.ndarray:
    """Inverse of form_from_matrix."""
    if beta.bidegree != (1, 1):
        raise InvalidDegree(f"expected a (1,1)-form, got {beta.bidegree}")
    n = beta.domain.n
    b = np.zeros(beta.domain.shape + (n, n), dtype=complex)
    for ((j,), (k,)), c in beta.coeffs.items():
        b[..., j, k] = -1j * c
    return b


def basis_11(domain: GridDomain, j: int, k: int) -> ComplexForm:
    """i dz^j ∧ dz̄^k with unit coefficient."""
    return ComplexForm(
        domain=domain, p=1, q=1,
        coeffs={((j,), (k,)): np.full(domain.shape, 1j, dtype=complex)},
    )


# ============================================
# Products
# ============================================

def wedge(a: ComplexForm, b: ComplexForm) -> ComplexForm:
    """Exterior product of coefficient fields."""
    if a.domain != b.domain:
        raise ValueError("forms live on different domains")
    n = a.domain.n
    if a.degree + b.degree > 2 * n:
        raise DegreeOverflow(
            f"wedge of degrees {a.degree} and {b.degree} exceeds real dimension {2 * n}"
        )
    p, q = a.p + b.p, a.q + b.q
    out: Dict[FormKey, np.ndarray] = {}
    if p <= n and q <= n:
        # moving dz^K past dz̄^J
        swap = (-1) ** (a.q * b.p)
        for (I, J), ca in a.coeffs.items():
            for (K, L), cb in b.coeffs.items():
                s1, holo = sort_with_sign(I + K)
                if s1 == 0:
                    continue
                s2, anti = sort_with_sign(J + L)
                if s2 == 0:
                    continue
                _accumulate(out, (holo, anti), (swap * s1 * s2) * ca * cb)
    return ComplexForm(domain=a.domain, p=p, q=q, coeffs=out)


def wedge_all(forms: Iterable[ComplexForm]) -> ComplexForm:
    forms = list(forms)
    result = forms[0]
    for f in forms[1:]:
        result = wedge(result, f)
    return result


def power(omega: ComplexForm, k: int) -> ComplexForm:
    """k-th wedge power; the 0-th power is the constant 1."""
    if k < 0:
        raise InvalidDegree(f"negative power {k}")
    result = scalar_form(omega.domain, 1.0)
    for _ in range(k):
        result = wedge(result, omega)
    return result


@lru_cache(maxsize=None)
def _volume_sign(n: int) -> complex:
    # coefficient of Π_j (i dz^j∧dz̄^j) on dz^{1…n}∧dz̄^{1…n}
    return (1j ** n) * (-1) ** (n * (n - 1) // 2)


def standard_volume(domain: GridDomain) -> ComplexForm:
    """vol₀ = Π_j (i dz^j ∧ dz̄^j)."""
    full = tuple(range(domain.n))
    return ComplexForm(
        domain=domain, p=domain.n, q=domain.n,
        coeffs={(full, full): np.full(domain.shape, _volume_sign(domain.n), dtype=complex)},
    )


def top_ratio(form: ComplexForm) -> np.ndarray:
    """Coefficient of an (n,n)-form relative to vol₀."""
    n = form.domain.n
    if form.bidegree != (n, n):
        raise InvalidDegree(f"expected an ({n},{n})-form, got {form.bidegree}")
    full = tuple(range(n))
    return form.component(full, full) / _volume_sign(n)


def pairing_matrix(Q: ComplexForm) -> np.ndarray:
    """M[..., k, j] = (Q ∧ i dz^j∧dz̄^k) / vol₀ for an (n−1,n−1)-form Q."""
    domain = Q.domain
    n = domain.n
    if Q.bidegree != (n - 1, n - 1):
        raise InvalidDegree(f"expected an ({n - 1},{n - 1})-form, got {Q.bidegree}")
    M = np.zeros(domain.shape + (n, n), dtype=complex)
    for j in range(n):
        for k in range(n):
            M[..., k, j] = top_ratio(wedge(Q, basis_11(domain, j, k)))
    return M


# ============================================
# Exterior derivatives
# ============================================

def del_(f: ComplexForm, diff: Differentiator) -> ComplexForm:
    """∂f: raises the holomorphic degree by one."""
    n = f.domain.n
    out: Dict[FormKey, np.ndarray] = {}
    if f.p + 1 <= n:
        for (I, J), c in f.coeffs.items():
            for k in range(n):
                sign, holo = sort_with_sign((k,) + I)
                if sign == 0:
                    continue
                dc = diff.dz(c, k)
                if np.any(dc != 0):
                    _accumulate(out, (holo, J), sign * dc)
    return ComplexForm(domain=f.domain, p=f.p + 1, q=f.q, coeffs=out)


def dbar(f: ComplexForm, diff: Differentiator) -> ComplexForm:
    """∂̄f: raises the antiholomorphic degree by one."""
    n = f.domain.n
    out: Dict[FormKey, np.ndarray] = {}
    if f.q + 1 <= n:
        # dz̄^k moves past the p holomorphic differentials
        base = (-1) ** f.p
        for (I, J), c in f.coeffs.items():
            for k in range(n):
                sign, anti = sort_with_sign((k,) + J)
                if sign == 0:
                    continue
                dc = diff.dzbar(c, k)
                if np.any(dc != 0):
                    _accumulate(out, (I, anti), (base * sign) * dc)
    return ComplexForm(domain=f.domain, p=f.p, q=f.q + 1, coeffs=out)


def i_ddbar(f: ComplexForm, diff: Differentiator) -> ComplexForm:
    """i∂∂̄f."""
    return 1j * del_(dbar(f, diff), diff)


def reality_residual(form: ComplexForm) -> float:
    """sup |form − conj(form)| for a (k,k)-form expected to be real."""
    return (form - form.conjugate()).sup_norm()
