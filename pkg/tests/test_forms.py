from itertools import combinations
from math import factorial

import numpy as np
import pytest

from app.core.exceptions import DegreeOverflow, InvalidDegree
from app.schemas.geometry import ComplexForm, GridDomain
from app.services import forms
from app.services.spectral import Differentiator


@pytest.fixture
def domain():
    return GridDomain(n=3, periods=1.0, resolution=8, active_coords=(0, 1))


def _constant_metric(domain):
    g = np.array([[2.0, 0.3 + 0.2j, 0.1], [0.3 - 0.2j, 1.5, -0.4j], [0.1, 0.4j, 1.0]])
    return g, np.broadcast_to(g, domain.shape + (3, 3)).copy()


def _one_form(domain, j, holomorphic=True):
    ones = np.ones(domain.shape, dtype=complex)
    key = ((j,), ()) if holomorphic else ((), (j,))
    return ComplexForm(domain=domain, p=1 if holomorphic else 0, q=0 if holomorphic else 1, coeffs={key: ones})


@pytest.mark.parametrize("indices,sign,ordered", [
    ((0, 1, 2), 1, (0, 1, 2)),
    ((1, 0, 2), -1, (0, 1, 2)),
    ((2, 0, 1), 1, (0, 1, 2)),
    ((1, 1), 0, None),
])
def test_sort_with_sign(indices, sign, ordered):
    assert forms.sort_with_sign(indices) == (sign, ordered)


def test_wedge_is_antisymmetric_on_one_forms(domain):
    a, b = _one_form(domain, 0), _one_form(domain, 2)
    ab = forms.wedge(a, b)
    ba = forms.wedge(b, a)
    assert (ab + ba).sup_norm() == 0.0
    assert forms.wedge(a, a).sup_norm() == 0.0


def test_top_power_is_factorial_times_determinant(domain):
    g, field = _constant_metric(domain)
    omega = forms.form_from_matrix(domain, field)
    top = forms.top_ratio(forms.power(omega, 3))
    assert np.allclose(top, factorial(3) * np.linalg.det(g), atol=1e-12)


def test_pairing_matrix_of_normalized_power(domain):
    g, field = _constant_metric(domain)
    omega = forms.form_from_matrix(domain, field)
    Q = forms.power(omega, 2) * (1.0 / 2)
    M = forms.pairing_matrix(Q)
    expected = np.linalg.det(g) * np.linalg.inv(g)
    assert np.allclose(M, expected, atol=1e-12)


def test_matrix_round_trip(domain):
    _, field = _constant_metric(domain)
    assert np.allclose(forms.matrix_from_form(forms.form_from_matrix(domain, field)), field)


def test_real_metric_form_has_no_reality_residual(domain):
    _, field = _constant_metric(domain)
    omega = forms.form_from_matrix(domain, field)
    assert forms.reality_residual(omega) < 1e-14
    assert forms.reality_residual(forms.power(omega, 2)) < 1e-13


def test_degree_overflow(domain):
    volume = forms.standard_volume(domain)
    with pytest.raises(DegreeOverflow):
        forms.wedge(volume, _one_form(domain, 0))


def test_top_ratio_rejects_lower_degree(domain):
    with pytest.raises(InvalidDegree):
        forms.top_ratio(forms.scalar_form(domain, 1.0))


def test_d_squared_vanishes(domain):
    diff = Differentiator(domain)
    x, y = domain.coordinate(0), domain.coordinate(1)
    f = forms.scalar_form(domain, np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y))
    assert forms.del_(forms.del_(f, diff), diff).sup_norm() < 1e-12
    assert forms.dbar(forms.dbar(f, diff), diff).sup_norm() < 1e-12
    anticommutator = forms.del_(forms.dbar(f, diff), diff) + forms.dbar(forms.del_(f, diff), diff)
    assert anticommutator.sup_norm() < 1e-10


def test_i_ddbar_matches_complex_hessian(domain):
    diff = Differentiator(domain)
    f = np.sin(2 * np.pi * domain.coordinate(0)) + np.cos(4 * np.pi * domain.coordinate(1))
    form = forms.i_ddbar(forms.scalar_form(domain, f), diff)
    assert np.allclose(forms.matrix_from_form(form), diff.complex_hessian(f), atol=1e-10)


def _random_form(domain, rng, p, q):
    n = domain.n
    coeffs = {
        (I, J): rng.standard_normal(domain.shape) + 1j * rng.standard_normal(domain.shape)
        for I in combinations(range(n), p)
        for J in combinations(range(n), q)
    }
    return ComplexForm(domain=domain, p=p, q=q, coeffs=coeffs)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("degrees", [
    ((1, 0), (0, 1), (1, 1)),
    ((1, 1), (1, 0), (0, 2)),
    ((0, 1), (2, 0), (1, 1)),
])
def test_wedge_is_associative(domain, seed, degrees):
    rng = np.random.default_rng(seed)
    a, b, c = (_random_form(domain, rng, p, q) for p, q in degrees)
    left = forms.wedge(forms.wedge(a, b), c)
    right = forms.wedge(a, forms.wedge(b, c))
    assert (left - right).sup_norm() < 1e-10
    assert left.sup_norm() > 1.0


@pytest.mark.parametrize("first,second", [
    ((1, 1), (1, 1)),
    ((2, 0), (0, 1)),
    ((1, 0), (1, 1)),
    ((0, 1), (2, 1)),
    ((1, 0), (0, 1)),
    ((1, 1), (0, 2)),
])
def test_wedge_is_graded_commutative(domain, rng, first, second):
    a = _random_form(domain, rng, *first)
    b = _random_form(domain, rng, *second)
    sign = (-1) ** (a.degree * b.degree)
    assert (forms.wedge(a, b) - forms.wedge(b, a) * sign).sup_norm() < 1e-12
