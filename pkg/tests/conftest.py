"""
Shared fixtures: grid domains, test metrics and seeded generators.
"""
import numpy as np
import pytest

from app.core.config import settings
from app.schemas.geometry import GridDomain
from app.services.geodesic_service import GeodesicService
from app.services.geometry_service import GeometryService

BALANCED_AMPLITUDE = 0.01


@pytest.fixture
def line_domain() -> GridDomain:
    """n = 3, fields depend on Re z_0 only."""
    return GridDomain(n=3, periods=1.0, resolution=8, active_coords=(0,))


@pytest.fixture
def plane_domain() -> GridDomain:
    """n = 3, fields depend on Re z_0 and Re z_1."""
    return GridDomain(n=3, periods=1.0, resolution=16, active_coords=(0, 2))


@pytest.fixture
def line_geometry(line_domain) -> GeometryService:
    return GeometryService(line_domain)


@pytest.fixture
def plane_geometry(plane_domain) -> GeometryService:
    return GeometryService(plane_domain)


@pytest.fixture
def line_geodesic(line_geometry) -> GeodesicService:
    return GeodesicService(line_geometry)


@pytest.fixture
def balanced_metric(plane_geometry):
    """Non-Kähler balanced metric built from f = a·cos(2πx₀)·cos(2πx₂)."""
    domain = plane_geometry.domain
    f = BALANCED_AMPLITUDE * np.cos(2 * np.pi * domain.coordinate(0)) * np.cos(2 * np.pi * domain.coordinate(2))
    return plane_geometry.balanced_root(f)


@pytest.fixture
def conformal_metric(line_geometry):
    domain = line_geometry.domain
    return line_geometry.conformal(0.1 * np.cos(2 * np.pi * domain.coordinate(0)))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_samples(monkeypatch):
    """Shrink the sampled verification suites."""
    monkeypatch.setattr(settings, "CONCAVITY_SAMPLES", 300)
    monkeypatch.setattr(settings, "PLURISUB_SAMPLES", 300)
    monkeypatch.setattr(settings, "GAP_SAMPLES", 100)
    monkeypatch.setattr(settings, "ENERGY_PROBE_SAMPLES", 3)
