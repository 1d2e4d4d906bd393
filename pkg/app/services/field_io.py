"""
Field I/O Service
Reads and writes metric, form, scalar and space-time fields as .npz files
with a self-describing header, JSON reports and CSV plot tables, and stages
output directories so a failed run never leaves partial artifacts.
"""
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union
import json
import logging
import os
import shutil
import tempfile

import numpy as np
import pandas as pd

from app.core.exceptions import ConfigError
from app.schemas.geodesic import SpaceTimeField
from app.schemas.geometry import ComplexForm, GridDomain, HermitianMetricField

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

KIND_METRIC = "metric"
KIND_FORM = "form"
KIND_SCALAR = "scalar"
KIND_SPACETIME = "spacetime"


# ============================================
# Headers
# ============================================

def _header(domain: GridDomain, bidegree: Tuple[int, int], kind: str) -> Dict[str, np.ndarray]:
    return {
        "n": np.array(domain.n),
        "periods": np.array(domain.periods, dtype=float),
        "active_coords": np.array(domain.active_coords, dtype=int),
        "resolution": np.array(domain.resolution),
        "bidegree": np.array(bidegree, dtype=int),
        "kind": np.array(kind),
    }


def domain_from_header(data) -> GridDomain:
    return GridDomain(
        n=int(data["n"]),
        periods=tuple(float(L) for L in data["periods"]),
        resolution=int(data["resolution"]),
        active_coords=tuple(int(c) for c in data["active_coords"]),
    )


def _open(path: PathLike, kind: str):
    path = Path(path)
    if not path.exists():
        logger.error(f"Field file {path} does not exist")
        raise ConfigError(f"field file {path} does not exist")
    data = np.load(path, allow_pickle=False)
    stored = str(data["kind"]) if "kind" in data else None
    if stored != kind:
        raise ConfigError(f"{path} holds a '{stored}' field, expected '{kind}'")
    return data


def _form_key(I: Sequence[int], J: Sequence[int]) -> str:
    return ",".join(str(i) for i in I) + "|" + ",".join(str(j) for j in J)


def _parse_form_key(key: str) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    left, right = key.split("|")
    to_index = lambda part: tuple(int(i) for i in part.split(",")) if part else ()
    return to_index(left), to_index(right)


# ============================================
# Field files
# ============================================

def save_metric(path: PathLike, metric: HermitianMetricField) -> Path:
    path = Path(path)
    np.savez(path, g=metric.g, **_header(metric.domain, (1, 1), KIND_METRIC))
    return path


def load_metric(path: PathLike) -> HermitianMetricField:
    with _open(path, KIND_METRIC) as data:
        return HermitianMetricField(domain=domain_from_header(data), g=data["g"])


def save_form(path: PathLike, form: ComplexForm) -> Path:
    path = Path(path)
    coeffs = {f"c:{_form_key(I, J)}": c for (I, J), c in form.coeffs.items()}
    np.savez(path, **coeffs, **_header(form.domain, form.bidegree, KIND_FORM))
    return path


def load_form(path: PathLike) -> ComplexForm:
    with _open(path, KIND_FORM) as data:
        p, q = (int(d) for d in data["bidegree"])
        coeffs = {
            _parse_form_key(name[2:]): data[name]
            for name in data.files
            if name.startswith("c:")
        }
        return ComplexForm(domain=domain_from_header(data), p=p, q=q, coeffs=coeffs)


def save_scalar(path: PathLike, domain: GridDomain, values: np.ndarray) -> Path:
    path = Path(path)
    np.savez(path, values=np.asarray(values, dtype=float), **_header(domain, (0, 0), KIND_SCALAR))
    return path


def load_scalar(path: PathLike, domain: Optional[GridDomain] = None) -> np.ndarray:
    """Scalar field values; checked against ``domain`` when given."""
    with _open(path, KIND_SCALAR) as data:
        stored = domain_from_header(data)
        if domain is not None and stored != domain:
            raise ConfigError(f"{path} was written on a different grid")
        return np.array(data["values"], dtype=float)


def save_spacetime(path: PathLike, field: SpaceTimeField) -> Path:
    path = Path(path)
    np.savez(
        path,
        values=field.values,
        phi0=field.phi0,
        phi1=field.phi1,
        **_header(field.domain, (0, 0), KIND_SPACETIME),
    )
    return path


def load_spacetime(path: PathLike) -> SpaceTimeField:
    """Load a space-time field exactly as stored (boundary slices are validated, not repaired)."""
    with _open(path, KIND_SPACETIME) as data:
        try:
            return SpaceTimeField(
                domain=domain_from_header(data),
                values=np.array(data["values"], dtype=float),
                phi0=np.array(data["phi0"], dtype=float),
                phi1=np.array(data["phi1"], dtype=float),
            )
        except ValueError as e:
            logger.error(f"Space-time field {path} is inconsistent: {e}")
            raise ConfigError(f"{path} is not a valid space-time field: {e}")


# ============================================
# Reports and tables
# ============================================

def _default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_default) + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def write_table(path: PathLike, rows: List[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> Path:
    """Plot table as CSV, one row per sweep entry."""
    path = Path(path)
    frame = pd.DataFrame(rows, columns=list(columns) if columns is not None else None)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def read_table(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)


# ============================================
# Atomic output directory
# ============================================

@contextmanager
def atomic_output_dir(target: PathLike) -> Iterator[Path]:
    """Yield a staging directory that replaces ``target`` only if the block completes."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(staging, target)
    logger.info(f"Artifacts written to {target}")
