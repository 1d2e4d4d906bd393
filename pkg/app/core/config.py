"""
Core configuration settings for the lab.
Loads environment variables and provides typed settings.
"""
from typing import Any, Dict, Optional
from pydantic_settings import BaseSettings, SettingsConfigDict
from pathlib import Path

# Get the directory where this config file is located
BASE_DIR = Path(__file__).resolve().parent.parent.parent
ENV_FILE = BASE_DIR / ".env"

ENV_PREFIX = "BALANCED_LAB_"


class Settings(BaseSettings):
    """Lab settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=str(ENV_FILE),
        env_prefix=ENV_PREFIX,
        case_sensitive=True,
        extra="ignore",
        env_ignore_empty=True,
    )

    # Application
    APP_NAME: str = "Balanced Geometry Lab"
    APP_VERSION: str = "1.0.0"
    ENVIRONMENT: str = "development"
    REPORT_SCHEMA_VERSION: int = 1

    # Run defaults (None means "not set in the environment")
    SEED: Optional[int] = None
    TOL: Optional[float] = None
    THREADS: Optional[int] = None
    OUT_DIR: Optional[str] = None

    # Newton / continuity
    NEWTON_MAX_ITER: int = 50
    NEWTON_TOL: float = 1e-9
    LINE_SEARCH_MIN_STEP: float = 2.0 ** -20
    CONE_FRACTION: float = 0.1
    ARMIJO_C: float = 1e-4
    S_INITIAL_STEP: float = 0.1
    S_MIN_STEP: float = 1e-6

    # Geometry tolerances
    ALGEBRAIC_TOL: float = 1e-12
    BALANCED_TOL: float = 1e-8
    BARRIER_MIN_A: float = 1e-6

    # Verification sampling
    CONCAVITY_SAMPLES: int = 10_000
    PLURISUB_SAMPLES: int = 10_000
    GAP_SAMPLES: int = 1_000
    ENERGY_PROBE_SAMPLES: int = 20
    SWEEP_DRIFT_BUDGET: float = 0.2

    # Celery
    CELERY_BROKER_URL: str = "redis://localhost:6379/1"
    CELERY_RESULT_BACKEND: str = "redis://localhost:6379/2"
    SWEEP_BACKEND: str = "local"

    # Logging
    LOG_LEVEL: str = "INFO"

    @property
    def numerics_defaults(self) -> Dict[str, Any]:
        """Return the solver defaults as keyword arguments."""
        return {
            "max_iter": self.NEWTON_MAX_ITER,
            "tol": self.NEWTON_TOL,
            "min_step": self.LINE_SEARCH_MIN_STEP,
            "cone_fraction": self.CONE_FRACTION,
            "armijo_c": self.ARMIJO_C,
        }


# Create global settings instance
settings = Settings()
