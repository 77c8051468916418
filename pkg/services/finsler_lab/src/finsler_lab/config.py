from functools import lru_cache
import os
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Fiber Newton iteration for the inverse Legendre map
    NEWTON_DAMPING: float = 0.5
    NEWTON_MAX_ITER: int = 50
    NEWTON_TOL: float = 1e-10

    # Curvature and operator thresholds
    TOL_S: float = 1e-9
    CRITICAL_DU: float = 1e-10
    GEODESIC_FD_STEP: float = 1e-3
    MISALIGNMENT_DIRS: int = 256
    MISALIGNMENT_POINTS: int = 5
    CURVATURE_SCAN_SAMPLES: int = 64
    BALL_SAMPLE_ROUNDS: int = 20

    # Path optimisation
    PATH_CONTROL_POINTS: int = 20
    PATH_RESTARTS: int = 8
    PATH_PERTURBATION: float = 0.15
    PATH_GTOL: float = 1e-12
    CUTOFF_REACH_FACTOR: float = 1.5
    MAX_RETRIES: int = 3

    # Solver
    POSITIVITY_FLOOR: float = 1e-12
    THETA: float = 0.5
    STATIONARY_TOL: float = 1e-8
    STATIONARY_MAX_ITER: int = 200

    # Harness
    TOL_INEQ_FACTOR: float = 10.0
    EXCLUSION_LIMIT: float = 0.5
    E_SEARCH_MAX: float = 1e3
    E_SEARCH_RATIO: float = 1.05
    E_SEARCH_EXPANSIONS: int = 6
    COEFF_BOX_SAMPLES: int = 5

    OUTPUT_DIR: str = "runs"
    DEFAULT_SEED: int = 0
    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(
        env_file=(".env", f".env.{os.getenv('ENV_NAME', 'development')}"),
        env_file_encoding="utf-8",
        extra="allow",
    )


class DevelopmentSettings(Settings):
    LOG_LEVEL: str = "DEBUG"


class ProductionSettings(Settings):
    LOG_LEVEL: str = "INFO"
    PATH_RESTARTS: int = 16


class TestSettings(Settings):
    LOG_LEVEL: str = "DEBUG"
    OUTPUT_DIR: str = "test-runs"
    PATH_RESTARTS: int = 4
    MISALIGNMENT_POINTS: int = 3


ENV_SETTINGS_MAP = {
    "development": DevelopmentSettings,
    "production": ProductionSettings,
    "test": TestSettings,
}


@lru_cache
def get_settings() -> Settings:
    env_name = os.getenv("ENV_NAME", "development")
    return ENV_SETTINGS_MAP.get(env_name, Settings)()
