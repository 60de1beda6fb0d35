import os

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Reproducibility / parallelism
    DEFAULT_SEED: int = 20240101
    THREADS: int = 0  # 0 = all available cores
    CHUNK_SIZE: int = 65536  # attempts per RNG stream in the sampler

    # Sampler budgets
    TARGET_N_DEFAULT: int = 1_000_000
    TARGET_N_SMOOTH: int = 200_000
    SMOOTH_RHO_THRESHOLD: float = 0.985  # adjacent correlation at which the smooth budget applies
    MAX_M_FACTOR: int = 100

    # Covariance
    PSD_FLOOR: float = 1e-10
    KERNEL_WINDOW_SIGMAS: float = 8.0
    PADDING_SIGMAS: float = 4.0

    # Closed-form peak height distribution
    Q_EPSABS: float = 1e-10
    NORM_EPSABS: float = 1e-9
    ADLM_LOWER: float = -8.0
    ADLM_UPPER: float = 12.0
    ADLM_RHO_LIMIT: float = 1.0 - 1e-6
    ADLM_GRID_POINTS: int = 20001

    # Lookup table
    LOOKUP_RHO_MIN: float = 0.01
    LOOKUP_RHO_MAX: float = 0.99
    LOOKUP_RHO_STEP: float = 0.01
    LOOKUP_SAMPLES_PER_RHO: int = 100_000
    LOOKUP_U_POINTS: int = 100_000
    LOOKUP_CV_FOLDS: int = 5
    LOOKUP_CV_LINES: int = 4

    # Validation
    PVALUE_WINDOW_LOW: float = 0.001
    PVALUE_WINDOW_HIGH: float = 0.05
    FDR_ALPHA: float = 0.05

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "json"

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    def resolved_threads(self, threads: int | None = None) -> int:
        """Worker count, with 0/None meaning every available core"""
        n = threads if threads else self.THREADS
        return n if n and n > 0 else (os.cpu_count() or 1)


# Global settings instance
settings = Settings()
