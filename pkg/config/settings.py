from pydantic_settings import BaseSettings

class Settings(BaseSettings):
    # Logging
    LOG_LEVEL: str = "INFO"

    # Outputs
    OUTPUT_DIR: str = "results"
    CSV_SCHEMA_TAG: str = "# fedgain-sim v1"

    # Simulation
    DIVERGENCE_THRESHOLD: float = 1e12  # Runs abort once J(w) exceeds this

    # Worker
    WORKER_CONCURRENCY: int = 4  # 1 runs replications inline
    REPLICATION_CHUNK_SIZE: int = 64
    STATS_LOG_EVERY: int = 1000  # Replications between progress lines

    class Config:
        env_file = ".env"

settings = Settings()
