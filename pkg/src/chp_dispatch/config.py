"""Application configuration loaded from environment variables.

Uses pydantic-settings to read ``CHP_*`` variables, optionally from a .env file.
Algorithm knobs of the decomposition live in ``master.SolverConfig``; the
settings here only provide their environment-level defaults.
"""

from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# ─── Default File Paths ───
OUTPUT_DIR = Path("results")
BUNDLED_INSTANCE = Path(__file__).resolve().parent / "instances" / "six_node.json"


class Settings(BaseSettings):
    """Application settings loaded from environment variables or .env file."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="CHP_",
        extra="ignore",
    )

    # ─── Output ───
    output_dir: Path = OUTPUT_DIR
    log_level: str = "INFO"

    # ─── Solver ───
    solver: str = "CLARABEL"
    solver_tolerance: float = Field(default=1e-9, gt=0)

    # ─── Concurrency ───
    max_concurrency: int = Field(default=3, ge=1)
