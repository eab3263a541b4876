"""
Configuration management for EgoFlow.

Handles environment variables, numerical tolerances and evaluation
settings, and provides a centralized configuration interface.
"""

from pathlib import Path
from typing import Any, Dict, List

from dotenv import load_dotenv
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Config(BaseSettings):
    """Centralized configuration for EgoFlow."""

    model_config = SettingsConfigDict(
        env_prefix="EGOFLOW_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application Settings
    log_level: str = Field("INFO")
    log_to_file: bool = Field(False)
    log_file_path: str = Field("./logs/egoflow.log")

    # Execution
    num_threads: int = Field(1)
    deterministic: bool = Field(True)
    stats_chunk_size: int = Field(65536)

    # Numerical tolerances
    orthonormality_tol: float = Field(1e-9)
    denominator_epsilon: float = Field(1e-9)
    flow_epsilon: float = Field(1e-6)
    translation_epsilon: float = Field(1e-4)

    # Correspondences and simulation
    fb_consistency_threshold: float = Field(1.0)
    occlusion_tie_tolerance: float = Field(1e-6)
    min_visible_fraction: float = Field(0.5)

    # Odometry evaluation
    kitti_segment_lengths: List[float] = Field(
        default_factory=lambda: [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0]
    )
    kitti_step_size: int = Field(1)
    kitti_parse_orthonormality_tol: float = Field(1e-3)

    @field_validator("log_file_path")
    @classmethod
    def expand_log_path(cls, v: str) -> str:
        """Expand the log file path to absolute path."""
        return str(Path(v).expanduser().resolve())

    def validate_configuration(self) -> Dict[str, Any]:
        """Validate the configuration and return any issues."""
        issues = []

        if self.num_threads < 1:
            issues.append("num_threads must be at least 1")

        if self.stats_chunk_size < 1:
            issues.append("stats_chunk_size must be at least 1")

        for name in (
            "orthonormality_tol",
            "denominator_epsilon",
            "flow_epsilon",
            "translation_epsilon",
            "fb_consistency_threshold",
            "kitti_parse_orthonormality_tol",
        ):
            if getattr(self, name) <= 0:
                issues.append(f"{name} must be positive")

        if not 0.0 < self.min_visible_fraction <= 1.0:
            issues.append("min_visible_fraction must lie in (0, 1]")

        if not self.kitti_segment_lengths or min(self.kitti_segment_lengths) <= 0:
            issues.append("kitti_segment_lengths must be a nonempty list of positive lengths")

        if self.kitti_step_size < 1:
            issues.append("kitti_step_size must be at least 1")

        return {
            "valid": len(issues) == 0,
            "issues": issues
        }

    def to_dict(self) -> Dict[str, Any]:
        """Convert configuration to dictionary."""
        return {
            "execution": {
                "num_threads": self.num_threads,
                "deterministic": self.deterministic,
                "stats_chunk_size": self.stats_chunk_size,
            },
            "tolerances": {
                "orthonormality": self.orthonormality_tol,
                "denominator": self.denominator_epsilon,
                "flow": self.flow_epsilon,
                "translation": self.translation_epsilon,
            },
            "simulation": {
                "fb_consistency_threshold": self.fb_consistency_threshold,
                "occlusion_tie_tolerance": self.occlusion_tie_tolerance,
                "min_visible_fraction": self.min_visible_fraction,
            },
            "evaluation": {
                "kitti_segment_lengths": list(self.kitti_segment_lengths),
                "kitti_step_size": self.kitti_step_size,
            },
        }


def load_config() -> Config:
    """Load configuration from environment and .env file."""
    env_file = Path(".env")
    if env_file.exists():
        load_dotenv(env_file)

    config = Config()
    validation = config.validate_configuration()

    if not validation["valid"]:
        raise ValueError(
            "Invalid configuration: " + "; ".join(validation["issues"])
        )

    return config


# Global configuration instance
config = load_config()
