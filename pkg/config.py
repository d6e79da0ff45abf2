import logging
import os
from dotenv import load_dotenv
from typing import List, Optional

load_dotenv()

ENV_PREFIX = "RPR_"


def get_env(key: str, default: Optional[str] = None) -> str:
    value = os.getenv(ENV_PREFIX + key, default)
    if value is None:
        raise ValueError(f"Required environment variable {ENV_PREFIX}{key} is not set")
    return value


def get_env_int(key: str, default: int) -> int:
    value = os.getenv(ENV_PREFIX + key)
    return int(value) if value else default


def get_env_float(key: str, default: float) -> float:
    value = os.getenv(ENV_PREFIX + key)
    return float(value) if value else default


def get_env_bool(key: str, default: bool) -> bool:
    value = os.getenv(ENV_PREFIX + key)
    if value is None:
        return default
    return value.lower() in ('true', '1', 'yes', 'on')


def get_env_int_list(key: str, default: List[int]) -> List[int]:
    value = os.getenv(ENV_PREFIX + key)
    if not value:
        return list(default)
    return [int(item.strip()) for item in value.split(",") if item.strip()]


# Logging
LOG_LEVEL = get_env("LOG_LEVEL", "INFO")

# Global seed
SEED = get_env_int("SEED", 0)

# Sensor
FRAME_RATE_HZ = get_env_float("FRAME_RATE_HZ", 10.0)

# Ego-motion (RANSAC)
RANSAC_MAX_ITERATIONS = get_env_int("RANSAC_MAX_ITERATIONS", 100)
RANSAC_INLIER_THRESHOLD = get_env_float("RANSAC_INLIER_THRESHOLD", 0.15)  # m/s
RANSAC_MIN_INLIER_FRACTION = get_env_float("RANSAC_MIN_INLIER_FRACTION", 0.3)
RANSAC_CONDITION_LIMIT = 1e12

# BEV grid
GRID_PRESET = get_env("GRID_PRESET", "desk")  # "desk" (108x124) or "full" (216x248)
PILLAR_CHANNELS = get_env_int("PILLAR_CHANNELS", 32)
MAX_POINTS_PER_PILLAR = get_env_int("MAX_POINTS_PER_PILLAR", 32)

# Deformable aggregation
DEFORM_HEADS = get_env_int("DEFORM_HEADS", 4)
DEFORM_POINTS = get_env_int("DEFORM_POINTS", 4)
DEFORM_LEVELS = 4
DROPOUT_RATE = get_env_float("DROPOUT_RATE", 0.1)

# Descriptor head
DESCRIPTOR_DIM = 256
GEM_P = get_env_float("GEM_P", 3.0)
GEM_EPS = get_env_float("GEM_EPS", 1e-6)
NORMALIZE_DESCRIPTORS = get_env_bool("NORMALIZE_DESCRIPTORS", False)

# Training
WINDOW_K = get_env_int("WINDOW_K", 3)
LEARNING_RATE = get_env_float("LEARNING_RATE", 8e-4)
LR_DECAY = get_env_float("LR_DECAY", 0.9)  # exponential, per epoch
BATCH_SIZE = get_env_int("BATCH_SIZE", 1)
EPOCHS = get_env_int("EPOCHS", 30)
MARGIN_ALPHA = get_env_float("MARGIN_ALPHA", 0.2)
MARGIN_BETA = get_env_float("MARGIN_BETA", 0.1)
N_NEGATIVES = get_env_int("N_NEGATIVES", 6)
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
USE_GRADIENT_ACCUMULATION = get_env_bool("USE_GRADIENT_ACCUMULATION", False)
ACCUMULATION_STEPS = get_env_int("ACCUMULATION_STEPS", 4)

# Evaluation protocol
POSITIVE_RADIUS_M = get_env_float("POSITIVE_RADIUS_M", 5.0)
NEGATIVE_RADIUS_M = get_env_float("NEGATIVE_RADIUS_M", 10.0)
RECALL_N = get_env_int_list("RECALL_N", [1, 5, 10])

# Retrieval service
DEBUG = get_env_bool("DEBUG", False)
API_KEY = get_env("API_KEY", "")
ARTIFACT_FOLDER = get_env("ARTIFACT_FOLDER", "./artifacts")
SERVICE_DATABASE_PATH = get_env("SERVICE_DATABASE_PATH", "")
MAX_QUERY_RESULTS = get_env_int("MAX_QUERY_RESULTS", 50)
default_cors = "http://localhost:3000,http://localhost:8000"
CORS_ORIGINS = os.getenv(ENV_PREFIX + "CORS_ORIGINS", default_cors).split(",")
CORS_ORIGINS = [origin.strip() for origin in CORS_ORIGINS if origin.strip()]


def configure_logging(level: Optional[str] = None) -> None:
    """Install one stream handler on the root logger."""
    root = logging.getLogger()
    if not any(getattr(h, "_rpr_handler", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handler._rpr_handler = True
        root.addHandler(handler)
    root.setLevel((level or LOG_LEVEL).upper())


def validate_config() -> None:
    problems = []
    if not POSITIVE_RADIUS_M < NEGATIVE_RADIUS_M:
        problems.append("POSITIVE_RADIUS_M must be smaller than NEGATIVE_RADIUS_M")
    if LEARNING_RATE <= 0:
        problems.append("LEARNING_RATE must be positive")
    if WINDOW_K < 1:
        problems.append("WINDOW_K must be at least 1")
    if FRAME_RATE_HZ <= 0:
        problems.append("FRAME_RATE_HZ must be positive")
    if RANSAC_MAX_ITERATIONS < 1 or RANSAC_INLIER_THRESHOLD <= 0:
        problems.append("RANSAC settings out of range")
    if GRID_PRESET not in ("desk", "full"):
        problems.append(f"GRID_PRESET must be 'desk' or 'full', got {GRID_PRESET!r}")

    if problems:
        raise ValueError(
            f"Invalid configuration: {'; '.join(problems)}"
        )


# Validate on import
try:
    validate_config()
except ValueError as e:
    logging.getLogger(__name__).warning("Configuration warning: %s", e)
