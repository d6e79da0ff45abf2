"""Extensions package exports."""

__all__ = [
    "autodiff",
    "nn_ops",
    "db_client",
    "auth_middleware",
]
