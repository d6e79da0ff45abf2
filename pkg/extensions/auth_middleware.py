"""
API key guard for the retrieval service.
"""
import hmac
import logging
from functools import wraps

from flask import current_app, jsonify, request

logger = logging.getLogger(__name__)

API_KEY_HEADER = "X-API-Key"


def _configured_key() -> str:
    return current_app.config.get("API_KEY", "") or ""


def require_api_key(f):
    """
    Decorator rejecting requests without the configured API key.

    When no key is configured (RPR_API_KEY empty) every request passes.

    Usage:
        @require_api_key
        def my_endpoint():
            ...
    """
    @wraps(f)
    def decorated(*args, **kwargs):
        expected = _configured_key()
        if not expected:
            return f(*args, **kwargs)

        provided = request.headers.get(API_KEY_HEADER)
        if not provided:
            return jsonify({"error": "No API key provided"}), 401
        if not hmac.compare_digest(provided, expected):
            logger.warning("Rejected request to %s with an invalid API key", request.path)
            return jsonify({"error": "Invalid API key"}), 401

        return f(*args, **kwargs)

    return decorated
