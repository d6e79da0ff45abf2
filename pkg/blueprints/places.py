"""
Places blueprint: nearest-descriptor queries against the loaded database.
"""
import math

from flask import Blueprint, jsonify, request

from config import MAX_QUERY_RESULTS
from extensions.auth_middleware import require_api_key
from extensions.db_client import get_database, get_database_path
from utils.errors import ValidationError

places_bp = Blueprint("places", __name__)

DEFAULT_TOP_N = 5


def _parse_top_n(value) -> int:
    if value is None:
        return DEFAULT_TOP_N
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError("top_n must be an integer")
    if not 1 <= value <= MAX_QUERY_RESULTS:
        raise ValidationError(f"top_n must be between 1 and {MAX_QUERY_RESULTS}")
    return value


def _parse_descriptor(value, dim: int):
    if not isinstance(value, list) or not value:
        raise ValidationError("descriptor must be a non-empty list of numbers")
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
        raise ValidationError("descriptor must contain only numbers")
    if not all(math.isfinite(v) for v in value):
        raise ValidationError("descriptor values must be finite")
    if len(value) != dim:
        raise ValidationError(f"descriptor has {len(value)} values, database rows have {dim}")
    return value


@places_bp.route("/query", methods=["POST"])
@require_api_key
def query_places():
    """Return the top-N database rows nearest to a descriptor."""
    database = get_database()
    if database is None:
        return jsonify({"error": "No descriptor database loaded"}), 503

    data = request.get_json(silent=True)
    if not isinstance(data, dict) or "descriptor" not in data:
        return jsonify({"error": "descriptor is required"}), 400

    try:
        top_n = _parse_top_n(data.get("top_n"))
        descriptor = _parse_descriptor(data["descriptor"], database.dim)
        results = database.nearest(descriptor, top_n)
    except ValidationError as e:
        return jsonify({"error": str(e)}), 400

    return jsonify({"results": results, "count": len(results)}), 200


@places_bp.route("/stats", methods=["GET"])
@require_api_key
def database_stats():
    """Row count, descriptor dimension and sequences of the loaded database."""
    database = get_database()
    if database is None:
        return jsonify({"error": "No descriptor database loaded"}), 503

    sequences = sorted({entry.get("sequence_id", "") for entry in database.entries})
    return jsonify({
        "count": len(database),
        "dim": database.dim,
        "path": get_database_path(),
        "sequences": sequences,
    }), 200
