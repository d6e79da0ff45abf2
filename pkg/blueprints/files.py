"""
Files blueprint for serving generated artifacts.
"""
from flask import Blueprint, current_app, jsonify

from extensions.auth_middleware import require_api_key
from utils.errors import ValidationError
from utils.storage import StorageService

files_bp = Blueprint("files", __name__)


@files_bp.route("/<kind>", methods=["GET"])
@require_api_key
def list_files(kind):
    """List artifacts of one kind (plots, images, databases, tables, checkpoints)."""
    try:
        names = StorageService.list_artifacts(kind, current_app.config["ARTIFACT_FOLDER"])
    except ValidationError as e:
        return jsonify({"error": str(e)}), 400
    return jsonify({"kind": kind, "files": names}), 200


@files_bp.route("/<kind>/<filename>", methods=["GET"])
@require_api_key
def download_file(kind, filename):
    """Download one artifact from local storage."""
    try:
        return StorageService.download_artifact(kind, filename, current_app.config["ARTIFACT_FOLDER"])
    except ValidationError as e:
        return jsonify({"error": str(e)}), 400
    except FileNotFoundError:
        return jsonify({"error": "File not found"}), 404
