import logging
from typing import Optional

from flask import Flask, jsonify
from flask_cors import CORS

from config import API_KEY, ARTIFACT_FOLDER, CORS_ORIGINS, DEBUG, SERVICE_DATABASE_PATH, validate_config
from extensions.db_client import check_database_health, get_database, load_service_database, set_database
from utils.errors import RadarPRError

logger = logging.getLogger(__name__)


def create_app(database_path: Optional[str] = None, artifact_folder: Optional[str] = None,
               api_key: Optional[str] = None):
    """
    Build the retrieval service.

    Args:
        database_path: Descriptor database to serve; defaults to RPR_SERVICE_DATABASE_PATH
        artifact_folder: Root of downloadable artifacts; defaults to RPR_ARTIFACT_FOLDER
        api_key: Required X-API-Key value; defaults to RPR_API_KEY (empty disables the check)
    """
    validate_config()

    app = Flask(__name__)
    app.config["DEBUG"] = DEBUG
    app.config["API_KEY"] = API_KEY if api_key is None else api_key
    app.config["ARTIFACT_FOLDER"] = artifact_folder or ARTIFACT_FOLDER

    # CORS configuration
    CORS(app, origins=CORS_ORIGINS, supports_credentials=True)

    path = database_path or SERVICE_DATABASE_PATH
    if path:
        try:
            load_service_database(path)
        except (OSError, RadarPRError) as e:
            app.logger.warning("Descriptor database not loaded: %s", e)
            set_database(None)
    else:
        set_database(None)

    # Register blueprints
    from blueprints.places import places_bp
    from blueprints.files import files_bp
    app.register_blueprint(places_bp, url_prefix="/api/places")
    app.register_blueprint(files_bp, url_prefix="/api/files")

    @app.route("/", methods=["GET"])
    def index():
        return jsonify({
            "message": "Radar place recognition service",
            "status": "running",
            "version": "1.0.0",
        }), 200

    @app.route("/health", methods=["GET"])
    def health():
        loaded = check_database_health()
        database = get_database()
        return jsonify({
            "status": "healthy" if loaded else "degraded",
            "database": "loaded" if loaded else "missing",
            "rows": len(database) if database is not None else 0,
        }), 200

    @app.errorhandler(400)
    def bad_request(error):
        return jsonify({"error": "Bad request"}), 400

    @app.errorhandler(404)
    def not_found(error):
        return jsonify({"error": "Resource not found"}), 404

    @app.errorhandler(500)
    def internal_error(error):
        app.logger.error("Unhandled error: %s", error)
        return jsonify({"error": "Internal server error"}), 500

    return app


if __name__ == "__main__":
    from config import configure_logging

    configure_logging()
    create_app().run(host="0.0.0.0", port=5000, debug=DEBUG)
