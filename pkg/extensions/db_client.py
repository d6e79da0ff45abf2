"""
Descriptor database client setup for the retrieval service.
"""
import logging
import threading
from typing import Optional

from config import SERVICE_DATABASE_PATH
from utils.storage import DescriptorDatabase, load_database

logger = logging.getLogger(__name__)

_lock = threading.Lock()
_database: Optional[DescriptorDatabase] = None
_database_path: Optional[str] = None


def load_service_database(path: Optional[str] = None) -> DescriptorDatabase:
    """
    Load the descriptor database served by the API and keep it in memory.

    Args:
        path: Database file; defaults to RPR_SERVICE_DATABASE_PATH

    Raises:
        FileNotFoundError: No path configured or file missing
        FormatError: Corrupt database file
    """
    global _database, _database_path
    target = path or SERVICE_DATABASE_PATH
    if not target:
        raise FileNotFoundError("no descriptor database configured (RPR_SERVICE_DATABASE_PATH)")
    database = load_database(target)
    with _lock:
        _database = database
        _database_path = target
    logger.info("Serving descriptor database %s (%d rows, dim %d)", target, len(database), database.dim)
    return database


def set_database(database: Optional[DescriptorDatabase], path: Optional[str] = None) -> None:
    global _database, _database_path
    with _lock:
        _database = database
        _database_path = path


def get_database() -> Optional[DescriptorDatabase]:
    """
    Get the loaded descriptor database.

    Returns:
        DescriptorDatabase, or None when nothing is loaded
    """
    return _database


def get_database_path() -> Optional[str]:
    return _database_path


def check_database_health() -> bool:
    """True when a non-empty database is loaded."""
    database = _database
    if database is None:
        logger.warning("Health check: no descriptor database loaded")
        return False
    return len(database) > 0
