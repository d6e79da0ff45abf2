"""
JSON overrides for the typed configuration records.

An override file is a JSON object whose top-level keys name a section
("ransac", "grid", "deform", "gem", "model", "train", "eval", "world") and whose
values map field names to replacement values.
"""
import dataclasses
import json
import logging
from typing import Any, Dict, Optional, TypeVar

from utils.errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

T = TypeVar("T")

SECTIONS = ("ransac", "grid", "deform", "gem", "model", "train", "eval", "world", "benchmark")


def apply_overrides(record: T, overrides: Optional[Dict[str, Any]]) -> T:
    """
    Return a copy of a frozen dataclass with fields replaced by `overrides`.

    Nested dataclass fields accept nested dicts. Lists are converted to tuples
    when the field default is a tuple.

    Raises:
        ValidationError: Unknown field name or an invalid resulting record
    """
    if not overrides:
        return record
    if not dataclasses.is_dataclass(record):
        raise ValidationError(f"cannot override {type(record).__name__}")
    fields = {f.name: f for f in dataclasses.fields(record)}
    changes: Dict[str, Any] = {}
    for key, value in overrides.items():
        if key not in fields:
            raise ValidationError(f"unknown {type(record).__name__} field: {key}")
        current = getattr(record, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            value = apply_overrides(current, value)
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        changes[key] = value
    logger.debug("Overriding %s fields %s", type(record).__name__, sorted(changes))
    return dataclasses.replace(record, **changes)


def load_overrides(path: Optional[str]) -> Dict[str, Dict[str, Any]]:
    """
    Read a `--config` JSON file.

    Raises:
        FormatError: File is not a JSON object
        ValidationError: Unknown top-level section
    """
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as e:
            raise FormatError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise FormatError(f"config file {path} must contain a JSON object")
    for section, values in data.items():
        if section not in SECTIONS:
            raise ValidationError(f"unknown config section: {section}")
        if not isinstance(values, dict):
            raise ValidationError(f"config section {section} must be an object")
    return data
