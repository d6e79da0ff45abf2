"""
Named parameter store and its binary checkpoint format.

Layout (little-endian):
    b"RSPR" | u32 version | u32 header_len | JSON header | payload | u32 CRC32(payload)

The JSON header lists every tensor as {name, shape, dtype="f64", offset, nbytes}
plus a free-form "meta" object (model and grid configuration).
"""
import json
import os
import struct
import zlib
from collections import OrderedDict
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from extensions.autodiff import Tensor
from utils.errors import FormatError, ValidationError

MAGIC = b"RSPR"
FORMAT_VERSION = 1


class ParameterStore:
    """Ordered map from parameter path to a trainable Tensor. Shapes never change."""

    def __init__(self):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, values: Any) -> Tensor:
        if name in self._tensors:
            raise ValidationError(f"duplicate parameter name: {name}")
        tensor = Tensor(values, requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ValidationError(f"unknown parameter: {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._tensors.items())

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tensor.shape for name, tensor in self._tensors.items()}

    def assign(self, name: str, values: Any) -> None:
        tensor = self[name]
        array = np.array(values, dtype=np.float64)
        if array.shape != tensor.shape:
            raise ValidationError(f"shape of {name} is {tensor.shape}, cannot assign {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValidationError(f"non-finite values assigned to {name}")
        tensor.values = array

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.grad = None

    def copy(self) -> "ParameterStore":
        clone = ParameterStore()
        for name, tensor in self._tensors.items():
            clone.add(name, tensor.values.copy())
        return clone

    def subset(self, prefix: str) -> Dict[str, Tensor]:
        """Parameters whose path starts with `prefix`, keyed by the remaining suffix."""
        return {
            name[len(prefix):]: tensor
            for name, tensor in self._tensors.items()
            if name.startswith(prefix)
        }

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())


def save_parameters(store: ParameterStore, path: str, meta: Optional[Dict[str, Any]] = None) -> None:
    """
    Write a parameter checkpoint.

    Args:
        store: Parameters to write, in store order
        path: Output file
        meta: Optional JSON-serializable metadata stored in the header
    """
    entries = []
    payload = bytearray()
    for name, tensor in store.items():
        raw = np.ascontiguousarray(tensor.values, dtype="<f8").tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": "f64",
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        handle.write(header)
        handle.write(bytes(payload))
        handle.write(struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF))


def read_checkpoint(path: str) -> Tuple[ParameterStore, Dict[str, Any]]:
    """
    Read a parameter checkpoint together with its metadata.

    Raises:
        FormatError: Bad magic, unknown version, truncated file or checksum mismatch
    """
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise FormatError(f"{path} is not a parameter file")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"unknown parameter format version {version}")
    header_end = 12 + header_len
    if len(blob) < header_end + 4:
        raise FormatError(f"{path} is truncated")
    try:
        header = json.loads(blob[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt header in {path}: {e}") from e
    if not isinstance(header, dict):
        raise FormatError(f"header of {path} is not an object")

    try:
        entries = list(header.get("tensors", []))
        index = [
            (str(e["name"]), tuple(int(d) for d in e["shape"]), int(e["offset"]), int(e["nbytes"]), e.get("dtype"))
            for e in entries
        ]
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise FormatError(f"corrupt tensor index in {path}: missing or bad {e}") from e
    payload_len = sum(nbytes for _, _, _, nbytes, _ in index)
    if len(blob) != header_end + payload_len + 4:
        raise FormatError(f"{path} is truncated or has trailing bytes")
    payload = blob[header_end:header_end + payload_len]
    (crc,) = struct.unpack("<I", blob[header_end + payload_len:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError(f"checksum mismatch in {path}")

    store = ParameterStore()
    for name, shape, start, nbytes, dtype in index:
        if dtype != "f64":
            raise FormatError(f"unsupported dtype {dtype} for {name}")
        if start < 0 or start + nbytes > payload_len or nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {name} does not fit the payload of {path}")
        raw = payload[start:start + nbytes]
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        store.add(name, values)
    meta = header.get("meta", {})
    if not isinstance(meta, dict):
        raise FormatError(f"metadata of {path} is not an object")
    return store, meta


def load_parameters(path: str) -> ParameterStore:
    store, _ = read_checkpoint(path)
    return store


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
