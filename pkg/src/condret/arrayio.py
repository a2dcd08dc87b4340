"""Deterministic binary container for checkpoints and indexes.

Layout: magic, 8-byte little-endian header length, canonical JSON header,
then the raw bytes of each array in manifest order. Every byte is a pure
function of the contents (no timestamps, no compression), so identical
inputs produce identical files and round trips are bit-exact.
"""

import json
import os
import tempfile

import numpy as np

from .errors import DataFormatError

MAGIC = b"CRAC1\n"


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory + rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_container(path, meta: dict, arrays: "dict[str, np.ndarray]") -> None:
    """Serialize `meta` plus named arrays; array order is the dict order."""
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le_dtype = arr.dtype.newbyteorder("<")
        arr = arr.astype(le_dtype, copy=False)
        manifest.append({"name": name, "dtype": le_dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = _canonical_json({"meta": meta, "arrays": manifest})
    out = bytearray()
    out += MAGIC
    out += len(header).to_bytes(8, "little")
    out += header
    for blob in blobs:
        out += blob
    atomic_write_bytes(path, bytes(out))


def load_container(path) -> "tuple[dict, dict[str, np.ndarray]]":
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise DataFormatError(f"{path}: bad magic, not a condret container")
    off = len(MAGIC)
    if len(data) < off + 8:
        raise DataFormatError(f"{path}: truncated header length")
    hlen = int.from_bytes(data[off : off + 8], "little")
    off += 8
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header: {exc}") from exc
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = int(dtype.itemsize * np.prod(shape, dtype=np.int64))
        raw = data[off : off + nbytes]
        if len(raw) != nbytes:
            raise DataFormatError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise DataFormatError(f"{path}: {len(data) - off} trailing bytes")
    return header["meta"], arrays
