"""
Checkpoint Container - Portable .npz archive with a key=value text header
Layout:
    __header__      UTF-8 text, one "key=value" per line (no newlines inside values)
    <array name>    float64 array, shape preserved
No pickling anywhere; a save/load round trip is bit-exact.
"""
import hashlib
import json
import logging
import os

import numpy as np

from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

HEADER_KEY = "__header__"


def save_container(path, header, arrays):
    """Write header dict + named arrays to path"""
    for key, value in header.items():
        if "\n" in str(value) or "=" in str(key):
            raise ConfigurationError(f"header entry {key!r} is not single-line key=value text")
    lines = "\n".join(f"{key}={value}" for key, value in header.items())
    payload = {HEADER_KEY: np.array(lines)}
    for name, array in arrays.items():
        if name == HEADER_KEY:
            raise ConfigurationError(f"array name {HEADER_KEY} is reserved")
        payload[name] = np.asarray(array, dtype=np.float64)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **payload)
    logger.info(f"Container saved: {path} ({len(arrays)} arrays)")
    return path


def load_container(path):
    """Return (header dict, ordered dict of arrays)"""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with np.load(path, allow_pickle=False) as archive:
        header = {}
        text = str(archive[HEADER_KEY]) if HEADER_KEY in archive.files else ""
        for line in text.split("\n"):
            if not line:
                continue
            key, _, value = line.partition("=")
            header[key] = value
        arrays = {name: archive[name].copy() for name in archive.files if name != HEADER_KEY}
    return header, arrays


def arrays_checksum(arrays):
    """SHA-256 over sorted names, shapes and raw bytes"""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        array = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def file_checksum(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def container_checksum(path):
    """Content checksum of a container; independent of zip timestamps"""
    header, arrays = load_container(path)
    digest = hashlib.sha256()
    for key in sorted(header):
        digest.update(f"{key}={header[key]}\n".encode("utf-8"))
    digest.update(arrays_checksum(arrays).encode("ascii"))
    return digest.hexdigest()


def artifact_checksum(path):
    if path.endswith(".npz"):
        return container_checksum(path)
    return file_checksum(path)


def write_jsonl(path, rows):
    """One flat JSON object per line, UTF-8"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            f.write("\n")
            count += 1
    logger.info(f"JSONL written: {path} ({count} rows)")
    return path


def read_jsonl(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}:{line_no} is not valid JSON: {e}")
    return rows
