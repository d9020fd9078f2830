#!/usr/bin/env python3
"""
utils.py
Utility functions: JSON sanitization, hashing, atomic writes, chunked iteration
"""

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, is_dataclass

import numpy as np

from config import CHUNK_SIZE


def sanitize_for_json(obj):
    """Recursively convert numpy values, dataclasses and containers to JSON types"""
    if obj is None:
        return None
    elif isinstance(obj, dict):
        return {str(k): sanitize_for_json(v) for k, v in obj.items()}
    elif isinstance(obj, (list, tuple, set)):
        return [sanitize_for_json(v) for v in obj]
    elif isinstance(obj, np.ndarray):
        return sanitize_for_json(obj.tolist())
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, bytes):
        return obj.hex()
    elif is_dataclass(obj) and not isinstance(obj, type):
        return sanitize_for_json(asdict(obj))
    elif isinstance(obj, (int, float, str, bool)):
        return obj
    else:
        return str(obj)


def safe_json_dumps(obj, **kwargs):
    """Serialize to JSON with sorted keys so identical content gives identical bytes"""
    kwargs.setdefault("sort_keys", True)
    return json.dumps(sanitize_for_json(obj), **kwargs)


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    """Hex digest of a file's bytes"""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename over the target"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def iter_chunks(n, chunk_size=CHUNK_SIZE):
    """Yield (start, stop) covering range(n) in index order"""
    for start in range(0, n, chunk_size):
        yield start, min(start + chunk_size, n)


def array_digest(*arrays):
    """Stable digest of float/int arrays (dtype, shape and little-endian bytes)"""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()
