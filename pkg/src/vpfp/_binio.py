"""Flat binary container: magic line, header byte count, JSON header, raw little-endian float64 arrays."""

import io
import json

import numpy as np


def write_blob(path, magic: str, header: dict, arrays: dict):
    header = dict(header, arrays=[[k, list(np.shape(a))] for k, a in arrays.items()], dtype="<f8")
    text = json.dumps(header, indent=1, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{len(text)}\n".encode())
        fh.write(text)
        fh.write(b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_blob(path, magic: str):
    """Returns ``(header, arrays)``; arrays keep the order they were written in."""
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.readline().decode(errors="replace").strip() != magic:
        raise ValueError(f"{path} is not a {magic.split()[0]} file")
    n = int(buf.readline())
    header = json.loads(buf.read(n))
    buf.readline()
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise ValueError(f"{path} is truncated")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header, arrays
