"""Flat binary checkpoints.

Layout (little-endian): ``b"PZOO"``, u32 version, then for each parameter
u32 name length, UTF-8 name, u32 rank, rank x u32 dims, float64 data.
"""

from __future__ import annotations

import struct

import numpy as np

from ..autograd import Graph

MAGIC = b"PZOO"
VERSION = 1


def _name(g: Graph, i):
    return g.node(i).label or f"node{i}"


def dump_params(g: Graph, params=None) -> bytes:
    params = g.params if params is None else params
    out = [MAGIC, struct.pack("<I", VERSION)]
    for i in g.parameter_ids:
        name = _name(g, i).encode()
        arr = np.ascontiguousarray(params[i], dtype="<f8")
        out.append(struct.pack("<I", len(name)) + name)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def parse_params(blob: bytes) -> dict:
    """name -> array, in file order."""
    if blob[:4] != MAGIC:
        raise ValueError("not a PZOO checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos, out = 8, {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4 : pos + 4 + n].decode()
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise ValueError(f"checkpoint truncated inside {name!r}")
            out[name] = np.frombuffer(blob, "<f8", count, pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as err:
        raise ValueError(f"checkpoint truncated: {err}") from None
    return out


def save_checkpoint(g: Graph, path, params=None):
    with open(path, "wb") as fh:
        fh.write(dump_params(g, params))


def load_checkpoint(g: Graph, path) -> dict:
    """Read a checkpoint and map it onto ``g``'s parameter ids (shapes checked)."""
    with open(path, "rb") as fh:
        named = parse_params(fh.read())
    params = {}
    for i in g.parameter_ids:
        name = _name(g, i)
        if name not in named:
            raise KeyError(f"checkpoint has no parameter {name!r}")
        if named[name].shape != g.node(i).shape:
            raise ValueError(f"{name}: checkpoint shape {named[name].shape} != {g.node(i).shape}")
        params[i] = named[name]
    return params
