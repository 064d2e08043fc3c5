"""Versioned binary checkpoint format for networks.

Layout: magic b"VXNN", u32 format version, u32 header length, JSON header
(layer specs, input shape, seed, parameter shapes), then the parameter
blobs as little-endian float64 in declaration order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .layers import LayerSpec
from .network import Network

MAGIC = b"VXNN"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


def save_network(net: Network, path):
    header = {
        "specs": [s.to_dict() for s in net.specs],
        "input_shape": list(net.input_shape),
        "seed": net.seed,
        "param_shapes": [list(p.shape) for p in net.params()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for p in net.params():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_network(path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        net = Network([LayerSpec.from_dict(d) for d in header["specs"]],
                      tuple(header["input_shape"]), header["seed"])
        state = []
        for shape in header["param_shapes"]:
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise CheckpointError("truncated parameter blob")
            state.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
        net.set_state(state)
    return net
