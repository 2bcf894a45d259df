"""Versioned binary model container with bit-exact round-trips.

Layout: magic line, 8-byte big-endian header length, JSON header (layer
specs, shapes, array manifest), then the raw little-endian float64 parameter
bytes in manifest order.  Serialization is fully deterministic so identical
networks produce identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .cnn import Conv, Dense, MaxPool, Network, Relu, Softmax

_MAGIC = b"PALLETRACK-NET\n"
_VERSION = 1

_KINDS = {
    Conv: "conv",
    Relu: "relu",
    MaxPool: "maxpool",
    Dense: "dense",
    Softmax: "softmax",
}


def _spec_to_dict(spec) -> dict:
    d = {"kind": _KINDS[type(spec)]}
    if isinstance(spec, Conv):
        d.update(filters=spec.filters, size=spec.size, stride=spec.stride,
                 padding=spec.padding)
    elif isinstance(spec, MaxPool):
        d.update(size=spec.size, stride=spec.stride)
    elif isinstance(spec, Dense):
        d.update(units=spec.units)
    return d


def _spec_from_dict(d: dict):
    kind = d["kind"]
    if kind == "conv":
        return Conv(d["filters"], d["size"], d["stride"], d["padding"])
    if kind == "relu":
        return Relu()
    if kind == "maxpool":
        return MaxPool(d["size"], d["stride"])
    if kind == "dense":
        return Dense(d["units"])
    if kind == "softmax":
        return Softmax()
    raise ValueError(f"unknown layer kind {kind!r}")


def save_network(path, net: Network) -> None:
    net.require_params()
    arrays = []
    blobs = []
    for i, p in enumerate(net.params):
        if p is None:
            continue
        for name in ("w", "b"):
            a = np.ascontiguousarray(p[name], dtype=np.float64)
            arrays.append({"layer": i, "name": name, "shape": list(a.shape)})
            blobs.append(a.tobytes())
    header = {
        "format": "palletrack-net",
        "version": _VERSION,
        "input_shape": list(net.input_shape),
        "layers": [_spec_to_dict(s) for s in net.layers],
        "arrays": arrays,
        "rng_seed": net.rng_seed,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(">Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a palletrack model file")
        (hlen,) = struct.unpack(">Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != _VERSION:
            raise ValueError(f"{path}: unsupported model version "
                             f"{header.get('version')}")
        net = Network(tuple(header["input_shape"]),
                      [_spec_from_dict(d) for d in header["layers"]])
        net.params = [None] * len(net.layers)
        net.rng_seed = header.get("rng_seed")
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            a = np.frombuffer(fh.read(count * 8), dtype=np.float64)
            a = a.reshape(shape).copy()
            i = entry["layer"]
            if net.params[i] is None:
                net.params[i] = {}
            net.params[i][entry["name"]] = a
    for spec, p in zip(net.layers, net.params):
        if isinstance(spec, (Conv, Dense)) and (p is None or
                                                "w" not in p or "b" not in p):
            raise ValueError(f"{path}: missing parameters for {spec}")
    return net
