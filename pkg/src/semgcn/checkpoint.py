"""Versioned checkpoint container: JSON header plus named float64 blobs.

Layout: one UTF-8 JSON line (format version, network config, skeleton
hash, training metadata, tensor manifest) followed by the concatenation
of every manifest entry as little-endian float64 in manifest order.
Round-trips are bitwise exact.
"""

from __future__ import annotations

import json

import numpy as np

from .network import Network, NetworkConfig, build_network
from .skeleton import SkeletonGraph, build_skeleton, skeleton_hash

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net: Network, training_meta: dict | None = None) -> None:
    entries = []
    arrays = []
    for name, p in net.named_parameters():
        entries.append({"name": name, "shape": list(p.shape), "kind": "param"})
        arrays.append(p.data)
    for name, b in net.named_buffers():
        entries.append({"name": name, "shape": list(b.shape), "kind": "buffer"})
        arrays.append(b)
    header = {
        "format_version": FORMAT_VERSION,
        "config": net.config.to_dict(),
        "skeleton_hash": skeleton_hash(net.skeleton),
        "training": training_meta or {},
        "tensors": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, skeleton: SkeletonGraph | None = None
                    ) -> tuple[Network, dict]:
    """Rebuild the network described by the file and fill its tensors."""
    if skeleton is None:
        skeleton = build_skeleton()
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version!r} unsupported "
                f"(expected {FORMAT_VERSION})")
        if header["skeleton_hash"] != skeleton_hash(skeleton):
            raise CheckpointError(
                "checkpoint was written for a different skeleton")
        blob = fh.read()

    config = NetworkConfig.from_dict(header["config"])
    net = build_network(config, skeleton, seed=0)
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())

    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated checkpoint at tensor {entry['name']}")
        offset += nbytes
        values = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        name, kind = entry["name"], entry["kind"]
        if kind == "param":
            if name not in params:
                raise CheckpointError(f"unexpected parameter {name!r}")
            if params[name].shape != shape:
                raise CheckpointError(
                    f"parameter {name!r} shape {shape} does not match "
                    f"{params[name].shape}")
            params[name].data = values
        elif kind == "buffer":
            if name not in buffers:
                raise CheckpointError(f"unexpected buffer {name!r}")
            buffers[name][...] = values
        else:
            raise CheckpointError(f"unknown tensor kind {kind!r}")
    if offset != len(blob):
        raise CheckpointError("checkpoint has trailing bytes")
    return net, header["training"]
