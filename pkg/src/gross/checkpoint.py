"""Versioned checkpoint container for named arrays.

Layout (all integers little-endian)::

    8 bytes   magic b"GROSSCKP"
    uint32    format version
    uint64    header length H
    H bytes   UTF-8 JSON header
    ...       array data, concatenated in header order

The header holds ``meta`` (free-form JSON) and one record per array with
its name, dtype string (always little-endian, e.g. ``"<f4"``), shape, axis
tags, byte offset into the data section, byte count and CRC-32. Arrays are
stored C-contiguous, so loading reproduces them bit for bit.
"""

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .nn import ParameterSet
from .series import ConvMeta, GroSSLayer

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "CheckpointVersionError",
    "CheckpointCorruptError",
    "CheckpointIOError",
    "FORMAT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "pack_parameters",
    "unpack_parameters",
    "pack_series",
    "unpack_series",
]

MAGIC = b"GROSSCKP"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    """Base class for checkpoint failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointIOError(CheckpointError, OSError):
    pass


@dataclass
class Checkpoint:
    """Named arrays plus axis tags and JSON metadata."""

    arrays: dict = field(default_factory=dict)
    axes: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, name, array, axes=None):
        if name in self.arrays:
            raise KeyError(f"duplicate array {name!r}")
        array = np.asarray(array)
        if axes is not None and len(axes) != array.ndim:
            raise ValueError(f"{name}: {len(axes)} axis tags for a {array.ndim}-d array")
        self.arrays[name] = array
        self.axes[name] = list(axes) if axes is not None else [f"d{i}" for i in range(array.ndim)]

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.axes == other.axes
            and self.arrays.keys() == other.arrays.keys()
            and all(
                a.dtype == other.arrays[k].dtype and a.shape == other.arrays[k].shape
                and a.tobytes() == other.arrays[k].tobytes()
                for k, a in self.arrays.items()
            )
        )


def save_checkpoint(path, ckpt):
    """Write ``ckpt`` atomically (temporary file then rename)."""
    records, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        if arr.dtype.hasobject:
            raise TypeError(f"{name}: object arrays cannot be stored")
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        data = arr.tobytes()
        records.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "axes": ckpt.axes.get(name),
            "offset": offset,
            "nbytes": len(data),
            "crc32": zlib.crc32(data),
        })
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": ckpt.meta, "arrays": records}, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
            fh.write(header)
            for data in blobs:
                fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(raw) < _PREAMBLE.size:
        raise CheckpointCorruptError(f"{path}: {len(raw)} bytes is shorter than the {_PREAMBLE.size}-byte preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")
    start = _PREAMBLE.size
    if len(raw) < start + hlen:
        raise CheckpointCorruptError(f"{path}: header truncated at byte offset {len(raw)} (needs {start + hlen})")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        records, meta = header["arrays"], header["meta"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header: {exc}") from exc

    base = start + hlen
    ckpt = Checkpoint(meta=meta)
    for rec in records:
        try:
            name, dtype, shape = rec["name"], np.dtype(rec["dtype"]), tuple(rec["shape"])
            lo, n = base + rec["offset"], rec["nbytes"]
        except (KeyError, TypeError) as exc:
            raise CheckpointCorruptError(f"{path}: malformed array record {rec!r}") from exc
        if lo + n > len(raw):
            raise CheckpointCorruptError(f"{path}: array {name!r} truncated at byte offset {len(raw)} (needs {lo + n})")
        data = raw[lo:lo + n]
        if zlib.crc32(data) != rec.get("crc32"):
            raise CheckpointCorruptError(f"{path}: checksum mismatch in array {name!r} at byte offset {lo}")
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != n:
            raise CheckpointCorruptError(f"{path}: array {name!r} byte count does not match its shape")
        arr = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        ckpt.add(name, arr, rec.get("axes"))
    return ckpt


def _param_axes(name, ndim):
    leaf = name.rsplit(".", 2)
    if ndim == 1:
        return ["out"]
    if ndim == 2:
        return ["in", "out"]
    if len(leaf) == 3 and leaf[1] == "R":
        return ["in_per_group", "out", "kh", "kw"]
    return ["in", "out", "kh", "kw"]


def pack_parameters(params, ckpt=None, prefix="param/"):
    """Add every parameter value in ``params`` to a checkpoint."""
    ckpt = ckpt if ckpt is not None else Checkpoint()
    for name, value in params.items():
        ckpt.add(prefix + name, value, _param_axes(name, value.ndim))
    ckpt.meta.setdefault("frozen", {})
    ckpt.meta["frozen"].update({name: params.params[name].frozen for name in params})
    return ckpt


def unpack_parameters(ckpt, prefix="param/"):
    params = ParameterSet()
    frozen = ckpt.meta.get("frozen", {})
    for name, arr in ckpt.arrays.items():
        if name.startswith(prefix):
            key = name[len(prefix):]
            params.add(key, arr.copy(), frozen.get(key, False))
    return params


def pack_series(layers, ckpt=None, prefix="series/"):
    """Store GroSS layers (``{name: GroSSLayer}``) with per-size rank labels."""
    ckpt = ckpt if ckpt is not None else Checkpoint()
    info = ckpt.meta.setdefault("series", {})
    for lname, layer in layers.items():
        m = layer.meta
        info[lname] = {
            "meta": {
                "in_channels": m.in_channels, "out_channels": m.out_channels, "kernel": list(m.kernel),
                "stride": m.stride, "padding": m.padding, "has_bias": m.has_bias,
                "width_in": m.width_in, "width_out": m.width_out,
            },
            "sizes": list(layer.sizes),
            "ranks": [[m.rank(s).t_prime, m.rank(s).u_prime] for s in layer.sizes],
            "quanta": {k: float(v) for k, v in layer.quanta.items()},
            "errors": [float(e) for e in layer.errors],
        }
        for i, s in enumerate(layer.sizes):
            tag = f"{prefix}{lname}/s={s}"
            ckpt.add(f"{tag}/P", layer.P_parts[i], ["in", "width_in", "1", "1"])
            ckpt.add(f"{tag}/R", layer.R_parts[i], ["in_per_group", "width_out", "kh", "kw"])
            ckpt.add(f"{tag}/Q", layer.Q_parts[i], ["width_out", "out", "1", "1"])
        if layer.bias is not None:
            ckpt.add(f"{prefix}{lname}/bias", layer.bias, ["out"])
        if layer.weight is not None:
            ckpt.add(f"{prefix}{lname}/weight", layer.weight, ["in", "out", "kh", "kw"])
    return ckpt


def unpack_series(ckpt, prefix="series/"):
    out = {}
    for lname, info in ckpt.meta.get("series", {}).items():
        md = dict(info["meta"])
        md["kernel"] = tuple(md["kernel"])
        meta = ConvMeta(**md)
        sizes = tuple(info["sizes"])
        if [[meta.rank(s).t_prime, meta.rank(s).u_prime] for s in sizes] != info["ranks"]:
            raise CheckpointCorruptError(f"rank labels of {lname} do not match its group sizes")
        parts = {k: [ckpt.arrays[f"{prefix}{lname}/s={s}/{k}"] for s in sizes] for k in "PRQ"}
        out[lname] = GroSSLayer(
            meta, sizes, parts["P"], parts["R"], parts["Q"],
            bias=ckpt.arrays.get(f"{prefix}{lname}/bias"),
            quanta=dict(info["quanta"]),
            errors=list(info["errors"]),
            weight=ckpt.arrays.get(f"{prefix}{lname}/weight"),
        )
    return out
