"""Section-tagged binary checkpoint container.

Layout: magic b"GTCK", uint32 version (1), uint32 section count, then per
section: uint16 name length, utf-8 name, uint64 payload size, payload bytes.
All numeric payloads are little-endian; feature/weight tensors are stored as
row-major 32-bit floats behind a small shape header (uint32 ndim, uint32
dims). Sections written by `save_checkpoint`:

  meta      JSON: seed, epoch, keyframe, normalization, resolved config text
  grid_p    uint32 level count; per level uint32 resolution, uint32 channels,
            node features
  grid_n    uint32 resolution, uint32 channels, node features
  mlp       uint32 layer count; per layer W then b
  time_enc  JSON header (variant, frequencies) + variant-specific tensors
  adam      uint32 group count; per group name, uint64 step, tensor pairs
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_array(buf: io.BytesIO) -> np.ndarray:
    (ndim,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(buf.read(4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float64)


def _write_str(buf: io.BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode("utf-8")


def save_checkpoint(state, path: str | Path, config_text: str = "") -> None:
    """Serialize grids, decoder, optimizer moments, seed, and config."""
    sections: list[tuple[str, bytes]] = []

    meta = {
        "seed": state.config.seed,
        "epoch": state.epoch,
        "keyframe": state.t_key,
        "center": state.transform.center.tolist(),
        "scale": state.transform.scale,
        "config": config_text,
    }
    sections.append(("meta", json.dumps(meta).encode("utf-8")))

    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(state.pyramid.position_levels)))
    for level in state.pyramid.position_levels:
        buf.write(struct.pack("<II", level.resolution, level.channels))
        _write_array(buf, level.features)
    sections.append(("grid_p", buf.getvalue()))

    buf = io.BytesIO()
    nl = state.pyramid.normal_level
    buf.write(struct.pack("<II", nl.resolution, nl.channels))
    _write_array(buf, nl.features)
    sections.append(("grid_n", buf.getvalue()))

    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(state.model.layers)))
    for w, b in state.model.layers:
        _write_array(buf, w)
        _write_array(buf, b)
    sections.append(("mlp", buf.getvalue()))

    buf = io.BytesIO()
    enc = state.time_encoder
    _write_str(buf, json.dumps({"variant": enc.variant, "frequencies": enc.frequencies}))
    if enc.variant == "gaussian":
        _write_array(buf, enc.gaussian_b)
    elif enc.variant == "learned":
        for w, b in enc.learned_params:
            _write_array(buf, w)
            _write_array(buf, b)
    sections.append(("time_enc", buf.getvalue()))

    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(state.adam)))
    for name, group in state.adam.items():
        _write_str(buf, name)
        buf.write(struct.pack("<QI", group.t, len(group.m)))
        for m, v in zip(group.m, group.v):
            _write_array(buf, m)
            _write_array(buf, v)
    sections.append(("adam", buf.getvalue()))

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(sections)))
        for name, payload in sections:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_checkpoint(path: str | Path) -> dict:
    """Read a checkpoint back into plain dictionaries and arrays."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        sections = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (size,) = struct.unpack("<Q", fh.read(8))
            sections[name] = fh.read(size)

    out: dict = {"meta": json.loads(sections["meta"].decode("utf-8"))}

    buf = io.BytesIO(sections["grid_p"])
    (levels,) = struct.unpack("<I", buf.read(4))
    out["grid_p"] = []
    for _ in range(levels):
        resolution, channels = struct.unpack("<II", buf.read(8))
        out["grid_p"].append({"resolution": resolution, "channels": channels,
                              "features": _read_array(buf)})

    buf = io.BytesIO(sections["grid_n"])
    resolution, channels = struct.unpack("<II", buf.read(8))
    out["grid_n"] = {"resolution": resolution, "channels": channels,
                     "features": _read_array(buf)}

    buf = io.BytesIO(sections["mlp"])
    (layer_count,) = struct.unpack("<I", buf.read(4))
    out["mlp"] = [(_read_array(buf), _read_array(buf)) for _ in range(layer_count)]

    buf = io.BytesIO(sections["time_enc"])
    header = json.loads(_read_str(buf))
    out["time_enc"] = header
    if header["variant"] == "gaussian":
        out["time_enc"]["gaussian_b"] = _read_array(buf)
    elif header["variant"] == "learned":
        out["time_enc"]["layers"] = [(_read_array(buf), _read_array(buf)) for _ in range(2)]

    buf = io.BytesIO(sections["adam"])
    (group_count,) = struct.unpack("<I", buf.read(4))
    out["adam"] = {}
    for _ in range(group_count):
        name = _read_str(buf)
        step, arr_count = struct.unpack("<QI", buf.read(12))
        pairs = [(_read_array(buf), _read_array(buf)) for _ in range(arr_count)]
        out["adam"][name] = {"step": step, "moments": pairs}
    return out
