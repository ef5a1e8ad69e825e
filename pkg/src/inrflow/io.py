"""File formats: tensor blobs (checkpoints, dataset shards, trajectories), PLY and PPM.

Tensor blob layout (all integers little-endian)::

    b"INRFLOWT" | u32 version | u64 manifest_len | manifest (UTF-8 JSON) | raw tensor bytes

The manifest maps each key to ``{"shape", "dtype", "offset", "nbytes"}`` with
offsets relative to the start of the raw section, plus a free-form ``meta`` dict.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError
from .fields import FieldSample, grid_coords

BLOB_MAGIC = b"INRFLOWT"
BLOB_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _le_dtype(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def write_tensor_blob(path, tensors: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = {}, [], 0
    for key in sorted(tensors):
        arr = np.ascontiguousarray(tensors[key])
        arr = arr.astype(_le_dtype(arr.dtype), copy=False)
        raw = arr.tobytes()
        entries[key] = {"shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, indent=1).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(BLOB_MAGIC, BLOB_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def read_tensor_blob(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``. Raises FormatError on bad magic, version or truncation."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    magic, version, mlen = _PREFIX.unpack_from(data)
    if magic != BLOB_MAGIC:
        raise FormatError(f"{path}: not an inrflow tensor blob (magic {magic!r})", offset=0)
    if version != BLOB_VERSION:
        raise FormatError(f"{path}: unsupported blob version {version}, expected {BLOB_VERSION}", offset=8)
    start = _PREFIX.size + mlen
    if len(data) < start:
        raise FormatError(f"{path}: truncated manifest", offset=len(data))
    try:
        manifest = json.loads(data[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt manifest: {exc}", offset=_PREFIX.size) from exc
    tensors = {}
    for key, e in manifest["tensors"].items():
        lo = start + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise FormatError(f"{path}: tensor {key!r} truncated", offset=len(data))
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=math.prod(e["shape"]), offset=lo)
        tensors[key] = arr.reshape(e["shape"]).copy()
    return tensors, manifest["meta"]


# -- datasets on disk --------------------------------------------------------------------


def save_dataset(directory, samples: Sequence[FieldSample], spec: dict | None = None, shard_size: int = 256):
    """Write shards ``shard_XXXX.inrt`` plus a human-readable ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shards = []
    for k, lo in enumerate(range(0, len(samples), shard_size)):
        chunk = samples[lo: lo + shard_size]
        name = f"shard_{k:04d}.inrt"
        tensors = {
            "coords": np.stack([s.coords for s in chunk]),
            "values": np.stack([s.values for s in chunk]),
            "conditions": np.array([-1 if s.condition is None else s.condition for s in chunk], dtype=np.int64),
        }
        write_tensor_blob(directory / name, tensors, {"sample_ids": [s.sample_id for s in chunk]})
        shards.append({"file": name, "count": len(chunk)})
    first = samples[0]
    index = {
        "format": "inrflow-dataset",
        "version": 1,
        "count": len(samples),
        "num_points": first.num_points,
        "coord_dim": first.coords.shape[1],
        "value_dim": first.values.shape[1],
        "spec": spec or {},
        "shards": shards,
    }
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> tuple[list[FieldSample], dict]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise FormatError(f"{directory}: no index.json (not a dataset directory)")
    index = json.loads(index_path.read_text())
    samples = []
    for shard in index["shards"]:
        tensors, meta = read_tensor_blob(directory / shard["file"])
        for c, v, cond, sid in zip(tensors["coords"], tensors["values"], tensors["conditions"], meta["sample_ids"]):
            samples.append(FieldSample(c, v, None if cond < 0 else int(cond), sid))
    return samples, index


# -- PLY ---------------------------------------------------------------------------------


def write_ply(path, points, colors=None) -> None:
    """ASCII PLY with float x y z and optional uchar red green blue."""
    points = np.asarray(points, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i, p in enumerate(points):
        row = " ".join(f"{x:.9g}" for x in p)
        if colors is not None:
            row += " " + " ".join(str(int(c)) for c in colors[i])
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    """Read an ASCII PLY written by :func:`write_ply`. Returns ``(points, colors or None)``."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing 'ply' magic", offset=0)
    n, props, i = None, [], 1
    while i < len(lines) and lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["format", "binary_little_endian"] or parts[:2] == ["format", "binary_big_endian"]:
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[-1])
        i += 1
    if n is None or i == len(lines):
        raise FormatError(f"{path}: malformed PLY header")
    body = lines[i + 1: i + 1 + n]
    if len(body) < n:
        raise FormatError(f"{path}: expected {n} vertices, found {len(body)}", offset=len(text.encode()))
    table = np.array([[float(x) for x in row.split()] for row in body]).reshape(n, len(props))
    xyz = table[:, [props.index(k) for k in ("x", "y", "z")]]
    colors = None
    if "red" in props:
        colors = table[:, [props.index(k) for k in ("red", "green", "blue")]].astype(np.uint8)
    return xyz, colors


# -- PPM ---------------------------------------------------------------------------------


def values_to_pixels(values, side: int) -> np.ndarray:
    """Rasterize row-major grid values in [-1, 1] to an (side, side, 3) uint8 image."""
    values = np.asarray(values, dtype=np.float64).reshape(side, side, -1)
    if values.shape[-1] == 1:
        values = np.repeat(values, 3, axis=-1)
    return np.clip(np.rint((values + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_ppm(path, pixels) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header", offset=pos)
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: expected P6 magic, got {tokens[0]!r}", offset=0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported")
    pos += 1
    if len(data) - pos < w * h * 3:
        raise FormatError(f"{path}: truncated pixel data", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()


def ppm_to_sample(path) -> FieldSample:
    pixels = read_ppm(path)
    h, w, _ = pixels.shape
    if h != w:
        raise FormatError(f"{path}: only square images are supported")
    values = pixels.reshape(-1, 3).astype(np.float64) / 127.5 - 1.0
    return FieldSample(grid_coords(h, 2), values, None, Path(path).stem)
