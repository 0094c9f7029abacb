"""Binary file formats, checkpoints and the on-disk dataset layout.

Tensor file (``.sdtf``), little-endian::

    b"SDTF" | u16 version | u16 rank | u32 dims[rank] | f32 payload[prod(dims)]

Embedding-table file (``.sdet``), little-endian::

    b"SDET" | u16 version | u32 K | u32 C_E
    | K x (u32 byte length, UTF-8 prompt) | f32 payload[K * C_E], class-major

Checkpoints are ``.npz`` archives of float64 parameters plus the JSON config.
All writers go through :func:`atomic_write` so a failed command never leaves
a partial file behind.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .semantic import LabelEmbeddingTable, UNKNOWN_LABEL, prompt_template

TENSOR_MAGIC = b"SDTF"
TABLE_MAGIC = b"SDET"
FORMAT_VERSION = 1
DATASET_FORMAT = "panodiff-dataset"


class FormatError(ValueError):
    """A file does not follow its declared format."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    header = struct.pack("<4sHH", TENSOR_MAGIC, FORMAT_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise FormatError("truncated tensor header")
    magic, version, rank = struct.unpack_from("<4sHH", buf, 0)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    end = 8 + 4 * rank
    if len(buf) < end:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - end != 4 * count:
        raise FormatError(f"payload holds {len(buf) - end} bytes, dims {dims} need {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=end).reshape(dims).astype(np.float32)


def save_tensor(path, arr) -> None:
    atomic_write(path, encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def encode_table(table: LabelEmbeddingTable) -> bytes:
    k, c_e = table.num_classes, table.dim
    if len(table.prompts) != k:
        raise FormatError("embedding table needs one prompt per class")
    table.unknown_id  # raises when the Unknown class is missing
    parts = [struct.pack("<4sHII", TABLE_MAGIC, FORMAT_VERSION, k, c_e)]
    for p in table.prompts:
        raw = p.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(np.ascontiguousarray(table.table.T, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_table(buf: bytes) -> LabelEmbeddingTable:
    head = struct.calcsize("<4sHII")
    if len(buf) < head:
        raise FormatError("truncated embedding-table header")
    magic, version, k, c_e = struct.unpack_from("<4sHII", buf, 0)
    if magic != TABLE_MAGIC:
        raise FormatError(f"bad embedding-table magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported embedding-table version {version}")
    pos = head
    prompts = []
    for _ in range(k):
        if len(buf) < pos + 4:
            raise FormatError("truncated label list")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + n:
            raise FormatError("truncated label string")
        try:
            prompts.append(buf[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"label is not valid UTF-8: {exc}") from exc
        pos += n
    if len(buf) - pos != 4 * k * c_e:
        raise FormatError(f"payload holds {len(buf) - pos} bytes, table ({c_e}x{k}) needs {4 * k * c_e}")
    data = np.frombuffer(buf, dtype="<f4", offset=pos).reshape(k, c_e).T.astype(np.float64)
    if prompt_template(UNKNOWN_LABEL) not in prompts:
        raise FormatError("embedding table has no Unknown class")
    try:
        return LabelEmbeddingTable(data, prompts)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_table(path, table: LabelEmbeddingTable) -> None:
    atomic_write(path, encode_table(table))


def load_table(path) -> LabelEmbeddingTable:
    return decode_table(Path(path).read_bytes())


def save_checkpoint(path, params: dict, config_json: str, step: int = 0) -> None:
    buf = io.BytesIO()
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in sorted(params.items())}
    np.savez(buf, __config__=np.array(config_json), __step__=np.array(step, dtype=np.int64), **arrays)
    atomic_write(path, buf.getvalue())


def load_checkpoint(path):
    """Return ``(params, config_json, step)``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            params = {k: z[k] for k in z.files if not k.startswith("__")}
            config_json = str(z["__config__"])
            step = int(z["__step__"])
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a checkpoint ({exc})") from exc
    return params, config_json, step


def write_dataset(directory, panoramas, segmaps, table: LabelEmbeddingTable, extra=None) -> dict:
    """Write pairs of tensor files plus ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    items = []
    for n, (x, s) in enumerate(zip(panoramas, segmaps)):
        pano, seg = f"pano_{n:04d}.sdtf", f"seg_{n:04d}.sdtf"
        save_tensor(directory / pano, x)
        save_tensor(directory / seg, s)
        items.append({"id": f"{n:04d}", "panorama": pano, "segmap": seg})
    save_table(directory / "labels.sdet", table)
    manifest = {"format": DATASET_FORMAT, "version": FORMAT_VERSION,
                "num_classes": table.num_classes, "embedding_table": "labels.sdet",
                "items": items, **(extra or {})}
    atomic_write(directory / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def load_dataset(directory):
    """Return ``(panoramas, segmaps, table, manifest)`` with ids as int64."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{directory}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != DATASET_FORMAT or "items" not in manifest:
        raise FormatError(f"{directory}: manifest is not a {DATASET_FORMAT}")
    table = load_table(directory / manifest["embedding_table"])
    panos = [load_tensor(directory / it["panorama"]).astype(np.float64) for it in manifest["items"]]
    segs = []
    for it in manifest["items"]:
        s = load_tensor(directory / it["segmap"])
        if not np.all(np.mod(s, 1) == 0):
            raise FormatError(f"{it['segmap']}: class ids must be integers")
        segs.append(s.astype(np.int64))
    return panos, segs, table, manifest
