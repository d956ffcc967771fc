"""Bit-exact file codecs: tensor files, mask files, checkpoints, PGM export.

Tensor files open with the 4-byte magic ``TDY1``, then exactly one JSON
header line (UTF-8, ``\\n``-terminated), then the raw payload: little-endian,
row-major, no padding. Mask files use magic ``TDYM`` with uint8 planes.
Checkpoints are a bare JSON header line followed by named ``TDY1`` blocks
back to back. docs/formats.md pins the byte layout.
"""
from __future__ import annotations

import json
import os
from typing import BinaryIO

import numpy as np

MAGIC_TENSOR = b"TDY1"
MAGIC_MASKS = b"TDYM"

# kind tag -> (numpy dtype, bytes per element)
_KINDS = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class TdyError(Exception):
    """Base class for file-format failures."""


class TdyFormatError(TdyError):
    """Bad magic, malformed header, or payload that violates the format."""


class TdyTruncatedError(TdyError):
    """File ends before the header-declared payload does."""


class TdyMismatchError(TdyError):
    """Well-formed file whose shape/kind/semantics differ from expectations."""


def _dump_header(header: dict) -> bytes:
    # Canonical JSON: sorted keys, no spaces. Byte-identical across runs.
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def _read_header_line(f: BinaryIO) -> dict:
    raw = bytearray()
    while True:
        b = f.read(1)
        if not b:
            raise TdyTruncatedError("file ended inside the header line")
        if b == b"\n":
            break
        raw += b
        if len(raw) > 65536:
            raise TdyFormatError("header line longer than 64 KiB")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TdyFormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise TdyFormatError("header must be a JSON object")
    return header


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TdyTruncatedError(f"expected {n} bytes of {what}, got {len(buf)}")
    return buf


def write_tensor(f: BinaryIO, array: np.ndarray, kind: str, semantics: str | None = None) -> None:
    """Append one tensor block (magic + header + payload) to a stream."""
    if kind not in _KINDS:
        raise ValueError(f"unknown kind {kind!r}, expected one of {sorted(_KINDS)}")
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ValueError(f"tensor blocks are [c, h, w], got shape {arr.shape}")
    header = {"kind": kind, "shape": [int(s) for s in arr.shape]}
    if semantics is not None:
        header["semantics"] = semantics
    f.write(MAGIC_TENSOR)
    f.write(_dump_header(header))
    f.write(np.ascontiguousarray(arr, dtype=_KINDS[kind]).tobytes())


def read_tensor(f: BinaryIO) -> tuple[np.ndarray, dict]:
    """Read one tensor block from a stream; returns (array, header)."""
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC_TENSOR:
        raise TdyFormatError(f"bad magic {magic!r}, expected {MAGIC_TENSOR!r}")
    header = _read_header_line(f)
    kind = header.get("kind")
    shape = header.get("shape")
    if kind not in _KINDS:
        raise TdyFormatError(f"header kind {kind!r} is not supported")
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(s, int) and s >= 0 for s in shape)
    ):
        raise TdyFormatError(f"header shape {shape!r} is not a [c, h, w] triple")
    dtype = _KINDS[kind]
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(f, count * dtype.itemsize, "payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.copy(), header


def save_tensor(path, array: np.ndarray, kind: str, semantics: str | None = None) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array, kind, semantics)


def load_tensor(path, expect_shape=None, expect_semantics: str | None = None) -> tuple[np.ndarray, dict]:
    """Load a standalone tensor file; trailing bytes are a format error."""
    with open(path, "rb") as f:
        arr, header = read_tensor(f)
        if f.read(1):
            raise TdyFormatError("trailing data after tensor payload")
    if expect_shape is not None and tuple(arr.shape) != tuple(expect_shape):
        raise TdyMismatchError(f"tensor shape {arr.shape} != expected {tuple(expect_shape)}")
    if expect_semantics is not None and header.get("semantics") != expect_semantics:
        raise TdyMismatchError(
            f"tensor semantics {header.get('semantics')!r} != expected {expect_semantics!r}"
        )
    return arr, header


def save_masks(path, masks: np.ndarray) -> None:
    """Write a stack of binary masks, shape [m, h, w], uint8 planes."""
    arr = np.asarray(masks)
    if arr.ndim != 3:
        raise ValueError(f"mask stacks are [m, h, w], got shape {arr.shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("mask payload must be binary")
    m, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(MAGIC_MASKS)
        f.write(_dump_header({"m": int(m), "h": int(h), "w": int(w)}))
        f.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def load_masks(path, expect_hw: tuple[int, int] | None = None) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC_MASKS:
            raise TdyFormatError(f"bad magic {magic!r}, expected {MAGIC_MASKS!r}")
        header = _read_header_line(f)
        dims = [header.get(k) for k in ("m", "h", "w")]
        if not all(isinstance(d, int) and d >= 0 for d in dims):
            raise TdyFormatError(f"mask header must carry integer m/h/w, got {header!r}")
        m, h, w = dims
        payload = _read_exact(f, m * h * w, "mask payload")
        if f.read(1):
            raise TdyFormatError("trailing data after mask payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(m, h, w).copy()
    if not np.isin(arr, (0, 1)).all():
        raise TdyFormatError("mask payload contains values other than 0 and 1")
    if expect_hw is not None and (h, w) != tuple(expect_hw):
        raise TdyMismatchError(f"mask shape {(h, w)} != expected {tuple(expect_hw)}")
    return arr


def save_checkpoint(path, header: dict, blocks: dict[str, tuple[np.ndarray, str]]) -> None:
    """Write a checkpoint: JSON header line, then one named tensor block each.

    ``blocks`` maps name -> (array [c, h, w], kind). Block order and the
    header's block list are both serialized, so files are byte-stable.
    """
    names = list(blocks)
    full = dict(header)
    full["blocks"] = names
    with open(path, "wb") as f:
        f.write(_dump_header(full))
        for name in names:
            arr, kind = blocks[name]
            write_tensor(f, arr, kind)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        header = _read_header_line(f)
        names = header.get("blocks")
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise TdyFormatError("checkpoint header must carry a block name list")
        blocks = {}
        for name in names:
            arr, _ = read_tensor(f)
            blocks[name] = arr
        if f.read(1):
            raise TdyFormatError("trailing data after checkpoint blocks")
    return header, blocks


def export_pgm(path, image: np.ndarray, label_map: bool = False, max_label: int | None = None) -> None:
    """Export a single-channel image as ASCII PGM (P2, maxval 255).

    Real-valued maps must lie in [0, 1] and quantize as floor(v*255 + 0.5).
    Label maps spread ids evenly over the gray range so distinct ids stay
    distinguishable; ``max_label`` pins the scale across related exports.
    """
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"PGM export needs a single channel, got shape {arr.shape}")
    if label_map:
        ids = arr.astype(np.int64)
        if ids.size and ids.min() < 0:
            raise ValueError("label ids must be nonnegative")
        top = int(max_label) if max_label is not None else (int(ids.max()) if ids.size else 0)
        if ids.size and ids.max() > top:
            raise ValueError(f"label id {int(ids.max())} exceeds max_label {top}")
        gray = np.floor(ids * (255.0 / top) + 0.5).astype(np.int64) if top > 0 else np.zeros_like(ids)
    else:
        vals = arr.astype(np.float64)
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise ValueError("real-valued PGM export expects values in [0, 1]")
        gray = np.floor(vals * 255.0 + 0.5).astype(np.int64)
    h, w = gray.shape
    lines = [f"P2\n{w} {h}\n255\n"]
    for row in gray:
        lines.append(" ".join(str(int(v)) for v in row) + "\n")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as f:
        f.writelines(lines)
    os.replace(tmp, path)
