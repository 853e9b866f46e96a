"""File formats: 8-bit PGM/PNG images, MGRN1 checkpoints, metric CSVs."""

from __future__ import annotations

import csv
import hashlib
import re
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

MAGIC = b"MGRN1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed image, checkpoint or table file."""


# -- images ----------------------------------------------------------------------
_PGM_TOKEN = re.compile(rb"(#[^\n]*\n?)|(\s+)|(\S+)")


def _pgm_header(buf: bytes) -> Tuple[int, int, int, int]:
    """Parse ``P5 <w> <h> <maxval>``; returns (w, h, maxval, payload offset)."""
    if not buf.startswith(b"P5"):
        raise FormatError("not a binary PGM (magic P5 expected)")
    pos, values = 2, []
    while len(values) < 3:
        m = _PGM_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated PGM header")
        pos = m.end()
        if m.group(3) is not None:
            try:
                values.append(int(m.group(3)))
            except ValueError as exc:
                raise FormatError(f"bad PGM header token {m.group(3)!r}") from exc
    if pos >= len(buf) + 1 or not buf[pos:pos + 1].isspace():
        raise FormatError("PGM header must end with a single whitespace byte")
    w, h, maxval = values
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise FormatError(f"unsupported PGM geometry/maxval {values}")
    return w, h, maxval, pos + 1


def read_pgm(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, maxval, off = _pgm_header(buf)
    payload = buf[off:off + w * h]
    if len(payload) != w * h:
        raise FormatError(f"truncated PGM payload: {len(payload)} of {w * h} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    q = quantize(image)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())


def read_image(path: PathLike) -> np.ndarray:
    """Grayscale image in [0, 1]; PGM natively, PNG through Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return read_pgm(path)


def write_image(path: PathLike, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(quantize(image), mode="L").save(path)
    else:
        write_pgm(path, image)


# -- checkpoints ---------------------------------------------------------------------
def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_checkpoint(state: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, value in state.items():
        arr = np.asarray(value)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def decode_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < len(MAGIC) + 12 or not blob.startswith(MAGIC):
        raise FormatError("not an MGRN1 checkpoint")
    body, digest = blob[:-8], blob[-8:]
    if _checksum(body) != digest:
        raise FormatError("checkpoint checksum mismatch")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos += 4
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            payload = body[pos:pos + 4 * count]
            if len(payload) != 4 * count:
                raise FormatError(f"truncated payload for {name}")
            state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise FormatError("truncated checkpoint") from exc
    return state


def save_checkpoint(path: PathLike, state: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())


# -- small tables ---------------------------------------------------------------------
def write_metric_csv(path: PathLike, rows: Iterable[Tuple[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, repr(float(v)) if not isinstance(v, str) else v])


def read_metric_csv(path: PathLike) -> Dict[str, float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["metric", "value"]:
            raise FormatError(f"{path}: header must be metric,value")
        return {r["metric"]: float(r["value"]) for r in reader}


def write_xy_csv(path: PathLike, header: Tuple[str, ...], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) for v in row])


def file_digest(paths: Iterable[PathLike]) -> str:
    """sha256 over the sorted paths' bytes, for run logs."""
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(Path(p).read_bytes())
    return h.hexdigest()
