"""On-disk artifacts: PGM grids, raw image dumps, JSON sidecars and manifests."""

from __future__ import annotations

import json
import math
import struct
import time

import numpy as np

from .checkpoint import atomic_write
from .errors import ContractError, DmmiaError, MissingInputError, ParseError

SEPARATOR = 128


def render_grid(images, cols):
    """Tile ``images`` (n x h x w, values in [0, 1]) row-major into a binary PGM.

    Cells are separated by 1-px mid-grey lines; pixels are ``round(255 * v)``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] == 0:
        raise ContractError(f"render_grid needs a non-empty (n, h, w) stack, got shape {images.shape}")
    if cols < 1:
        raise ContractError("render_grid: cols must be >= 1")
    n, h, w = images.shape
    cols = min(cols, n)
    rows = math.ceil(n / cols)
    height, width = rows * h + rows - 1, cols * w + cols - 1
    canvas = np.full((height, width), SEPARATOR, dtype=np.uint8)
    px = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = px[i]
    if n < rows * cols:
        r, c = divmod(n, cols)
        canvas[r * (h + 1):, c * (w + 1):] = 0
    return f"P5 {width} {height} 255\n".encode() + canvas.tobytes()


def parse_pgm(buf):
    """Return the pixel array of a binary PGM written by ``render_grid``."""
    parts = buf.split(b"\n", 1)
    fields = parts[0].split()
    if len(fields) != 4 or fields[0] != b"P5" or len(parts) != 2:
        raise ParseError("not a single-line-header binary PGM", offset=0)
    width, height, maxval = (int(f) for f in fields[1:])
    body = parts[1]
    if maxval != 255 or len(body) != width * height:
        raise ParseError(f"PGM payload is {len(body)} bytes, expected {width * height}", offset=len(parts[0]) + 1)
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def encode_raw(images):
    """Little-endian f64 dump preceded by three u32 extents."""
    images = np.ascontiguousarray(images, dtype="<f8")
    if images.ndim != 3:
        raise ContractError(f"raw dump expects (n, h, w), got {images.shape}")
    return struct.pack("<3I", *images.shape) + images.tobytes()


def decode_raw(buf):
    if len(buf) < 12:
        raise ParseError("raw dump shorter than its header", offset=0)
    shape = struct.unpack("<3I", buf[:12])
    body = buf[12:]
    if len(body) != 8 * int(np.prod(shape)):
        raise ParseError(f"raw dump payload is {len(body)} bytes, expected {8 * int(np.prod(shape))}", offset=12)
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(shape)


def write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    if not path.exists():
        raise MissingInputError(f"missing input: {path}")
    return json.loads(path.read_text())


def write_text(path, text):
    atomic_write(path, text.encode())


def require(*paths):
    """Raise listing every path that does not exist."""
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise MissingInputError("missing inputs: " + ", ".join(missing))


class DigestMismatch(DmmiaError):
    pass


def check_digest(found, expected, what, force=False):
    if found != expected and not force:
        raise DigestMismatch(
            f"{what} was produced by config {found}, current config is {expected} (rerun upstream or pass --force)"
        )


class Manifest:
    """Records what one stage read and wrote, plus timing; written next to the outputs."""

    def __init__(self, stage, digest, seed):
        self.stage = stage
        self.body = {"stage": stage, "config_digest": digest, "seed": seed, "inputs": {}, "outputs": []}
        self._start = time.perf_counter()

    def input(self, path, digest):
        self.body["inputs"][str(path)] = digest

    def output(self, path):
        self.body["outputs"].append(str(path))

    def write(self, out_dir):
        self.body["wall_time_s"] = round(time.perf_counter() - self._start, 3)
        path = out_dir / "manifests" / f"{self.stage}.json"
        write_json(path, self.body)
        return path
