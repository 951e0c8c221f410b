"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DMIA1"
    u32 metadata length, then that many bytes of UTF-8 JSON (sorted keys)
    u32 block count
    per block:
        u16 name length, name (UTF-8)
        u8  ndim, ndim x u32 extents
        prod(extents) x f64 values, row-major

The metadata always carries ``kind`` and ``arch`` so ``load_checkpoint``
can rebuild the object, plus whatever the caller adds (seed, config
digest, ...). Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"DMIA1"


def encode(named_params, metadata):
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(named_params))]
    for name, arr in named_params:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf):
    """Return ``(metadata, [(name, array), ...])``."""
    if buf[:5] != MAGIC:
        raise CheckpointError(f"bad magic: found {bytes(buf[:5])!r}, expected {MAGIC!r}")
    pos = 5

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated {what} at offset {pos}: need {n} bytes, have {len(buf) - pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    try:
        meta = json.loads(take(mlen, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata: {exc}") from None
    (nblocks,) = struct.unpack("<I", take(4, "block count"))
    blocks = []
    for i in range(nblocks):
        (nlen,) = struct.unpack("<H", take(2, f"block {i} name length"))
        name = take(nlen, f"block {i} name").decode()
        (ndim,) = struct.unpack("<B", take(1, f"block {name!r} rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"block {name!r} shape"))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * count, f"block {name!r}"), dtype="<f8").astype(np.float64)
        blocks.append((name, data.reshape(shape)))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last block")
    return meta, blocks


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model, path, **metadata):
    meta = {"kind": model.kind, "arch": model.arch(), **metadata}
    if getattr(model, "metadata", None):
        meta.setdefault("model_metadata", model.metadata)
    atomic_write(path, encode(model.state_blocks(), meta))


def load_checkpoint(path, into=None):
    """Load a checkpoint, either into an existing model or into a freshly built one.

    The loaded model's ``checkpoint_metadata`` attribute holds the metadata.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    meta, blocks = decode(path.read_bytes())
    model = into if into is not None else build_model(meta)
    load_blocks(model, blocks)
    model.checkpoint_metadata = meta
    if "model_metadata" in meta and hasattr(model, "metadata"):
        model.metadata = dict(meta["model_metadata"])
    return model


def load_blocks(model, blocks):
    """Copy decoded blocks into ``model`` after checking names and shapes."""
    expected = model.state_blocks()
    shapes = {n: np.shape(a) for n, a in expected}
    names = [n for n, _ in blocks]
    if names != [n for n, _ in expected]:
        missing = sorted(set(shapes) - set(names))
        extra = sorted(set(names) - set(shapes))
        raise CheckpointError(f"block names differ from model: missing {missing}, unexpected {extra}")
    for name, arr in blocks:
        if shapes[name] != arr.shape:
            raise CheckpointError(f"shape mismatch in block {name!r}: file {arr.shape}, model {shapes[name]}")
    model.load_state_blocks(blocks)


def build_model(meta):
    from . import models, prototypes

    kind, arch = meta.get("kind"), meta.get("arch", {})
    if kind == "classifier":
        clf = models.Classifier(arch["n_classes"], arch["hidden"], seed=arch.get("seed", 0), in_dim=arch["in_dim"])
        clf.set_trainable(False)
        return clf
    if kind == "generator":
        gen = models.Generator(arch["z_dim"], arch["w_dim"], arch["hidden"])
        if arch.get("encoder"):
            gen.encoder = models.make_encoder(arch["hidden"], arch["w_dim"], 0)
        gen.synthesis.set_trainable(False)
        return gen
    if kind == "banks":
        return prototypes.Banks.empty(**arch)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")
