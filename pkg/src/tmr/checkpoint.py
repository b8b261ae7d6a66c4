"""Checkpoints: a text manifest plus one little-endian float64 blob.

Manifest lines::

    tmr-checkpoint 1
    step <int>
    config_hash <hex>
    meta <key> <value>
    tensor <name> <dtype> <d0,d1,...> <byte offset> <byte length>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "tmr-checkpoint 1"
DTYPE = "<f8"


class CheckpointError(ValueError):
    pass


def write_checkpoint(prefix, arrays, step, config_hash, meta=None):
    """Write ``<prefix>.manifest`` and ``<prefix>.bin``; returns the manifest path."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest = prefix.with_name(prefix.name + ".manifest")
    blob = prefix.with_name(prefix.name + ".bin")
    lines = [MAGIC, f"step {int(step)}", f"config_hash {config_hash}"]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in str(k)):
            raise CheckpointError(f"meta key {k!r} contains whitespace")
        lines.append(f"meta {k} {v}")
    offset = 0
    with open(blob, "wb") as fh:
        for name, arr in arrays.items():
            if any(c.isspace() for c in name):
                raise CheckpointError(f"tensor name {name!r} contains whitespace")
            data = np.array(arr, dtype=DTYPE, order="C")
            raw = data.tobytes()
            shape = ",".join(str(d) for d in data.shape)
            lines.append(f"tensor {name} float64 {shape} {offset} {len(raw)}")
            fh.write(raw)
            offset += len(raw)
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


class Checkpoint:
    """Lazy reader. ``accessed`` records every tensor name actually read."""

    def __init__(self, manifest_path):
        self.manifest_path = Path(manifest_path)
        if self.manifest_path.suffix != ".manifest":
            self.manifest_path = self.manifest_path.with_name(self.manifest_path.name + ".manifest")
        if not self.manifest_path.exists():
            raise FileNotFoundError(self.manifest_path)
        self.blob_path = self.manifest_path.with_suffix(".bin")
        self.step = None
        self.config_hash = None
        self.meta = {}
        self.index = {}
        self.accessed = set()
        lines = self.manifest_path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != MAGIC:
            raise CheckpointError(f"{self.manifest_path}: not a checkpoint manifest")
        for line in lines[1:]:
            parts = line.split(" ")
            if parts[0] == "step":
                self.step = int(parts[1])
            elif parts[0] == "config_hash":
                self.config_hash = parts[1]
            elif parts[0] == "meta":
                self.meta[parts[1]] = " ".join(parts[2:])
            elif parts[0] == "tensor":
                name, dtype, shape, off, n = parts[1:6]
                dims = tuple(int(d) for d in shape.split(",")) if shape else ()
                self.index[name] = (dims, int(off), int(n))
            elif line.strip():
                raise CheckpointError(f"{self.manifest_path}: bad line {line!r}")

    def names(self):
        return list(self.index)

    def read(self, name):
        dims, off, n = self.index[name]
        self.accessed.add(name)
        with open(self.blob_path, "rb") as fh:
            fh.seek(off)
            raw = fh.read(n)
        if len(raw) != n:
            raise CheckpointError(f"{self.blob_path}: truncated tensor {name}")
        return np.frombuffer(raw, dtype=DTYPE).reshape(dims).astype(np.float64)

    def read_many(self, names):
        return {k: self.read(k) for k in names}
