"""Checkpoint files: a plain-text manifest next to a float32 blob.

``X.manifest`` looks like::

    rarec-checkpoint 1
    seed 42
    meta hash_function blake2b64-mod
    tensor encoder/tok_emb 8192,32 0 1048576
    checksum encoder 3f9a...
    blob 7c1e...

Tensors are little-endian float32, row-major, concatenated in manifest order
into ``X.bin``. The blob line is the sha256 of the whole blob; component
checksums cover the float32 values of every tensor sharing a name prefix
(the part before the first ``/``).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
MAGIC = "rarec-checkpoint"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]  # float32 arrays
    seed: int = 0
    meta: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)

    def component(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped, as float64."""
        p = prefix + "/"
        return {k[len(p):]: v.astype(np.float64) for k, v in self.tensors.items() if k.startswith(p)}


def paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".manifest", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".manifest"), stem.with_name(stem.name + ".bin")


def to_float32(a: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return np.require(np.asarray(a, dtype=_LE_F32), requirements="C")


def component_checksums(tensors: Mapping[str, np.ndarray]) -> dict[str, str]:
    groups: dict = {}
    for name in sorted(tensors):
        comp = name.split("/", 1)[0]
        h = groups.setdefault(comp, hashlib.sha256())
        arr = to_float32(tensors[name])
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return {k: h.hexdigest() for k, h in groups.items()}


def _check_token(s: str, what: str) -> None:
    if not s or any(c.isspace() for c in s):
        raise CheckpointError(f"{what} must be non-empty without whitespace: {s!r}")


def save(stem: str | Path, tensors: Mapping[str, np.ndarray], *, seed: int = 0,
         meta: Mapping[str, object] | None = None) -> Path:
    """Write ``stem.manifest`` and ``stem.bin``; returns the manifest path."""
    manifest_path, blob_path = paths(stem)
    lines = [f"{MAGIC} {FORMAT_VERSION}", f"seed {int(seed)}"]
    for k, v in (meta or {}).items():
        _check_token(k, "meta key")
        v = str(v)
        if "\n" in v:
            raise CheckpointError(f"meta value for {k} spans lines")
        lines.append(f"meta {k} {v}")
    blob = hashlib.sha256()
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        _check_token(name, "tensor name")
        a = to_float32(arr)
        data = a.tobytes()
        shape = ",".join(str(n) for n in a.shape)
        lines.append(f"tensor {name} {shape or '-'} {offset} {len(data)}")
        chunks.append(data)
        blob.update(data)
        offset += len(data)
    for comp, digest in component_checksums(tensors).items():
        lines.append(f"checksum {comp} {digest}")
    lines.append(f"blob {blob.hexdigest()}")
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(blob_path, "wb") as f:
        for c in chunks:
            f.write(c)
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


def load(stem: str | Path) -> Checkpoint:
    manifest_path, blob_path = paths(stem)
    try:
        text = manifest_path.read_text()
        raw = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {manifest_path}: {exc.strerror}") from exc
    lines = text.splitlines()
    if not lines or lines[0].split() != [MAGIC, str(FORMAT_VERSION)]:
        raise CheckpointError(f"{manifest_path}: not a version-{FORMAT_VERSION} checkpoint manifest")
    ckpt = Checkpoint({})
    entries = []
    blob_digest = None
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(" ", 2)
        kind = parts[0]
        if kind == "seed":
            ckpt.seed = int(parts[1])
        elif kind == "meta":
            ckpt.meta[parts[1]] = parts[2] if len(parts) > 2 else ""
        elif kind == "tensor":
            f = line.split()
            if len(f) != 5:
                raise CheckpointError(f"{manifest_path}:{n}: malformed tensor entry")
            shape = () if f[2] == "-" else tuple(int(x) for x in f[2].split(","))
            entries.append((f[1], shape, int(f[3]), int(f[4])))
        elif kind == "checksum":
            ckpt.checksums[parts[1]] = parts[2]
        elif kind == "blob":
            blob_digest = parts[1]
        elif line.strip():
            raise CheckpointError(f"{manifest_path}:{n}: unknown entry {kind!r}")
    if blob_digest is None or hashlib.sha256(raw).hexdigest() != blob_digest:
        raise ChecksumError(f"{blob_path}: blob sha256 does not match manifest")
    for name, shape, offset, nbytes in entries:
        count = int(np.prod(shape)) if shape else 1
        if nbytes != count * 4 or offset + nbytes > len(raw):
            raise CheckpointError(f"{manifest_path}: entry {name} out of range")
        ckpt.tensors[name] = np.frombuffer(raw, dtype=_LE_F32, count=count, offset=offset).reshape(shape).copy()
    actual = component_checksums(ckpt.tensors)
    if actual != ckpt.checksums:
        raise ChecksumError(f"{manifest_path}: component checksums do not match tensors")
    return ckpt


def write_item_map(path: str | Path, item_ids) -> None:
    Path(path).write_text("".join(f"{iid}\t{k}\n" for k, iid in enumerate(item_ids)))


def read_item_map(path: str | Path) -> dict[str, int]:
    out = {}
    for line in Path(path).read_text().splitlines():
        iid, idx = line.split("\t")
        out[iid] = int(idx)
    return out
