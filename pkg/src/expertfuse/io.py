"""File formats: PTEN tensors, key=value manifests, and seeded RNG streams.

PTEN layout: magic b"PTEN", u8 rank, little-endian u32 extents, then
little-endian float32 values in row-major order.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTEN"


def write_pten(path, array: np.ndarray):
    array = np.asarray(array, dtype=np.float64)
    extents = array.shape
    if len(extents) > 255:
        raise ValueError(f"rank {len(extents)} exceeds the u8 rank field")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", len(extents)))
        for extent in extents:
            fh.write(struct.pack("<I", extent))
        fh.write(array.astype("<f4").tobytes(order="C"))


def read_pten(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<B", fh.read(1))
        extents = [struct.unpack("<I", fh.read(4))[0] for _ in range(rank)]
        count = int(np.prod(extents)) if extents else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError(f"{path}: truncated payload")
        values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return values.reshape(extents)


def write_keyvalues(path, mapping: dict):
    """UTF-8 key=value lines, keys written in the mapping's order."""
    lines = [f"{key}={value}\n" for key, value in mapping.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_keyvalues(path) -> dict:
    result = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed line {line!r}")
        key, _, value = line.partition("=")
        result[key.strip()] = value.strip()
    return result


def format_float(value: float) -> str:
    """Shortest round-trip decimal form, stable across runs."""
    return repr(float(value))


def sha256_array(array: np.ndarray) -> str:
    array = np.ascontiguousarray(array)
    digest = hashlib.sha256()
    digest.update(str(array.shape).encode())
    digest.update(array.tobytes())
    return digest.hexdigest()


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def sha256_tree(root) -> str:
    """Hash of every file under ``root``, in sorted relative-path order."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def seeded_rng(*keys) -> np.random.Generator:
    """Generator derived from a stable hash of the key tuple.

    Keys may be ints or strings; the same tuple always yields the same
    stream, independent of platform or call order.
    """
    digest = hashlib.sha256()
    for key in keys:
        digest.update(repr(key).encode())
        digest.update(b"\x00")
    entropy = int.from_bytes(digest.digest()[:16], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
