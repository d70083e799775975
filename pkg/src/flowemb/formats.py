"""Binary artifact containers (weights, embedding databases), neighborhoods and run manifests.

Both binary formats are little-endian and end with a 64-bit checksum equal to
the byte sum of the checksummed payload modulo 2**64. Readers verify the magic
and the checksum before returning anything.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .retrieval import EmbeddingDB, Neighborhoods

WEIGHTS_MAGIC = b"TCNET1\n"
EMBDB_MAGIC = b"EMBDB1\n"


class ArtifactError(ValueError):
    """A malformed artifact file."""


class ChecksumError(ArtifactError):
    """Checksum mismatch or truncation."""


def byte_checksum(*chunks: bytes) -> int:
    total = 0
    for c in chunks:
        total += int(np.frombuffer(c, dtype=np.uint8).sum(dtype=np.uint64))
    return total % (1 << 64)


class _Reader:
    def __init__(self, data: bytes, kind: str) -> None:
        self.data, self.pos, self.kind = data, 0, kind

    def take(self, n: int, section: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ChecksumError(f"{self.kind}: file truncated in {section}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def _read_bytes(path: str | Path, kind: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"{kind}: cannot read {path}: {exc.strerror}") from None


# ---------------------------------------------------------------- weights


def encode_weights(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [WEIGHTS_MAGIC, struct.pack("<I", len(tensors))]
    values = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ArtifactError(f"weights: tensor {name!r} cannot be encoded")
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), payload]
        values.append(payload)
    parts.append(struct.pack("<Q", byte_checksum(*values)))
    return b"".join(parts)


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data, "weights")
    if r.take(len(WEIGHTS_MAGIC), "magic") != WEIGHTS_MAGIC:
        raise ArtifactError("weights: bad magic")
    (count,) = r.unpack("<I", "header")
    out: dict[str, np.ndarray] = {}
    values = []
    for i in range(count):
        section = f"tensor {i}"
        (nlen,) = r.unpack("<H", section)
        try:
            name = r.take(nlen, section).decode("utf-8")
        except UnicodeDecodeError:
            raise ArtifactError(f"weights: {section} has an undecodable name") from None
        (rank,) = r.unpack("<B", section)
        shape = r.unpack(f"<{rank}I", section)
        n = int(np.prod(shape, dtype=np.int64))
        raw = r.take(4 * n, f"tensor {name!r} values")
        values.append(raw)
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    (stored,) = r.unpack("<Q", "checksum")
    if r.remaining:
        raise ArtifactError("weights: trailing bytes after checksum")
    if stored != byte_checksum(*values):
        raise ChecksumError("weights: checksum mismatch in tensor values")
    return out


def save_weights(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_weights(tensors))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    return decode_weights(_read_bytes(path, "weights"))


# ---------------------------------------------------------------- embedding database


def encode_embdb(db: EmbeddingDB, names: list[str]) -> bytes:
    n, d = db.vectors.shape
    if n == 0:
        raise ArtifactError("embedding db: refusing to save an empty database")
    if db.labels.min() < 0 or db.labels.max() >= len(names):
        raise ArtifactError("embedding db: label outside the name table")
    vec = np.ascontiguousarray(db.vectors, dtype="<f4").tobytes()
    lab = np.ascontiguousarray(db.labels, dtype="<u4").tobytes()
    table = b"".join(struct.pack("<H", len(b)) + b for b in (s.encode("utf-8") for s in names))
    return b"".join([EMBDB_MAGIC, struct.pack("<II", n, d), vec, lab, table, struct.pack("<Q", byte_checksum(vec, lab, table))])


def decode_embdb(data: bytes) -> EmbeddingDB:
    r = _Reader(data, "embedding db")
    if r.take(len(EMBDB_MAGIC), "magic") != EMBDB_MAGIC:
        raise ArtifactError("embedding db: bad magic")
    n, d = r.unpack("<II", "header")
    if n == 0:
        raise ArtifactError("embedding db: empty database")
    vec = r.take(4 * n * d, "vectors")
    lab = r.take(4 * n, "labels")
    start = r.pos
    names = []
    while r.remaining > 8:
        (length,) = r.unpack("<H", "name table")
        try:
            names.append(r.take(length, "name table").decode("utf-8"))
        except UnicodeDecodeError:
            raise ArtifactError("embedding db: undecodable name in name table") from None
    table = data[start:r.pos]
    (stored,) = r.unpack("<Q", "checksum")
    if stored != byte_checksum(vec, lab, table):
        raise ChecksumError("embedding db: checksum mismatch in vectors/labels/name table")
    vectors = np.frombuffer(vec, dtype="<f4").reshape(n, d).astype(np.float32)
    labels = np.frombuffer(lab, dtype="<u4").astype(np.int64)
    if labels.max() >= len(names):
        raise ArtifactError("embedding db: label outside the name table")
    try:
        return EmbeddingDB(vectors, labels, names)
    except ValueError as exc:
        raise ArtifactError(f"embedding db: {exc}") from None


def save_embdb(path: str | Path, db: EmbeddingDB, names: list[str]) -> None:
    Path(path).write_bytes(encode_embdb(db, names))


def load_embdb(path: str | Path) -> EmbeddingDB:
    return decode_embdb(_read_bytes(path, "embedding db"))


# ---------------------------------------------------------------- neighborhoods


NEIGHBORS_HEADER = "query,rank,db_index,similarity"


def save_neighbors(path: str | Path, nb: Neighborhoods) -> None:
    q, k = nb.indices.shape
    lines = [NEIGHBORS_HEADER]
    for i in range(q):
        for j in range(k):
            lines.append(f"{i},{j},{int(nb.indices[i, j])},{float(nb.similarities[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_neighbors(path: str | Path) -> Neighborhoods:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ArtifactError(f"neighbors: cannot read {path}: {exc.strerror}") from None
    if not lines or lines[0] != NEIGHBORS_HEADER:
        raise ArtifactError("neighbors: bad header")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 4:
            raise ArtifactError(f"neighbors: line {ln} has {len(parts)} fields")
        try:
            rows.append((int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])))
        except ValueError:
            raise ArtifactError(f"neighbors: line {ln} is not numeric") from None
    if not rows:
        raise ArtifactError("neighbors: no entries")
    q = max(r[0] for r in rows) + 1
    k = max(r[1] for r in rows) + 1
    if len(rows) != q * k:
        raise ArtifactError("neighbors: ragged neighborhoods")
    idx = np.empty((q, k), dtype=np.int64)
    sim = np.empty((q, k), dtype=np.float64)
    for a, b, c, s in rows:
        idx[a, b], sim[a, b] = c, s
    return Neighborhoods(idx, sim)


# ---------------------------------------------------------------- manifests


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path: str | Path, command: str, config: dict, inputs: dict, outputs: dict) -> dict:
    """Record config, seeds and input/output checksums; no timestamps, so reruns compare equal."""
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in sorted(inputs.items())},
        "outputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in sorted(outputs.items())},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
