"""Readers and writers for the on-disk exchange formats.

Text formats are tab separated with a mandatory header line.  Binary
containers are little-endian and start with a 4-byte tag.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import EmbeddingSet, ScoreSet, TrialKey, TrialList

TRIALS_HEADER = ("modelid", "segmentid")
KEY_HEADER = ("modelid", "segmentid", "targettype")
SCORES_HEADER = ("modelid", "segmentid", "LLR")
DURATIONS_HEADER = ("segmentid", "seconds")
MANIFEST_HEADER = ("modelid", "segmentid")

TARGET_TYPES = {"target": True, "nontarget": False}


class FileFormatError(ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = None if path is None else str(path)
        self.line = line
        self.message = message
        where = self.path or "<text>"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")


def _rows(text: str, header: Sequence[str], path, ncols=None):
    """Yield (line_no, fields) after validating the header."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FileFormatError("missing header", path, 1)
    head = lines[0].rstrip("\r").split("\t")
    want = ncols or {len(header)}
    if tuple(head[: len(header)]) != tuple(header) or len(head) not in want:
        raise FileFormatError(f"expected header {'<TAB>'.join(header)!r}", path, 1)
    for n, raw in enumerate(lines[1:], start=2):
        fields = raw.rstrip("\r").split("\t")
        if len(fields) not in want:
            raise FileFormatError(
                f"expected {' or '.join(map(str, sorted(want)))} columns, got {len(fields)}", path, n)
        if any(f == "" for f in fields):
            raise FileFormatError("empty field", path, n)
        yield n, fields


def _finite(tok, path, n, what="score"):
    try:
        v = float(tok)
    except ValueError:
        raise FileFormatError(f"non-numeric {what} {tok!r}", path, n) from None
    if not math.isfinite(v):
        raise FileFormatError(f"non-finite {what} {tok!r}", path, n)
    return v


def _num(x: float) -> str:
    # repr is the shortest string that round-trips exactly
    return repr(float(x))


# -- trial lists and keys ----------------------------------------------------

def parse_trial_list(text: str, path=None) -> TrialList:
    pairs = [(f[0], f[1]) for _, f in _rows(text, TRIALS_HEADER, path)]
    return TrialList.from_pairs(pairs)


def write_trial_list(trials: TrialList) -> str:
    out = ["\t".join(TRIALS_HEADER)]
    out += [f"{m}\t{s}" for m, s in trials]
    return "\n".join(out) + "\n"


def parse_key(text: str, path=None) -> TrialKey:
    pairs, labels, parts = [], [], []
    lines = text.split("\n", 1)
    with_part = len(lines[0].rstrip("\r").split("\t")) == 4
    if with_part and lines[0].rstrip("\r").split("\t")[3] != "partition":
        raise FileFormatError("fourth header column must be 'partition'", path, 1)
    ncols = {4} if with_part else {3}
    for n, f in _rows(text, KEY_HEADER, path, ncols):
        if f[2] not in TARGET_TYPES:
            raise FileFormatError(f"unknown targettype {f[2]!r}", path, n)
        pairs.append((f[0], f[1]))
        labels.append(TARGET_TYPES[f[2]])
        if with_part:
            parts.append(f[3])
    return TrialKey(TrialList.from_pairs(pairs), np.array(labels, dtype=bool),
                    tuple(parts) if with_part else None)


def write_key(key: TrialKey) -> str:
    head = list(KEY_HEADER) + (["partition"] if key.partitions is not None else [])
    out = ["\t".join(head)]
    for i, (m, s) in enumerate(key.trials):
        row = [m, s, "target" if key.is_target[i] else "nontarget"]
        if key.partitions is not None:
            row.append(key.partitions[i])
        out.append("\t".join(row))
    return "\n".join(out) + "\n"


# -- scores ------------------------------------------------------------------

def read_scores(text: str, path=None, name="") -> ScoreSet:
    pairs, vals = [], []
    for n, f in _rows(text, SCORES_HEADER, path):
        pairs.append((f[0], f[1]))
        vals.append(_finite(f[2], path, n))
    return ScoreSet(TrialList.from_pairs(pairs), np.array(vals, dtype=np.float64), name)


def write_scores(scores: ScoreSet) -> str:
    out = ["\t".join(SCORES_HEADER)]
    out += [f"{m}\t{s}\t{_num(v)}" for (m, s), v in zip(scores.trials, scores.scores)]
    return "\n".join(out) + "\n"


# -- durations and enrollment manifests --------------------------------------

def parse_durations(text: str, path=None) -> dict:
    out = {}
    for n, f in _rows(text, DURATIONS_HEADER, path):
        v = _finite(f[1], path, n, "seconds")
        if v <= 0:
            raise FileFormatError(f"duration must be positive, got {f[1]!r}", path, n)
        if f[0] in out:
            raise FileFormatError(f"duplicate segment id {f[0]!r}", path, n)
        out[f[0]] = v
    return out


def write_durations(durations: Mapping[str, float]) -> str:
    out = ["\t".join(DURATIONS_HEADER)]
    out += [f"{k}\t{_num(v)}" for k, v in durations.items()]
    return "\n".join(out) + "\n"


def parse_manifest(text: str, path=None) -> dict:
    """Enrollment manifest: one ``model<TAB>segment`` line per enrollment segment."""
    out = {}
    for _, f in _rows(text, MANIFEST_HEADER, path):
        out.setdefault(f[0], []).append(f[1])
    return out


def write_manifest(manifest: Mapping[str, Sequence[str]]) -> str:
    out = ["\t".join(MANIFEST_HEADER)]
    out += [f"{m}\t{s}" for m, segs in manifest.items() for s in segs]
    return "\n".join(out) + "\n"


# -- binary containers -------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, path=None):
        self.data = data
        self.pos = 0
        self.path = path

    def fail(self, msg):
        raise FileFormatError(f"{msg} (byte offset {self.pos})", self.path)

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self.fail("truncated record")
        b = self.data[self.pos: self.pos + n]
        self.pos += n
        return b

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f64s(self, n):
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def ident(self):
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self.fail("invalid UTF-8 identifier")

    @property
    def done(self):
        return self.pos == len(self.data)


def _ident(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ValueError(f"identifier too long: {s[:20]!r}...")
    return struct.pack("<H", len(b)) + b


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_embeddings(es: EmbeddingSet) -> bytes:
    parts = [b"EMB1", struct.pack("<II", len(es), es.dim)]
    for sid, vec in zip(es.ids, es.vectors):
        parts += [_ident(sid), _f64(vec)]
    for tag, m in ((b"LBL1", es.labels), (b"DOM1", es.domains)):
        if m is not None:
            parts += [tag, struct.pack("<I", len(es))]
            for sid in es.ids:
                parts += [_ident(sid), _ident(m[sid])]
    if es.durations is not None:
        parts += [b"DUR1", struct.pack("<I", len(es))]
        for sid in es.ids:
            parts += [_ident(sid), _f64([es.durations[sid]])]
    return b"".join(parts)


def read_embeddings(data: bytes, path=None) -> EmbeddingSet:
    r = _Reader(bytes(data), path)
    if r.take(4) != b"EMB1":
        r.pos = 0
        r.fail("bad magic")
    count, dim = r.u32(), r.u32()
    if dim < 1:
        r.fail("dimension must be >= 1")
    ids, vecs, seen = [], np.empty((count, dim)), set()
    for i in range(count):
        sid = r.ident()
        if sid in seen:
            r.fail(f"duplicate segment id {sid!r}")
        seen.add(sid)
        ids.append(sid)
        vecs[i] = r.f64s(dim)
    sections = {}
    while not r.done:
        tag = r.take(4)
        if tag not in (b"LBL1", b"DOM1", b"DUR1") or tag in sections:
            r.fail(f"unexpected section tag {tag!r}")
        n = r.u32()
        m = {}
        for _ in range(n):
            sid = r.ident()
            if sid not in seen or sid in m:
                r.fail(f"section {tag.decode()} has unknown or repeated id {sid!r}")
            m[sid] = float(r.f64s(1)[0]) if tag == b"DUR1" else r.ident()
        sections[tag] = m
    try:
        return EmbeddingSet(ids, vecs, sections.get(b"LBL1"), sections.get(b"DOM1"),
                            sections.get(b"DUR1"))
    except ValueError as e:
        raise FileFormatError(str(e), path) from None


def pack_matrices(tag: bytes, dims: Sequence[int], arrays: Sequence[np.ndarray]) -> bytes:
    """Generic container: tag, u32 dims, then row-major f64 arrays."""
    return tag + struct.pack(f"<{len(dims)}I", *dims) + b"".join(_f64(a) for a in arrays)


def unpack_matrices(data: bytes, tag: bytes, ndims: int, shapes, path=None):
    """Inverse of :func:`pack_matrices`; ``shapes`` maps dims to array shapes."""
    r = _Reader(bytes(data), path)
    if r.take(4) != tag:
        r.pos = 0
        r.fail("bad magic")
    dims = [r.u32() for _ in range(ndims)]
    out = []
    for shape in shapes(*dims):
        n = int(np.prod(shape))
        out.append(r.f64s(n).reshape(shape))
    if not r.done:
        r.fail("trailing bytes")
    return dims, out


def read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def load(path, parser):
    """Parse a text file, attaching the path to any format error."""
    return parser(read_text(path), path=path)
