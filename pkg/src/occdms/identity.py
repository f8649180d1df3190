"""
Driver identity database with running-mean embeddings.

Each record keeps, per modality, the arithmetic mean of every embedding
folded into it together with the image count, so new captures can be
merged without storing past images.

File format (text, one record per line, single-space separated)::

    #occdms-identity v1 dim=<D>
    <id> <len>:<name> <rgb_flag> <rgb_count> [D reals] <ir_flag> <ir_count> [D reals]

Absent modalities have flag 0, count 0 and no reals. Reals are written with
17 significant digits so a load/save cycle is bit-exact.
"""

from __future__ import annotations

import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .backends import Embedding

DB_MAGIC = "#occdms-identity v1"
MODALITIES = ("rgb", "ir")
DEFAULT_THRESHOLDS = {"rgb": 0.65, "ir": 0.575}


class IdentityError(ValueError):
    pass


class UndefinedSimilarity(IdentityError):
    pass


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise IdentityError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarity("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def update_embedding(stored, count: int, new):
    """Fold one more embedding into a running mean of ``count`` images.

    >>> update_embedding([4.0, 0.0], 4, [-1.0, 5.0])
    (array([3., 1.]), 5)
    """
    if count < 1:
        raise IdentityError("count must be >= 1")
    stored = np.asarray(stored, dtype=np.float64)
    new = np.asarray(new, dtype=np.float64)
    if stored.shape != new.shape:
        raise IdentityError(f"dimension mismatch: {stored.shape} vs {new.shape}")
    total = count + 1
    return (count / total) * stored + (1.0 / total) * new, total


@dataclass
class ModalTemplate:
    vector: np.ndarray
    count: int

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.count < 1:
            raise IdentityError("template image count must be >= 1")


@dataclass
class IdentityRecord:
    id: int
    name: str
    rgb: ModalTemplate | None = None
    ir: ModalTemplate | None = None

    def __post_init__(self):
        if self.rgb is None and self.ir is None:
            raise IdentityError(f"record {self.id} has no embedding")
        if "\n" in self.name:
            raise IdentityError("names may not contain newlines")

    def template(self, modality: str) -> ModalTemplate | None:
        return self.rgb if modality == "rgb" else self.ir


@dataclass(frozen=True)
class MatchResult:
    """Outcome of one identification query.

    ``matched`` is True iff ``similarity`` reached the threshold; for an
    unmatched query ``similarity`` is the best score seen (None when no record
    has the query's modality).
    """

    matched: bool
    id: int | None
    similarity: float | None
    modality: str


@dataclass
class IdentityDB:
    dim: int = 128
    records: dict[int, IdentityRecord] = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.RLock()

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records[i] for i in sorted(self.records))

    def next_id(self) -> int:
        return max(self.records, default=0) + 1

    def get(self, id: int) -> IdentityRecord:
        try:
            return self.records[id]
        except KeyError:
            raise IdentityError(f"unknown identity id {id}") from None

    def by_name(self, name: str) -> list[IdentityRecord]:
        return [r for r in self if r.name == name]

    def _check_dim(self, vec: np.ndarray):
        if vec.shape != (self.dim,):
            raise IdentityError(f"embedding dimension {vec.size} does not match database dimension {self.dim}")

    def add(self, record: IdentityRecord) -> IdentityRecord:
        with self._lock:
            if record.id in self.records:
                raise IdentityError(f"duplicate identity id {record.id}")
            for t in (record.rgb, record.ir):
                if t is not None:
                    self._check_dim(t.vector)
            self.records[record.id] = record
            return record

    def save(self, path) -> None:
        """Atomically replace ``path`` with the serialized database."""
        path = Path(path)
        with self._lock:
            text = format_db(self)
            fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
            try:
                with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                    fh.write(text)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise

    @classmethod
    def load(cls, path) -> "IdentityDB":
        return parse_db(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# serialization


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def format_db(db: IdentityDB) -> str:
    lines = [f"{DB_MAGIC} dim={db.dim}"]
    for rec in db:
        parts = [str(rec.id), f"{len(rec.name)}:{rec.name}"]
        for t in (rec.rgb, rec.ir):
            if t is None:
                parts += ["0", "0"]
            else:
                parts += ["1", str(t.count)] + [_fmt(v) for v in t.vector]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_db(text: str) -> IdentityDB:
    lines = text.split("\n")
    head = lines[0].split()
    if not lines[0].startswith(DB_MAGIC) or len(head) != 3 or not head[2].startswith("dim="):
        raise IdentityError("line 1: missing identity database header")
    dim = int(head[2][4:])
    db = IdentityDB(dim)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        try:
            db.add(_parse_record(line, dim))
        except (ValueError, IndexError) as exc:
            raise IdentityError(f"line {lineno}: {exc}") from None
    return db


def _parse_record(line: str, dim: int) -> IdentityRecord:
    id_tok, rest = line.split(" ", 1)
    length_tok, rest = rest.split(":", 1)
    n = int(length_tok)
    name = rest[:n]
    if len(name) != n or rest[n : n + 1] != " ":
        raise IdentityError("name length prefix does not match")
    fields = rest[n + 1 :].split(" ")
    pos = 0
    templates = []
    for _ in MODALITIES:
        flag, count = fields[pos], int(fields[pos + 1])
        pos += 2
        if flag == "1":
            vec = np.array([float(v) for v in fields[pos : pos + dim]], dtype=np.float64)
            if vec.size != dim:
                raise IdentityError(f"expected {dim} reals")
            pos += dim
            templates.append(ModalTemplate(vec, count))
        elif flag == "0" and count == 0:
            templates.append(None)
        else:
            raise IdentityError(f"bad presence flag {flag!r}/count {count}")
    if pos != len(fields):
        raise IdentityError("trailing fields")
    return IdentityRecord(int(id_tok), name, templates[0], templates[1])


# --------------------------------------------------------------------------
# operations


def enroll(db: IdentityDB, name: str, captures: Iterable[Embedding], min_rgb_captures: int = 3) -> IdentityRecord:
    """Create a new identity from one or more captures.

    Manual registration asks for several head poses, hence the default of
    three RGB captures; pass ``min_rgb_captures=0`` for automatic paths.
    """
    captures = list(captures)
    if not captures:
        raise IdentityError("enrollment needs at least one capture")
    by_mod = {m: [c.values for c in captures if c.modality == m] for m in MODALITIES}
    if len(by_mod["rgb"]) < min_rgb_captures:
        raise IdentityError(f"enrollment needs at least {min_rgb_captures} RGB captures, got {len(by_mod['rgb'])}")
    for c in captures:
        db._check_dim(c.values)
    templates = {
        m: ModalTemplate(np.mean(np.stack(vs), axis=0), len(vs)) if vs else None
        for m, vs in by_mod.items()
    }
    with db._lock:
        return db.add(IdentityRecord(db.next_id(), name, templates["rgb"], templates["ir"]))


def identify(db: IdentityDB, query: Embedding, threshold: float | None = None) -> MatchResult:
    """Best same-modality match by cosine similarity.

    The lowest id wins ties. ``threshold`` defaults to 0.65 for RGB queries
    and 0.575 for IR.
    """
    if threshold is None:
        threshold = DEFAULT_THRESHOLDS[query.modality]
    best_id, best_sim = None, None
    for rec in db:
        t = rec.template(query.modality)
        if t is None:
            continue
        sim = cosine_similarity(t.vector, query.values)
        if best_sim is None or sim > best_sim:
            best_id, best_sim = rec.id, sim
    if best_sim is not None and best_sim >= threshold:
        return MatchResult(True, best_id, best_sim, query.modality)
    return MatchResult(False, None, best_sim, query.modality)


def auto_register(db: IdentityDB, query: Embedding, name_prefix: str = "driver") -> IdentityRecord:
    with db._lock:
        new_id = db.next_id()
        return enroll(db, f"{name_prefix}-{new_id}", [query], min_rgb_captures=0)


def reinforce(db: IdentityDB, id: int, query: Embedding) -> IdentityRecord:
    """Merge ``query`` into the record's same-modality running mean."""
    with db._lock:
        rec = db.get(id)
        db._check_dim(query.values)
        t = rec.template(query.modality)
        if t is None:
            new = ModalTemplate(query.values.copy(), 1)
        else:
            vec, count = update_embedding(t.vector, t.count, query.values)
            new = ModalTemplate(vec, count)
        if query.modality == "rgb":
            rec.rgb = new
        else:
            rec.ir = new
        return rec
