"""Dataset curation: hash dedup, brightness filtering and split assignment.

Manifests are tab-separated text. The first line is a header::

    #occdms-manifest v1<TAB>labels=<l1,l2,...><TAB>fractions=<train,val,test>

followed by a column line and one record per sample with the fields
``sample_id, image_path, person_id, label, modality, split``. ``-`` marks an
unassigned split or missing fractions. Relative image paths resolve against
the manifest's directory.
"""

from __future__ import annotations

import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .imaging import Image, dhash, mean_brightness, read_pnm

SPLITS = ("train", "val", "test")
MODALITIES = ("rgb", "ir")
MANIFEST_MAGIC = "#occdms-manifest v1"
COLUMNS = ("sample_id", "image_path", "person_id", "label", "modality", "split")


class ManifestError(ValueError):
    pass


class SampleReadError(OSError):
    """An image referenced by a manifest could not be loaded."""

    def __init__(self, sample_id: str, reason: str):
        super().__init__(f"sample {sample_id!r}: {reason}")
        self.sample_id = sample_id


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_path: str
    person_id: str
    label: str
    modality: str = "rgb"
    split: str | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ManifestError(f"unknown modality {self.modality!r} for {self.sample_id!r}")
        if self.split is not None and self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r} for {self.sample_id!r}")
        for name in ("sample_id", "image_path", "person_id", "label"):
            value = getattr(self, name)
            if not value or "\t" in value or "\n" in value:
                raise ManifestError(f"invalid {name} {value!r}")


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    fractions: tuple[float, float, float]

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise SplitError(f"fractions must sum to 1, got {self.fractions}")
        seen = set()
        for ids in (self.train, self.val, self.test):
            overlap = seen.intersection(ids)
            if overlap:
                raise SplitError(f"sample(s) in more than one split: {sorted(overlap)[:5]}")
            seen.update(ids)

    def split_of(self) -> dict[str, str]:
        out = {}
        for name in SPLITS:
            for sid in getattr(self, name):
                out[sid] = name
        return out

    def apply(self, samples: Sequence[SampleRecord]) -> list[SampleRecord]:
        """Samples in input order with their ``split`` field filled in."""
        lookup = self.split_of()
        missing = [s.sample_id for s in samples if s.sample_id not in lookup]
        if missing:
            raise SplitError(f"manifest does not cover {missing[:5]}")
        return [replace(s, split=lookup[s.sample_id]) for s in samples]


@dataclass
class Manifest:
    samples: list[SampleRecord]
    labels: tuple[str, ...] = ()
    fractions: tuple[float, float, float] | None = None
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate sample ids: {dupes[:5]}")
        if not self.labels:
            self.labels = tuple(sorted({s.label for s in self.samples}))
        unknown = {s.label for s in self.samples} - set(self.labels)
        if unknown:
            raise ManifestError(f"labels not declared in header: {sorted(unknown)}")

    def resolve(self, sample: SampleRecord) -> Path:
        path = Path(sample.image_path)
        return path if path.is_absolute() else self.base_dir / path

    def loader(self) -> Callable[[SampleRecord], Image]:
        return lambda s: read_pnm(self.resolve(s))

    def with_samples(self, samples: Sequence[SampleRecord], fractions=None) -> "Manifest":
        return Manifest(list(samples), self.labels, fractions or self.fractions, self.base_dir)


def format_manifest(manifest: Manifest) -> str:
    fractions = "-" if manifest.fractions is None else ",".join(repr(float(f)) for f in manifest.fractions)
    lines = [
        f"{MANIFEST_MAGIC}\tlabels={','.join(manifest.labels)}\tfractions={fractions}",
        "\t".join(COLUMNS),
    ]
    for s in manifest.samples:
        lines.append("\t".join((s.sample_id, s.image_path, s.person_id, s.label, s.modality, s.split or "-")))
    return "\n".join(lines) + "\n"


def parse_manifest(text: str, base_dir=".") -> Manifest:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MANIFEST_MAGIC):
        raise ManifestError("missing manifest header line")
    header = dict(
        part.split("=", 1) for part in lines[0].split("\t")[1:] if "=" in part
    )
    labels = tuple(l for l in header.get("labels", "").split(",") if l)
    fractions = None
    if header.get("fractions", "-") != "-":
        try:
            fractions = tuple(float(f) for f in header["fractions"].split(","))
        except ValueError:
            raise ManifestError(f"bad fractions {header['fractions']!r}") from None
        if len(fractions) != 3:
            raise ManifestError("fractions must have three entries")
    if len(lines) < 2 or tuple(lines[1].split("\t")) != COLUMNS:
        raise ManifestError("line 2: expected column header " + "\t".join(COLUMNS))
    samples = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(COLUMNS):
            raise ManifestError(f"line {lineno}: expected {len(COLUMNS)} fields, got {len(parts)}")
        sid, path, person, label, modality, split = parts
        samples.append(SampleRecord(sid, path, person, label, modality, None if split == "-" else split))
    return Manifest(samples, labels, fractions, Path(base_dir))


def read_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), base_dir=path.parent)


def write_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(format_manifest(manifest), encoding="utf-8")


# --------------------------------------------------------------------------
# curation


def _load(sample: SampleRecord, loader: Callable[[SampleRecord], Image]) -> Image:
    try:
        return loader(sample)
    except Exception as exc:  # noqa: BLE001 - reported against the sample id
        raise SampleReadError(sample.sample_id, str(exc)) from exc


def dedup_exact(samples: Iterable[SampleRecord], loader: Callable[[SampleRecord], Image]):
    """Drop samples whose dHash equals that of an earlier sample.

    Returns:
        ``(kept, removed)`` where ``removed`` holds ``(sample, kept_sample_id)``
        pairs naming the surviving member of each hash group.
    """
    first_by_hash: dict[int, str] = {}
    kept, removed = [], []
    for sample in samples:
        h = dhash(_load(sample, loader))
        if h in first_by_hash:
            removed.append((sample, first_by_hash[h]))
        else:
            first_by_hash[h] = sample.sample_id
            kept.append(sample)
    return kept, removed


def filter_brightness(samples: Iterable[SampleRecord], loader, low: float = 20.0, high: float = 235.0):
    """Remove samples whose mean brightness is strictly below ``low`` or above ``high``.

    Returns ``(kept, removed)``; ``removed`` pairs each sample with its mean.
    """
    if not low < high:
        raise ValueError(f"need low < high, got {low}, {high}")
    kept, removed = [], []
    for sample in samples:
        mean = mean_brightness(_load(sample, loader))
        if mean < low or mean > high:
            removed.append((sample, mean))
        else:
            kept.append(sample)
    return kept, removed


def _check_fractions(fractions) -> tuple[float, float, float]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise SplitError("exactly three fractions (train, val, test) are required")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be non-negative and sum to 1, got {fractions}")
    return fractions


def split_person_disjoint(samples: Sequence[SampleRecord], fractions, seed: int) -> SplitManifest:
    """Assign whole persons to train/val/test.

    Persons are shuffled by ``seed`` and each goes to the split whose
    sample deficit (target minus assigned) is largest, lowest split index on
    ties. Every split ends within one person's sample count of its target.
    """
    fractions = _check_fractions(fractions)
    by_person: dict[str, list[str]] = defaultdict(list)
    for s in samples:
        by_person[s.person_id].append(s.sample_id)
    if len(by_person) < len(SPLITS):
        raise SplitError(f"need at least {len(SPLITS)} persons, got {len(by_person)}")

    persons = sorted(by_person)
    random.Random(seed).shuffle(persons)
    total = sum(len(v) for v in by_person.values())
    targets = [f * total for f in fractions]
    assigned = [0, 0, 0]
    buckets: list[list[str]] = [[], [], []]
    for person in persons:
        deficits = [t - a for t, a in zip(targets, assigned)]
        k = max(range(3), key=lambda i: (deficits[i], -i))
        buckets[k].extend(by_person[person])
        assigned[k] += len(by_person[person])
    return SplitManifest(*buckets, fractions=fractions)


def apportion(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the lower index."""
    exact = [n * Fraction(str(f)) for f in fractions]
    counts = [int(q) for q in exact]  # floor; all quotas are non-negative
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_stratified(samples: Sequence[SampleRecord], fractions, seed: int) -> SplitManifest:
    """Per-label shuffled split preserving class ratios.

    Labels are processed in sorted order with one ``random.Random(seed)``
    stream; each label's counts follow :func:`apportion`.
    """
    fractions = _check_fractions(fractions)
    by_label: dict[str, list[str]] = defaultdict(list)
    for s in samples:
        by_label[s.label].append(s.sample_id)
    rng = random.Random(seed)
    buckets: list[list[str]] = [[], [], []]
    for label in sorted(by_label):
        ids = list(by_label[label])
        rng.shuffle(ids)
        start = 0
        for k, count in enumerate(apportion(len(ids), fractions)):
            buckets[k].extend(ids[start : start + count])
            start += count
    return SplitManifest(*buckets, fractions=fractions)
