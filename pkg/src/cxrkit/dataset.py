"""Annotation manifest parsing, label vocabulary and train/test splits.

The NIH ChestX-ray14 release ships a CSV (``Data_Entry_2017.csv``) with one
row per image, where ``Finding Labels`` holds a pipe-delimited list such as
``"Cardiomegaly|Effusion"`` or the sentinel ``"No Finding"``, plus two text
files listing the image ids of the official train/val and test partitions.
"""

from __future__ import annotations

import csv
import difflib
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

NO_FINDING = "No Finding"
IMAGE_COLUMN = "Image Index"
LABELS_COLUMN = "Finding Labels"


class SchemaError(ValueError):
    """The manifest is missing a required column."""


class UnknownLabelError(KeyError):
    def __init__(self, label: str, suggestion: str | None):
        self.label = label
        self.suggestion = suggestion
        hint = f"; did you mean {suggestion!r}?" if suggestion else ""
        super().__init__(f"unknown label {label!r}{hint}")

    def __str__(self) -> str:
        return self.args[0]


class SplitOverlapError(ValueError):
    def __init__(self, overlap: Sequence[str]):
        self.overlap = sorted(overlap)
        shown = ", ".join(self.overlap[:10])
        more = f" (+{len(self.overlap) - 10} more)" if len(self.overlap) > 10 else ""
        super().__init__(
            f"{len(self.overlap)} image id(s) listed in both train and test lists: {shown}{more}"
        )


@dataclass(frozen=True)
class LabelVocabulary:
    classes: tuple[str, ...]
    index_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        classes = tuple(self.classes)
        if not classes:
            raise ValueError("vocabulary must contain at least one class")
        dupes = sorted({c for c in classes if classes.count(c) > 1})
        if dupes:
            raise ValueError(f"duplicate class names in vocabulary: {dupes}")
        if NO_FINDING in classes:
            raise ValueError(f"{NO_FINDING!r} is a sentinel and cannot be a vocabulary class")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "index_of", {c: i for i, c in enumerate(classes)})

    def __len__(self) -> int:
        return len(self.classes)

    def __iter__(self):
        return iter(self.classes)

    def __contains__(self, name: object) -> bool:
        return name in self.index_of

    def nearest(self, name: str) -> str | None:
        match = difflib.get_close_matches(name, self.classes, n=1, cutoff=0.0)
        return match[0] if match else None

    @classmethod
    def from_file(cls, path: str | Path) -> "LabelVocabulary":
        """One class name per line; blank lines and ``#`` comments are skipped."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(_vocab_lines(lines)))

    @classmethod
    def default(cls) -> "LabelVocabulary":
        text = resources.files("cxrkit").joinpath("resources/nih14_classes.txt").read_text("utf-8")
        return cls(tuple(_vocab_lines(text.splitlines())))


def _vocab_lines(lines: Iterable[str]) -> list[str]:
    return [s for s in (ln.strip() for ln in lines) if s and not s.startswith("#")]


@dataclass(frozen=True)
class SampleRecord:
    image_id: str
    path: Path
    labels: frozenset[str]
    target: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "path", Path(self.path))
        object.__setattr__(self, "labels", frozenset(self.labels))

    def with_target(self, vocab: LabelVocabulary) -> "SampleRecord":
        return SampleRecord(self.image_id, self.path, self.labels, tuple(encode_one_hot(self.labels, vocab).tolist()))

    def to_json(self, vocab: LabelVocabulary) -> dict:
        return {
            "image_id": self.image_id,
            "path": str(self.path),
            "labels": [c for c in vocab.classes if c in self.labels],
            "target": list(self.target) if self.target is not None else None,
        }


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    records: tuple[SampleRecord, ...]
    vocabulary: LabelVocabulary
    source_list: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def targets(self) -> np.ndarray:
        """Stacked (N, C) float32 target matrix."""
        if not self.records:
            return np.zeros((0, len(self.vocabulary)), dtype=np.float32)
        rows = [r.target if r.target is not None else encode_one_hot(r.labels, self.vocabulary) for r in self.records]
        return np.asarray(rows, dtype=np.float32)

    def to_json(self) -> dict:
        return {
            "split": self.name,
            "source_list": str(self.source_list) if self.source_list else None,
            "vocabulary": list(self.vocabulary.classes),
            "records": [r.to_json(self.vocabulary) for r in self.records],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSplit":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        vocab = LabelVocabulary(tuple(data["vocabulary"]))
        records = []
        for r in data["records"]:
            rec = SampleRecord(r["image_id"], Path(r["path"]), frozenset(r["labels"]))
            rec = rec.with_target(vocab)
            if r.get("target") is not None and tuple(r["target"]) != rec.target:
                raise ValueError(f"{path}: stored target for {rec.image_id} disagrees with its labels")
            records.append(rec)
        src = data.get("source_list")
        return cls(data.get("split", Path(path).stem), tuple(records), vocab, Path(src) if src else None)


def parse_label_manifest(manifest_path: str | Path, image_root: str | Path) -> list[SampleRecord]:
    """Read an NIH-style annotation CSV into target-less records.

    Rows whose image file is absent under ``image_root`` are kept; their ids
    are logged as a warning (see :func:`missing_images`).
    """
    manifest_path = Path(manifest_path)
    image_root = Path(image_root)
    with manifest_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns = [c.strip() for c in (reader.fieldnames or [])]
        for col in (IMAGE_COLUMN, LABELS_COLUMN):
            if col not in columns:
                raise SchemaError(f"{manifest_path}: missing required column {col!r} (found {columns})")
        records = []
        for row in reader:
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            image_id = row[IMAGE_COLUMN]
            raw = row[LABELS_COLUMN]
            labels = frozenset(p.strip() for p in raw.split("|") if p.strip() and p.strip() != NO_FINDING)
            records.append(SampleRecord(image_id, image_root / image_id, labels))

    missing = missing_images(records)
    if missing:
        log.warning("%d of %d manifest images not found under %s (e.g. %s)",
                    len(missing), len(records), image_root, ", ".join(missing[:3]))
    return records


def missing_images(records: Iterable[SampleRecord]) -> list[str]:
    return [r.image_id for r in records if not r.path.is_file()]


def encode_one_hot(labels: Iterable[str], vocab: LabelVocabulary) -> np.ndarray:
    vec = np.zeros(len(vocab), dtype=np.int64)
    for label in labels:
        if label == NO_FINDING:  # the sentinel contributes nothing
            continue
        idx = vocab.index_of.get(label)
        if idx is None:
            raise UnknownLabelError(label, vocab.nearest(label))
        vec[idx] = 1
    return vec


def decode_one_hot(vector: Sequence[int] | np.ndarray, vocab: LabelVocabulary) -> frozenset[str]:
    vector = np.asarray(vector)
    if vector.shape != (len(vocab),):
        raise ValueError(f"expected vector of length {len(vocab)}, got shape {vector.shape}")
    return frozenset(vocab.classes[i] for i in np.flatnonzero(vector))


def read_split_list(path: str | Path) -> list[str]:
    return [s for s in (ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()) if s]


def build_splits(
    records: Sequence[SampleRecord],
    train_list: str | Path,
    test_list: str | Path,
    vocab: LabelVocabulary | None = None,
) -> tuple[DatasetSplit, DatasetSplit]:
    """Partition records by the official split lists.

    Records without a target are encoded against ``vocab`` (default: the
    14-class NIH vocabulary).
    """
    vocab = vocab or LabelVocabulary.default()
    train_ids = read_split_list(train_list)
    test_ids = read_split_list(test_list)
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise SplitOverlapError(list(overlap))
    if not test_ids:
        log.warning("test list %s is empty", test_list)
    if not train_ids:
        log.warning("train list %s is empty", train_list)

    train_set, test_set = set(train_ids), set(test_ids)
    train_recs, test_recs, unlisted = [], [], 0
    for rec in records:
        if rec.target is None:
            rec = rec.with_target(vocab)
        if rec.image_id in train_set:
            train_recs.append(rec)
        elif rec.image_id in test_set:
            test_recs.append(rec)
        else:
            unlisted += 1
    if unlisted:
        log.warning("%d record(s) appear in neither split list and were excluded", unlisted)
    known = {r.image_id for r in records}
    unmatched = sum(1 for i in train_ids + test_ids if i not in known)
    if unmatched:
        log.warning("%d listed image id(s) have no manifest row", unmatched)
    log.info("split sizes: train=%d test=%d", len(train_recs), len(test_recs))
    return (
        DatasetSplit("train", tuple(train_recs), vocab, Path(train_list)),
        DatasetSplit("test", tuple(test_recs), vocab, Path(test_list)),
    )


def make_subset(split: DatasetSplit, fraction: float, seed: int) -> DatasetSplit:
    """Seeded, class-stratified fractional subset preserving parent order.

    Every class with at least ``ceil(1/fraction)`` positives in the parent
    keeps at least one positive; remaining slots are filled uniformly at
    random.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n_total = len(split.records)
    size = int(round(fraction * n_total))
    if size < 1:
        raise ValueError(f"fraction {fraction} of {n_total} records selects nothing")

    targets = split.targets().astype(bool)
    order = np.random.default_rng(seed).permutation(n_total)
    chosen: list[int] = []
    taken = np.zeros(n_total, dtype=bool)

    min_pos = math.ceil(1.0 / fraction)
    counts = targets.sum(axis=0) if n_total else np.zeros(len(split.vocabulary))
    # rarest classes first so shared records are reused for common ones
    for c in sorted(np.flatnonzero(counts >= min_pos), key=lambda c: (counts[c], c)):
        if targets[chosen, c].any():
            continue
        pick = next(i for i in order if targets[i, c])
        chosen.append(int(pick))
        taken[pick] = True
    if len(chosen) > size:
        raise ValueError(
            f"cannot keep a positive for every eligible class with only {size} records "
            f"({len(chosen)} required)"
        )
    for i in order:
        if len(chosen) >= size:
            break
        if not taken[i]:
            chosen.append(int(i))
            taken[i] = True

    keep = sorted(chosen)
    name = split.name if fraction == 1.0 else f"{split.name}_mini"
    return DatasetSplit(name, tuple(split.records[i] for i in keep), split.vocabulary, split.source_list)


def class_frequencies(split: DatasetSplit) -> dict[str, int]:
    counts = split.targets().sum(axis=0).astype(int) if len(split) else np.zeros(len(split.vocabulary), int)
    return {c: int(n) for c, n in zip(split.vocabulary.classes, counts)}
