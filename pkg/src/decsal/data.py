"""Datasets: ingestion from JSONL/CSV and planted-token synthetic generation."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

SPLITS = ("train", "validation", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    text: str
    label: int | None
    split: str = "train"


@dataclass
class Dataset:
    records: list[Record]

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    @property
    def num_classes(self) -> int:
        labels = {r.label for r in self.records if r.label is not None}
        return max(labels) + 1 if labels else 0

    def without_labels(self) -> "Dataset":
        return Dataset([Record(r.text, None, r.split) for r in self.records])

    def validate(self) -> None:
        labels = {r.label for r in self.records if r.label is not None}
        if labels:
            if min(labels) < 0:
                raise DataError(f"negative label {min(labels)}")
            missing = sorted(set(range(max(labels) + 1)) - labels)
            if missing:
                raise DataError(f"labels are not dense; missing {missing}")
        for i, r in enumerate(self.records):
            if r.split not in SPLITS:
                raise DataError(f"record {i}: unknown split {r.split!r}")
            if r.split == "train" and not r.text.strip():
                raise DataError(f"record {i}: empty text in train split")

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"text": r.text, "label": r.label, "split": r.split}) + "\n"
                       for r in self.records)


@dataclass
class PlantedTruth:
    planted: dict[int, list[str]]            # class -> planted words
    positions: list[int] = field(default_factory=list)   # per record, 0-based word index

    def to_json(self) -> dict:
        return {"planted": {str(c): w for c, w in self.planted.items()},
                "positions": self.positions}


def _parse_label(raw, where: str) -> int:
    try:
        value = int(raw)
    except (TypeError, ValueError):
        raise DataError(f"{where}: label {raw!r} is not an integer") from None
    if isinstance(raw, float) and raw != value:
        raise DataError(f"{where}: label {raw!r} is not an integer")
    return value


def _record_from(row: dict, where: str, require_label: bool) -> Record:
    if "text" not in row:
        raise DataError(f"{where}: missing field 'text'")
    if "label" not in row or row["label"] in (None, ""):
        if require_label:
            raise DataError(f"{where}: missing field 'label'")
        label = None
    else:
        label = _parse_label(row["label"], where)
    return Record(str(row["text"]), label, row.get("split") or "train")


def ingest(path, fmt: str | None = None, require_label: bool = True) -> Dataset:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in ("jsonl", "csv"):
        raise DataError(f"unsupported dataset format {fmt!r}")
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    records = []
    if fmt == "jsonl":
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise DataError(f"{path}:{lineno}: expected an object")
            records.append(_record_from(row, f"{path}:{lineno}", require_label))
    elif fmt == "csv":
        reader = csv.DictReader(io.StringIO(text, newline=""))
        if reader.fieldnames is None or "text" not in reader.fieldnames:
            raise DataError(f"{path}:1: header lacks 'text'")
        if require_label and "label" not in reader.fieldnames:
            raise DataError(f"{path}:1: header lacks 'label'")
        for row in reader:
            where = f"{path}:{reader.line_num}"
            if None in row or any(v is None for v in row.values()):
                raise DataError(f"{where}: wrong number of fields")
            records.append(_record_from(row, where, require_label))
    else:
        raise DataError(f"unsupported dataset format {fmt!r}")
    ds = Dataset(records)
    ds.validate()
    return ds


def word_pool(size: int) -> list[str]:
    return [f"w{i:04d}" for i in range(size)]


def generate_synthetic(classes: int = 4, planted_per_class: int = 1, vocab_content: int = 200,
                       seq_len: int = 12, n_samples: int = 2000, noise_rate: float = 0.0,
                       seed: int = 0, splits=(0.8, 0.1, 0.1)) -> tuple[Dataset, PlantedTruth]:
    """Random-word sequences with exactly one class-indicating word each.

    The first ``classes * planted_per_class`` pool words are planted
    (disjoint per class); the rest are distractors.
    """
    n_planted = classes * planted_per_class
    if classes < 2 or planted_per_class < 1:
        raise DataError("need >= 2 classes and >= 1 planted word per class")
    if vocab_content <= n_planted:
        raise DataError(f"vocab_content={vocab_content} too small for {n_planted} planted words")
    if not 0.0 <= noise_rate < 1.0:
        raise DataError("noise_rate must lie in [0, 1)")
    if seq_len < 1:
        raise DataError("seq_len must be >= 1")
    words = word_pool(vocab_content)
    planted = {c: words[c * planted_per_class:(c + 1) * planted_per_class] for c in range(classes)}
    distractors = words[n_planted:]
    rng = np.random.default_rng(seed)
    cut1 = int(round(splits[0] * n_samples))
    cut2 = cut1 + int(round(splits[1] * n_samples))
    records, positions = [], []
    for i in range(n_samples):
        c = int(rng.integers(classes))
        seq = [distractors[j] for j in rng.integers(len(distractors), size=seq_len - 1)]
        pos = int(rng.integers(seq_len))
        seq.insert(pos, planted[c][int(rng.integers(planted_per_class))])
        label = c
        if noise_rate and rng.random() < noise_rate:
            label = int((c + rng.integers(1, classes)) % classes)
        split = "train" if i < cut1 else "validation" if i < cut2 else "test"
        records.append(Record(" ".join(seq), label, split))
        positions.append(pos)
    return Dataset(records), PlantedTruth(planted, positions)


def generate_lm_corpus(words: list[str], n_seqs: int = 2000, seq_len: int = 12,
                       follow_prob: float = 0.85, copy_fraction: float = 0.5, seed: int = 0,
                       grammar_seed: int = 0) -> list[str]:
    """Unlabelled pretraining text with two kinds of predictable structure.

    Markov lines: with probability ``follow_prob`` each word is followed by
    its fixed successor (table depends only on ``grammar_seed``).
    Copy lines (a ``copy_fraction`` share): a random phrase of
    ``seq_len // 2`` words written twice, so a hidden word can be read off
    its other occurrence.
    """
    successor = np.random.default_rng(grammar_seed).permutation(len(words))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_seqs):
        if rng.random() < copy_fraction:
            half = rng.integers(len(words), size=max(seq_len // 2, 1))
            seq = list(np.concatenate([half, half])[:seq_len])
        else:
            cur = int(rng.integers(len(words)))
            seq = [cur]
            for _ in range(seq_len - 1):
                if rng.random() < follow_prob:
                    cur = int(successor[cur])
                else:
                    cur = int(rng.integers(len(words)))
                seq.append(cur)
        out.append(" ".join(words[int(j)] for j in seq))
    return out


def read_documents(path) -> list[str]:
    """One document per non-blank line."""
    docs = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not docs:
        raise DataError(f"{path}: no documents")
    return docs


def texts(records: Iterable[Record]) -> list[str]:
    return [r.text for r in records]
