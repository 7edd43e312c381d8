"""Dataset records, JSONL/JSON I/O, aesthetic filtering, and mixture sampling."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class DataFormatError(ValueError):
    """A dataset file is malformed or violates a record invariant."""


class Provenance(str, enum.Enum):
    SAME = "SAME"  # EN-EN: the sentence paired with itself
    MT = "MT"
    HT = "HT"


@dataclass(frozen=True)
class ParallelPair:
    src_text: str
    tgt_text: str
    src_lang: str
    tgt_lang: str
    provenance: Provenance

    def __post_init__(self):
        if not self.src_text or not self.tgt_text:
            raise ValueError("parallel pair texts must be nonempty")
        if self.provenance is Provenance.SAME and (
            self.src_lang != self.tgt_lang or self.src_text != self.tgt_text
        ):
            raise ValueError("SAME pair must have identical texts and languages")

    def to_record(self) -> dict:
        return {
            "src": self.src_text,
            "tgt": self.tgt_text,
            "src_lang": self.src_lang,
            "tgt_lang": self.tgt_lang,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "ParallelPair":
        return cls(
            src_text=rec["src"],
            tgt_text=rec["tgt"],
            src_lang=rec["src_lang"],
            tgt_lang=rec["tgt_lang"],
            provenance=Provenance(rec["provenance"]),
        )


@dataclass(frozen=True)
class TextImagePair:
    caption: str
    lang: str
    image_id: str
    image_embedding: tuple[float, ...]
    aesthetic_score: float | None = None

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be nonempty")
        if len(self.image_embedding) == 0:
            raise ValueError("image_embedding must be nonempty")

    def to_record(self) -> dict:
        rec = {
            "caption": self.caption,
            "lang": self.lang,
            "image_id": self.image_id,
            "image_embedding": list(self.image_embedding),
        }
        if self.aesthetic_score is not None:
            rec["aesthetic_score"] = self.aesthetic_score
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "TextImagePair":
        score = rec.get("aesthetic_score")
        return cls(
            caption=rec["caption"],
            lang=rec["lang"],
            image_id=rec["image_id"],
            image_embedding=tuple(float(v) for v in rec["image_embedding"]),
            aesthetic_score=None if score is None else float(score),
        )


@dataclass
class ClassificationDataset:
    class_names: dict[str, list[str]]
    templates: dict[str, list[str]]
    items: list[tuple[tuple[float, ...], int]]

    def __post_init__(self):
        sizes = {len(names) for names in self.class_names.values()}
        if len(sizes) != 1:
            raise ValueError("every language must name the same number of classes")
        n_classes = sizes.pop()
        if n_classes < 1:
            raise ValueError("at least one class is required")
        for lang, temps in self.templates.items():
            for t in temps:
                if t.count("{}") != 1:
                    raise ValueError(f"template {t!r} ({lang}) must contain exactly one '{{}}'")
        for _, label in self.items:
            if not 0 <= label < n_classes:
                raise ValueError(f"class_index {label} out of range for {n_classes} classes")

    @property
    def num_classes(self) -> int:
        return len(next(iter(self.class_names.values())))

    def embeddings(self) -> np.ndarray:
        return np.array([emb for emb, _ in self.items], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.items], dtype=np.int64)

    def to_document(self) -> dict:
        return {
            "class_names": self.class_names,
            "templates": self.templates,
            "items": [{"image_embedding": list(emb), "class_index": label} for emb, label in self.items],
        }

    @classmethod
    def from_document(cls, doc: Mapping) -> "ClassificationDataset":
        return cls(
            class_names={k: list(v) for k, v in doc["class_names"].items()},
            templates={k: list(v) for k, v in doc["templates"].items()},
            items=[
                (tuple(float(v) for v in it["image_embedding"]), int(it["class_index"]))
                for it in doc["items"]
            ],
        )


@dataclass(frozen=True)
class MixtureSpec:
    """Sampling weights per provenance class; classes absent from ``weights`` are disabled."""

    weights: Mapping[Provenance, float] = field(default_factory=lambda: {p: 1.0 for p in Provenance})

    def __post_init__(self):
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("mixture weights must be nonnegative")
        if not any(w > 0 for w in self.weights.values()):
            raise ValueError("at least one mixture weight must be positive")

    @classmethod
    def parse(cls, text: str) -> "MixtureSpec":
        """Parse ``"SAME,MT"`` or ``"SAME:1,MT:0.5"``."""
        weights: dict[Provenance, float] = {}
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            name, _, w = part.partition(":")
            weights[Provenance(name.strip().upper())] = float(w) if w else 1.0
        return cls(weights)

    def enabled(self) -> list[Provenance]:
        return [p for p in Provenance if self.weights.get(p, 0.0) > 0]


# -- JSONL I/O ---------------------------------------------------------

def _read_jsonl(path: str | Path, parse) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                records.append(parse(rec))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid record ({exc})") from None
    return records


def _write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")


def load_parallel_pairs(path: str | Path) -> list[ParallelPair]:
    return _read_jsonl(path, ParallelPair.from_record)


def save_parallel_pairs(path: str | Path, pairs: Iterable[ParallelPair]) -> None:
    _write_jsonl(path, (p.to_record() for p in pairs))


def load_text_image_pairs(path: str | Path, dim: int | None = None) -> list[TextImagePair]:
    pairs = _read_jsonl(path, TextImagePair.from_record)
    check_text_image_pairs(pairs, dim)
    return pairs


def check_text_image_pairs(pairs: Sequence[TextImagePair], dim: int | None = None) -> None:
    seen: dict[str, tuple[float, ...]] = {}
    for i, p in enumerate(pairs):
        if dim is not None and len(p.image_embedding) != dim:
            raise DataFormatError(f"record {i + 1}: image_embedding has length {len(p.image_embedding)}, expected {dim}")
        prev = seen.setdefault(p.image_id, p.image_embedding)
        if prev != p.image_embedding:
            raise DataFormatError(f"record {i + 1}: image_id {p.image_id!r} has conflicting embeddings")
        if dim is None:
            dim = len(p.image_embedding)


def save_text_image_pairs(path: str | Path, pairs: Iterable[TextImagePair]) -> None:
    _write_jsonl(path, (p.to_record() for p in pairs))


def load_classification(path: str | Path) -> ClassificationDataset:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return ClassificationDataset.from_document(doc)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed JSON ({exc.msg})") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: invalid classification dataset ({exc})") from None


def save_classification(path: str | Path, dataset: ClassificationDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(dataset.to_document(), fh, ensure_ascii=False, separators=(",", ":"))
        fh.write("\n")


# -- filtering and sampling --------------------------------------------

def filter_by_aesthetic(pairs: Iterable[TextImagePair], threshold: float) -> list[TextImagePair]:
    """Keep pairs scoring strictly above ``threshold``; unscored pairs pass."""
    return [p for p in pairs if p.aesthetic_score is None or p.aesthetic_score > threshold]


def group_by_provenance(pairs: Iterable[ParallelPair]) -> dict[Provenance, list[ParallelPair]]:
    groups: dict[Provenance, list[ParallelPair]] = {p: [] for p in Provenance}
    for pair in pairs:
        groups[pair.provenance].append(pair)
    return groups


def sample_batch(
    pools: Mapping[Provenance, Sequence[ParallelPair]],
    spec: MixtureSpec,
    batch_size: int,
    rng: np.random.Generator,
) -> list[ParallelPair]:
    """Draw ``batch_size`` pairs i.i.d.: a class by normalized weight, then a uniform member."""
    classes = spec.enabled()
    for p in classes:
        if not pools.get(p):
            raise ValueError(f"mixture enables {p.value} but no {p.value} pairs are available")
    w = np.array([spec.weights[p] for p in classes], dtype=np.float64)
    which = rng.choice(len(classes), size=batch_size, p=w / w.sum())
    batch = []
    for c in which:
        pool = pools[classes[c]]
        batch.append(pool[int(rng.integers(len(pool)))])
    return batch


def epoch_order(n: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded permutation used for non-mixture (text-image) epochs."""
    return rng.permutation(n)
