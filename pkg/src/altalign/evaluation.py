"""Zero-shot classification and cross-modal retrieval metrics.

Similarity is cosine everywhere. Rankings break ties toward the lower
candidate index, so results never depend on sort stability quirks.
Reports keep full precision; :func:`fmt` rounds to one decimal for display.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import ClassificationDataset, TextImagePair

RECALL_KS = (1, 5, 10)

Encoder = Callable[[Sequence[str]], np.ndarray]


def fmt(value: float) -> str:
    return f"{value:.1f}"


def _unit_rows(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding row")
    return x / norms


def rank(scores: np.ndarray) -> np.ndarray:
    """Per-row candidate order: highest score first, ties to the lower index."""
    return np.argsort(-scores, axis=1, kind="stable")


def mean_recall(t2i: Mapping[int, float], i2t: Mapping[int, float]) -> float:
    values = [t2i[k] for k in RECALL_KS] + [i2t[k] for k in RECALL_KS]
    return sum(values) / len(values)


@dataclass
class RetrievalReport:
    t2i_recall: dict[int, float]
    i2t_recall: dict[int, float]
    mean_recall: float

    @classmethod
    def from_recalls(cls, t2i: Mapping[int, float], i2t: Mapping[int, float]) -> "RetrievalReport":
        return cls(dict(t2i), dict(i2t), mean_recall(t2i, i2t))

    def to_dict(self) -> dict:
        return {
            "t2i_recall": {str(k): v for k, v in self.t2i_recall.items()},
            "i2t_recall": {str(k): v for k, v in self.i2t_recall.items()},
            "mean_recall": self.mean_recall,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RetrievalReport":
        return cls(
            {int(k): float(v) for k, v in doc["t2i_recall"].items()},
            {int(k): float(v) for k, v in doc["i2t_recall"].items()},
            float(doc["mean_recall"]),
        )


@dataclass
class ClassificationReport:
    accuracy: float
    mean_per_class: float
    mean_top1_top5: float

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "mean_per_class": self.mean_per_class,
                "mean_top1_top5": self.mean_top1_top5}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ClassificationReport":
        return cls(float(doc["accuracy"]), float(doc["mean_per_class"]), float(doc["mean_top1_top5"]))


@dataclass
class MultilingualRetrievalReport:
    i2t_recall_at_10: dict[str, float]

    def to_dict(self) -> dict:
        return {"i2t_recall_at_10": dict(self.i2t_recall_at_10)}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "MultilingualRetrievalReport":
        return cls({k: float(v) for k, v in doc["i2t_recall_at_10"].items()})


# -- retrieval ---------------------------------------------------------

def _recalls(order: np.ndarray, relevant: Sequence[set[int]]) -> dict[int, float]:
    out = {}
    for k in RECALL_KS:
        top = order[:, :k]
        hits = sum(1 for row, rel in zip(top, relevant) if rel.intersection(row.tolist()))
        out[k] = 100.0 * hits / len(relevant)
    return out


def retrieval_eval(text_embs, img_embs, text_to_image: Sequence[int]) -> RetrievalReport:
    """Bidirectional Recall@{1,5,10} and their mean.

    ``text_to_image[i]`` is the image row described by text row ``i``; an
    image may have several captions. Image-to-text queries count a hit when
    any of the image's captions ranks within the top K.
    """
    t = _unit_rows(text_embs)
    im = _unit_rows(img_embs)
    gt = np.asarray(text_to_image, dtype=np.int64)
    if len(t) == 0 or len(im) == 0:
        raise ValueError("empty query set")
    if gt.shape != (len(t),):
        raise ValueError("text_to_image needs one image index per text")
    if gt.min() < 0 or gt.max() >= len(im):
        raise ValueError("text_to_image index out of range")
    captions: list[set[int]] = [set() for _ in range(len(im))]
    for ti, ii in enumerate(gt.tolist()):
        captions[ii].add(ti)
    if any(not c for c in captions):
        raise ValueError("every image query needs at least one caption")
    sims = t @ im.T
    t2i = _recalls(rank(sims), [{int(i)} for i in gt])
    i2t = _recalls(rank(sims.T), captions)
    return RetrievalReport.from_recalls(t2i, i2t)


def pairs_to_arrays(pairs: Sequence[TextImagePair]) -> tuple[list[str], np.ndarray, list[str], list[int]]:
    """Captions, unique image matrix (first-seen order), image ids, caption->image index."""
    ids: list[str] = []
    rows: list[tuple[float, ...]] = []
    where: dict[str, int] = {}
    gt = []
    for p in pairs:
        if p.image_id not in where:
            where[p.image_id] = len(ids)
            ids.append(p.image_id)
            rows.append(p.image_embedding)
        gt.append(where[p.image_id])
    return [p.caption for p in pairs], np.array(rows, dtype=np.float64), ids, gt


def evaluate_retrieval(pairs: Sequence[TextImagePair], encode: Encoder, lang: str | None = None) -> RetrievalReport:
    if lang is not None:
        pairs = [p for p in pairs if p.lang == lang]
    if not pairs:
        raise ValueError(f"no captions for language {lang!r}")
    captions, images, _, gt = pairs_to_arrays(pairs)
    return retrieval_eval(encode(captions), images, gt)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ALT_ALIGN_THREADS", "1")))
    except ValueError:
        return 1


def multilingual_retrieval_eval(pairs: Sequence[TextImagePair], encode: Encoder,
                                langs: Sequence[str] | None = None) -> MultilingualRetrievalReport:
    """Per-language image-to-text Recall@10 over one shared image set."""
    by_lang: dict[str, list[TextImagePair]] = {}
    for p in pairs:
        by_lang.setdefault(p.lang, []).append(p)
    langs = list(langs) if langs is not None else list(by_lang)
    if not langs:
        raise ValueError("no languages to evaluate")
    coverage = {lang: sorted({p.image_id for p in by_lang.get(lang, [])}) for lang in langs}
    reference = coverage[langs[0]]
    for lang in langs:
        if coverage[lang] != reference:
            raise ValueError(f"language {lang!r} does not cover the same image ids as {langs[0]!r}")
    order = {img: i for i, img in enumerate(reference)}

    def one(lang: str) -> float:
        lp = sorted(by_lang[lang], key=lambda p: order[p.image_id])
        return evaluate_retrieval(lp, encode).i2t_recall[10]

    with ThreadPoolExecutor(max_workers=min(_threads(), len(langs))) as pool:
        values = list(pool.map(one, langs))
    return MultilingualRetrievalReport(dict(zip(langs, values)))


# -- zero-shot classification -----------------------------------------

def class_prototypes(dataset: ClassificationDataset, lang: str, encode: Encoder) -> np.ndarray:
    """One unit prototype per class: mean of normalized template embeddings, renormalized."""
    if lang not in dataset.class_names or lang not in dataset.templates:
        raise KeyError(f"classification dataset has no class names/templates for {lang!r}")
    templates = dataset.templates[lang]
    names = dataset.class_names[lang]
    texts = [t.replace("{}", name) for name in names for t in templates]
    embs = _unit_rows(encode(texts)).reshape(len(names), len(templates), -1)
    return _unit_rows(embs.mean(axis=1))


def zero_shot_classify(item_embs, labels: Sequence[int], prototypes) -> ClassificationReport:
    """Nearest-prototype prediction; accuracy, mean per-class recall, mean(top1, top5)."""
    protos = _unit_rows(prototypes)
    if len(protos) < 1:
        raise ValueError("need at least one class")
    items = _unit_rows(item_embs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(items),):
        raise ValueError("one label per item is required")
    order = rank(items @ protos.T)
    top1 = order[:, 0] == labels
    top5 = (order[:, :5] == labels[:, None]).any(axis=1)
    n = len(labels)
    per_class = [int(top1[labels == c].sum()) / int((labels == c).sum()) for c in np.unique(labels)]
    acc1 = 100.0 * int(top1.sum()) / n
    acc5 = 100.0 * int(top5.sum()) / n
    return ClassificationReport(acc1, 100.0 * sum(per_class) / len(per_class), (acc1 + acc5) / 2)


def evaluate_classification(dataset: ClassificationDataset, lang: str, encode: Encoder) -> ClassificationReport:
    return zero_shot_classify(dataset.embeddings(), dataset.labels(), class_prototypes(dataset, lang, encode))


# -- tables ------------------------------------------------------------

def retrieval_table(rows: Mapping[str, RetrievalReport]) -> str:
    head = f"{'Dataset':<18}| {'Text-to-Image':^20} | {'Image-to-Text':^20} | {'MR':>5}"
    sub = f"{'':<18}| {'R@1':>6}{'R@5':>7}{'R@10':>7} | {'R@1':>6}{'R@5':>7}{'R@10':>7} | {'':>5}"
    lines = [head, sub, "-" * len(head)]
    for name, r in rows.items():
        t = "".join(f"{fmt(r.t2i_recall[k]):>7}" for k in RECALL_KS)[1:]
        i = "".join(f"{fmt(r.i2t_recall[k]):>7}" for k in RECALL_KS)[1:]
        lines.append(f"{name:<18}| {t} | {i} | {fmt(r.mean_recall):>5}")
    return "\n".join(lines)


def classification_table(rows: Mapping[str, ClassificationReport]) -> str:
    lines = [f"{'Dataset':<18}| {'Acc':>6} | {'MeanPerClass':>12} | {'Mean(top1,top5)':>15}"]
    lines.append("-" * len(lines[0]))
    for name, r in rows.items():
        lines.append(f"{name:<18}| {fmt(r.accuracy):>6} | {fmt(r.mean_per_class):>12} | {fmt(r.mean_top1_top5):>15}")
    return "\n".join(lines)


def multilingual_table(report: MultilingualRetrievalReport) -> str:
    langs = list(report.i2t_recall_at_10)
    head = "Method | " + " | ".join(f"{lang:>5}" for lang in langs)
    row = "model  | " + " | ".join(f"{fmt(report.i2t_recall_at_10[lang]):>5}" for lang in langs)
    return "\n".join([head, "-" * len(head), row])
