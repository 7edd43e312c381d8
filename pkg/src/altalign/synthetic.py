"""Deterministic synthetic corpora that are learnable by construction.

Each concept gets one pseudo-word per language, a unit image vector, and a
nearby (not identical) text vector, which mimics the gap between a CLIP
text tower and its image tower. An image is a set of 1..``max_concepts``
concepts; its embedding is the normalized sum of the concept image vectors.
Captions list the concept words in random order, sprinkled with filler
words that carry no meaning.

The oracle teacher is a :class:`~altalign.encoders.LexiconTeacher` holding
the source-language concept text vectors, so its output for a caption is
the normalized sum of that caption's concept text vectors.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    ClassificationDataset,
    ParallelPair,
    Provenance,
    TextImagePair,
    save_classification,
    save_parallel_pairs,
    save_text_image_pairs,
)
from .encoders import (
    EncoderBundle,
    LexiconTeacher,
    TextEncoder,
    TextEncoderConfig,
    Vocab,
    save_checkpoint,
)

_LATIN_ONSETS = "b d f g k l m n p r s t v z".split()
_LATIN_VOWELS = "a e i o u".split()


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    concepts: int = 10
    langs: tuple[str, ...] = ("en", "zh")
    dim: int = 32
    fillers: int = 6
    max_concepts: int = 3
    max_fillers: int = 2
    pairs_per_class: int = 1500
    captions_per_image: int = 2
    eval_images: int = 40
    items_per_class: int = 5
    modality_gap: float = 1.0
    item_noise: float = 0.05
    max_len: int = 8

    def __post_init__(self):
        object.__setattr__(self, "langs", tuple(self.langs))
        for name in ("concepts", "dim", "fillers", "max_concepts", "pairs_per_class",
                     "captions_per_image", "eval_images", "items_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if len(self.langs) < 1 or len(set(self.langs)) != len(self.langs):
            raise ValueError("langs must be nonempty and distinct")
        if self.max_len < self.max_concepts + self.max_fillers + 1:
            raise ValueError("max_len too small for the longest caption")

    @property
    def source_lang(self) -> str:
        return self.langs[0]


@dataclass
class SynthCorpus:
    config: SynthConfig
    vocab: Vocab
    teacher_table: np.ndarray
    parallel: list[ParallelPair]
    train_pairs: list[TextImagePair]
    eval_pairs: list[TextImagePair]
    classification: ClassificationDataset
    concept_images: np.ndarray
    lexicon: dict[str, list[str]] = field(default_factory=dict)
    filler_words: dict[str, list[str]] = field(default_factory=dict)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _make_words(rng: np.random.Generator, lang: str, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        if lang == "zh":
            w = "".join(chr(0x4E00 + int(c)) for c in rng.integers(0, 0x5000, size=2))
        else:
            syl = rng.integers(2, 4)
            w = "".join(_LATIN_ONSETS[rng.integers(len(_LATIN_ONSETS))] + _LATIN_VOWELS[rng.integers(5)]
                        for _ in range(syl))
            w = f"{w}_{lang}" if lang != "en" else w
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def gen_synthetic_corpus(config: SynthConfig) -> SynthCorpus:
    rng = np.random.default_rng(config.seed)
    cfg = config
    src = cfg.source_lang

    taken: set[str] = set()
    lexicon = {lang: _make_words(rng, lang, cfg.concepts, taken) for lang in cfg.langs}
    fillers = {lang: _make_words(rng, lang, cfg.fillers, taken) for lang in cfg.langs}

    concept_images = _unit(rng.normal(size=(cfg.concepts, cfg.dim)))
    gap = _unit(rng.normal(size=(cfg.concepts, cfg.dim)))
    concept_texts = _unit(concept_images + cfg.modality_gap * gap)

    vocab = Vocab.from_words(w for lang in cfg.langs for w in lexicon[lang] + fillers[lang])
    table = np.zeros((len(vocab), cfg.dim))
    for k, w in enumerate(lexicon[src]):
        table[vocab.id(w)] = concept_texts[k]

    combos = [c for r in range(1, min(cfg.max_concepts, cfg.concepts) + 1)
              for c in itertools.combinations(range(cfg.concepts), r)]
    singles = [c for c in combos if len(c) == 1]
    rest = [c for c in combos if len(c) > 1]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    n_eval = min(cfg.eval_images, len(rest))
    eval_combos = rest[:n_eval]
    train_combos = singles + rest[n_eval:]

    def image_vec(combo) -> np.ndarray:
        return _unit(concept_images[list(combo)].sum(axis=0))

    def caption_slots(combo) -> list[tuple[str, int]]:
        """Language-neutral caption: ("c", concept) / ("f", filler) slots."""
        slots = [("c", int(k)) for k in rng.permutation(list(combo))]
        for _ in range(int(rng.integers(0, cfg.max_fillers + 1))):
            slots.insert(int(rng.integers(0, len(slots) + 1)), ("f", int(rng.integers(cfg.fillers))))
        return slots

    def render(slots, lang) -> str:
        return " ".join(lexicon[lang][i] if kind == "c" else fillers[lang][i] for kind, i in slots)

    parallel: list[ParallelPair] = []
    for _ in range(cfg.pairs_per_class):
        slots = caption_slots(train_combos[rng.integers(len(train_combos))])
        text = render(slots, src)
        parallel.append(ParallelPair(text, text, src, src, Provenance.SAME))
    for lang in cfg.langs[1:]:
        for prov in (Provenance.MT, Provenance.HT):
            for _ in range(cfg.pairs_per_class):
                slots = caption_slots(train_combos[rng.integers(len(train_combos))])
                tgt_slots = slots if prov is Provenance.MT else [slots[i] for i in rng.permutation(len(slots))]
                parallel.append(ParallelPair(render(slots, src), render(tgt_slots, lang), src, lang, prov))

    def text_image_pairs(combos, prefix) -> list[TextImagePair]:
        out = []
        for j, combo in enumerate(combos):
            emb = tuple(float(v) for v in image_vec(combo))
            image_id = f"{prefix}-{j:04d}"
            for lang in cfg.langs:
                for _ in range(cfg.captions_per_image):
                    score = round(float(rng.uniform(4.5, 7.5)), 2)
                    out.append(TextImagePair(render(caption_slots(combo), lang), lang, image_id, emb, score))
        return out

    train_pairs = text_image_pairs(train_combos, "img")
    eval_pairs = text_image_pairs(eval_combos, "eval")

    templates = {}
    for lang in cfg.langs:
        f = fillers[lang]
        templates[lang] = [f"{f[0]} {{}}", f"{f[1 % len(f)]} {f[2 % len(f)]} {{}}", f"{{}} {f[3 % len(f)]}"]
    items = []
    for k in range(cfg.concepts):
        for _ in range(cfg.items_per_class):
            emb = _unit(concept_images[k] + cfg.item_noise * rng.normal(size=cfg.dim))
            items.append((tuple(float(v) for v in emb), k))
    classification = ClassificationDataset(
        class_names={lang: list(lexicon[lang]) for lang in cfg.langs},
        templates=templates,
        items=items,
    )
    return SynthCorpus(cfg, vocab, table, parallel, train_pairs, eval_pairs, classification,
                       concept_images, lexicon, fillers)


def default_student_config(vocab_size: int, joint_dim: int, max_len: int = 8) -> TextEncoderConfig:
    return TextEncoderConfig(layers=2, model_dim=48, heads=4, ffn_dim=96, max_len=max_len,
                             vocab_size=vocab_size, pooling="CLS", proj_dim=joint_dim)


def initial_bundle(corpus: SynthCorpus, seed: int | None = None,
                   student_config: TextEncoderConfig | None = None) -> EncoderBundle:
    """Oracle lexicon teacher plus a freshly initialized student."""
    cfg = corpus.config
    student_config = student_config or default_student_config(len(corpus.vocab), cfg.dim, cfg.max_len)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    teacher = LexiconTeacher(corpus.teacher_table, cfg.max_len)
    return EncoderBundle(corpus.vocab, teacher, TextEncoder(student_config, rng=rng))


FILES = {
    "parallel": "parallel.jsonl",
    "text_image": "text_image.jsonl",
    "classification": "classification.json",
    "retrieval": "retrieval_eval.jsonl",
    "vocab": "vocab.txt",
    "init_checkpoint": "init.ckpt",
}


def write_corpus(corpus: SynthCorpus, out_dir: str | Path) -> dict:
    """Write every corpus file plus ``manifest.json``; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_parallel_pairs(out / FILES["parallel"], corpus.parallel)
    save_text_image_pairs(out / FILES["text_image"], corpus.train_pairs)
    save_classification(out / FILES["classification"], corpus.classification)
    save_text_image_pairs(out / FILES["retrieval"], corpus.eval_pairs)
    corpus.vocab.save(out / FILES["vocab"])
    save_checkpoint(initial_bundle(corpus), out / FILES["init_checkpoint"])
    cfg = asdict(corpus.config)
    cfg["langs"] = list(corpus.config.langs)
    manifest = {"config": cfg, "files": dict(FILES)}
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir: str | Path) -> dict:
    with open(Path(data_dir) / "manifest.json", encoding="utf-8") as fh:
        return json.load(fh)
