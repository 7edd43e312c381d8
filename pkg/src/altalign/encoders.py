"""Tokenizer, text encoders, frozen image lookup, and the bundle checkpoint format.

Encoder roles:

* teacher  -- frozen; pools the hidden state at the appended ``[TOS]`` token.
  Either a transformer or a :class:`LexiconTeacher` whose output is a fixed
  normalized bag of token vectors (used for synthetic, verifiable runs).
* student  -- trainable transformer pooling the leading ``[CLS]`` token,
  followed by a linear projection into the teacher's output space.
* images   -- frozen lookup of precomputed image embeddings.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, CLS, TOS, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[CLS]", "[TOS]", "[UNK]")


class Vocab:
    """Dense token ids; ids 0-3 are PAD, CLS, TOS, UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocab":
        return cls(list(RESERVED) + sorted({w.lower() for w in words} - set(RESERVED)))

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)


def tokenize(text: str, vocab: Vocab, max_len: int, style: str) -> list[int]:
    """Whitespace tokenization with the pooled special token kept under truncation.

    ``style="teacher"`` appends ``[TOS]``; ``style="student"`` prepends ``[CLS]``.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids = [vocab.id(tok) for tok in text.lower().split()][: max_len - 1]
    if style == "teacher":
        ids = ids + [TOS]
    elif style == "student":
        ids = [CLS] + ids
    else:
        raise ValueError(f"unknown tokenization style {style!r}")
    return ids + [PAD] * (max_len - len(ids))


def tokenize_batch(texts: Sequence[str], vocab: Vocab, max_len: int, style: str) -> np.ndarray:
    return np.array([tokenize(t, vocab, max_len, style) for t in texts], dtype=np.int64)


@dataclass(frozen=True)
class TextEncoderConfig:
    layers: int
    model_dim: int
    heads: int
    ffn_dim: int
    max_len: int
    vocab_size: int
    pooling: str  # "TOS" or "CLS"
    proj_dim: int | None = None

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if self.pooling not in ("TOS", "CLS"):
            raise ValueError(f"pooling must be TOS or CLS, got {self.pooling!r}")
        if min(self.layers + 1, self.model_dim, self.heads, self.ffn_dim, self.vocab_size) < 1:
            raise ValueError("encoder sizes must be positive")

    @property
    def out_dim(self) -> int:
        return self.proj_dim or self.model_dim

    @property
    def style(self) -> str:
        return "teacher" if self.pooling == "TOS" else "student"


def _init_params(cfg: TextEncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, f = cfg.model_dim, cfg.ffn_dim
    p: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, 1.0, (cfg.vocab_size, d)),
        "pos_emb": rng.normal(0.0, 0.1, (cfg.max_len, d)),
    }
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        p[b + "ln1.gamma"] = np.ones(d)
        p[b + "ln1.beta"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[b + f"attn.{name}"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
            p[b + f"attn.b{name[1]}"] = np.zeros(d)
        p[b + "ln2.gamma"] = np.ones(d)
        p[b + "ln2.beta"] = np.zeros(d)
        p[b + "mlp.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, f))
        p[b + "mlp.b1"] = np.zeros(f)
        p[b + "mlp.w2"] = rng.normal(0.0, 1.0 / math.sqrt(f), (f, d))
        p[b + "mlp.b2"] = np.zeros(d)
    p["ln_f.gamma"] = np.ones(d)
    p["ln_f.beta"] = np.zeros(d)
    if cfg.proj_dim:
        p["proj.weight"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, cfg.proj_dim))
        p["proj.bias"] = np.zeros(cfg.proj_dim)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def pool_positions(ids: np.ndarray, pooling: str) -> np.ndarray:
    if pooling == "CLS":
        return np.zeros(len(ids), dtype=np.int64)
    hits = ids == TOS
    if not hits.any(axis=1).all():
        raise ValueError("every teacher-style sequence needs a [TOS] token")
    return hits.argmax(axis=1)


class TextEncoder:
    """Pre-LN transformer encoder with key-padding attention mask."""

    kind = "transformer"

    def __init__(self, config: TextEncoderConfig, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        if params is None:
            params = _init_params(config, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    @property
    def max_len(self) -> int:
        return self.config.max_len

    @property
    def style(self) -> str:
        return self.config.style

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def header(self) -> dict:
        return {"kind": self.kind, "config": asdict(self.config)}

    def __call__(self, ids) -> Tensor:
        cfg, p = self.config, self.params
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError("ids must be a 2-d batch")
        n, L = ids.shape
        if L > cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise IndexError(f"token id out of range for vocab_size {cfg.vocab_size}")
        dtype = p["tok_emb"].dtype
        H, D = cfg.heads, cfg.model_dim
        dh = D // H
        x = T.embedding(p["tok_emb"], ids) + T.embedding(p["pos_emb"], np.arange(L))
        mask = Tensor(np.where(ids == PAD, -1e9, 0.0)[:, None, None, :], dtype=dtype)

        def heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (n, L, H, dh)), (0, 2, 1, 3))

        for i in range(cfg.layers):
            b = f"blocks.{i}."
            h = T.layer_norm(x, p[b + "ln1.gamma"], p[b + "ln1.beta"])
            q = heads(h @ p[b + "attn.wq"] + p[b + "attn.bq"])
            k = heads(h @ p[b + "attn.wk"] + p[b + "attn.bk"])
            v = heads(h @ p[b + "attn.wv"] + p[b + "attn.bv"])
            att = T.softmax(T.scale(q @ T.transpose(k), 1.0 / math.sqrt(dh)) + mask)
            o = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (n, L, D))
            x = x + (o @ p[b + "attn.wo"] + p[b + "attn.bo"])
            h = T.layer_norm(x, p[b + "ln2.gamma"], p[b + "ln2.beta"])
            x = x + (T.gelu(h @ p[b + "mlp.w1"] + p[b + "mlp.b1"]) @ p[b + "mlp.w2"] + p[b + "mlp.b2"])
        x = T.layer_norm(x, p["ln_f.gamma"], p["ln_f.beta"])
        pooled = T.index(x, (np.arange(n), pool_positions(ids, cfg.pooling)))
        if cfg.proj_dim:
            pooled = pooled @ p["proj.weight"] + p["proj.bias"]
        return pooled


class LexiconTeacher:
    """Frozen teacher whose output is the normalized sum of per-token vectors.

    Tokens with all-zero rows (specials, function words) contribute nothing,
    so a sentence's embedding depends only on its content words.
    """

    kind = "lexicon"
    style = "teacher"

    def __init__(self, table: np.ndarray | Tensor, max_len: int):
        self.table = table if isinstance(table, Tensor) else Tensor(table)
        self.max_len = max_len

    @property
    def out_dim(self) -> int:
        return self.table.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"table": self.table}

    def header(self) -> dict:
        return {"kind": self.kind, "config": {"vocab_size": self.table.shape[0],
                                              "dim": self.table.shape[1], "max_len": self.max_len}}

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.max() >= self.table.shape[0] or ids.min() < 0:
            raise IndexError(f"token id out of range for vocab_size {self.table.shape[0]}")
        summed = T.sum(T.embedding(self.table, ids), axis=1)
        return T.l2_normalize(summed)


class ImageProvider:
    """Frozen image-embedding lookup keyed by image id."""

    def __init__(self, image_ids: Sequence[str], table: np.ndarray | Tensor):
        self.image_ids = list(image_ids)
        self.table = table if isinstance(table, Tensor) else Tensor(table)
        if len(self.image_ids) != self.table.shape[0]:
            raise ValueError("one embedding row per image id is required")
        self._rows = {img: i for i, img in enumerate(self.image_ids)}
        if len(self._rows) != len(self.image_ids):
            raise ValueError("duplicate image ids")

    @classmethod
    def from_pairs(cls, pairs) -> "ImageProvider":
        ids, rows = [], []
        seen = set()
        for p in pairs:
            if p.image_id not in seen:
                seen.add(p.image_id)
                ids.append(p.image_id)
                rows.append(p.image_embedding)
        return cls(ids, np.array(rows))

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._rows

    def __call__(self, image_ids: Sequence[str]) -> Tensor:
        rows = []
        for img in image_ids:
            if img not in self._rows:
                raise KeyError(f"unknown image_id {img!r}")
            rows.append(self._rows[img])
        return T.index(self.table, np.array(rows, dtype=np.int64))


class EncoderBundle:
    """Teacher, student (+projection), contrastive temperature, and image lookup."""

    def __init__(self, vocab: Vocab, teacher, student: TextEncoder,
                 logit_scale: Tensor | None = None, images: ImageProvider | None = None):
        if student is teacher:
            raise ValueError("student and teacher must be distinct objects")
        if student.out_dim != teacher.out_dim:
            raise ValueError(f"student projects to {student.out_dim} but teacher outputs {teacher.out_dim}")
        if images is not None and images.dim != teacher.out_dim:
            raise ValueError("image embeddings must live in the joint (teacher) space")
        self.vocab = vocab
        self.teacher = teacher
        self.student = student
        if logit_scale is None:
            logit_scale = Tensor(math.log(1 / 0.07), requires_grad=True)
        self.logit_scale = logit_scale
        self.images = images
        for t in teacher.parameters().values():
            t.requires_grad = False
        if images is not None:
            images.table.requires_grad = False

    @property
    def joint_dim(self) -> int:
        return self.teacher.out_dim

    def set_images(self, images: ImageProvider) -> None:
        if images.dim != self.joint_dim:
            raise ValueError("image embeddings must live in the joint (teacher) space")
        images.table.requires_grad = False
        self.images = images

    # -- encoding ------------------------------------------------------
    def teacher_ids(self, texts: Sequence[str]) -> np.ndarray:
        return tokenize_batch(texts, self.vocab, self.teacher.max_len, "teacher")

    def student_ids(self, texts: Sequence[str]) -> np.ndarray:
        return tokenize_batch(texts, self.vocab, self.student.max_len, "student")

    def encode_teacher(self, ids) -> Tensor:
        with T.no_grad():
            return self.teacher(ids)

    def encode_student(self, ids) -> Tensor:
        return self.student(ids)

    def image_embed(self, image_ids: Sequence[str]) -> Tensor:
        if self.images is None:
            raise KeyError("bundle has no image provider")
        with T.no_grad():
            return self.images(image_ids)

    def embed_texts(self, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
        """Student embeddings for inference (no graph recorded)."""
        out = []
        with T.no_grad():
            for i in range(0, len(texts), batch_size):
                out.append(self.student(self.student_ids(texts[i:i + batch_size])).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.joint_dim))

    # -- parameter views -------------------------------------------------
    def trainable(self) -> dict[str, Tensor]:
        params = {f"student.{k}": v for k, v in self.student.parameters().items()}
        params["head.logit_scale"] = self.logit_scale
        return params

    def frozen(self) -> dict[str, Tensor]:
        params = {f"teacher.{k}": v for k, v in self.teacher.parameters().items()}
        if self.images is not None:
            params["images.table"] = self.images.table
        return params

    def named_tensors(self) -> dict[str, Tensor]:
        return {**self.frozen(), **self.trainable()}

    def copy(self) -> "EncoderBundle":
        return copy.deepcopy(self)


def param_digest(params: dict[str, Tensor]) -> str:
    """SHA-256 over sorted names, dtypes, shapes, and raw payloads."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.asarray(params[name].data, order="C")
        h.update(name.encode())
        h.update(f"{arr.dtype.str}{arr.shape}".encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# -- checkpoint format -------------------------------------------------
#
#   magic (8 bytes) | version u32 | header_len u32 | header JSON | crc32(header) u32
#   | n_tensors u32 | n x [name_len u16 | name | dtype u8 (0=f32) | ndim u8 | dims u32*
#     | payload <f4] | crc32(tensor table) u32
# All integers little-endian.

MAGIC = b"ALTALIGN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, corrupted, or inconsistent checkpoint."""


def _encoder_from_header(h: dict, tensors: dict[str, np.ndarray], prefix: str):
    names = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if h["kind"] == "lexicon":
        return LexiconTeacher(names["table"], int(h["config"]["max_len"]))
    if h["kind"] == "transformer":
        cfg = TextEncoderConfig(**h["config"])
        ref = _init_params(cfg, np.random.default_rng(0))
        if set(ref) != set(names):
            raise CheckpointError(f"{prefix[:-1]} tensors do not match its config")
        for k, v in ref.items():
            if v.shape != names[k].shape:
                raise CheckpointError(f"{prefix}{k}: shape {names[k].shape} does not match config {v.shape}")
        return TextEncoder(cfg, {k: Tensor(v, requires_grad=True) for k, v in names.items()})
    raise CheckpointError(f"unknown encoder kind {h['kind']!r}")


def save_checkpoint(bundle: EncoderBundle, path: str | Path) -> None:
    tensors = bundle.named_tensors()
    header = {
        "format": "altalign-bundle",
        "vocab": bundle.vocab.tokens,
        "teacher": bundle.teacher.header(),
        "student": bundle.student.header(),
        "image_ids": bundle.images.image_ids if bundle.images is not None else None,
        "tensors": [{"name": k, "shape": list(tensors[k].shape)} for k in sorted(tensors)],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    table = io.BytesIO()
    table.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name].data, dtype="<f4", order="C")  # keeps 0-d shapes
        nb = name.encode()
        table.write(struct.pack("<H", len(nb)) + nb)
        table.write(struct.pack("<BB", 0, arr.ndim))
        table.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        table.write(arr.tobytes())
    tbytes = table.getvalue()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", zlib.crc32(hbytes)))
        fh.write(tbytes)
        fh.write(struct.pack("<I", zlib.crc32(tbytes)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> EncoderBundle:
    """Load a bundle; parameters come back as float32 tensors."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic bytes: not an altalign checkpoint")
    version, hlen = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    hbytes = r.take(hlen)
    (crc,) = r.unpack("<I")
    if zlib.crc32(hbytes) != crc:
        raise CheckpointError("header checksum mismatch")
    try:
        header = json.loads(hbytes)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"header is not valid JSON ({exc})") from None
    tstart = r.pos
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        dtype, ndim = r.unpack("<BB")
        if dtype != 0:
            raise CheckpointError(f"{name}: unsupported dtype code {dtype}")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    tbytes = r.buf[tstart:r.pos]
    (crc,) = r.unpack("<I")
    if zlib.crc32(tbytes) != crc:
        raise CheckpointError("tensor table checksum mismatch")
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after tensor table")
    declared = {t["name"]: tuple(t["shape"]) for t in header["tensors"]}
    if declared != {k: v.shape for k, v in tensors.items()}:
        raise CheckpointError("tensor table does not match header (names or shapes)")

    with T.precision(np.float32):
        try:
            vocab = Vocab(header["vocab"])
            teacher = _encoder_from_header(header["teacher"], tensors, "teacher.")
            student = _encoder_from_header(header["student"], tensors, "student.")
            images = None
            if header["image_ids"] is not None:
                images = ImageProvider(header["image_ids"], tensors["images.table"])
            logit_scale = Tensor(tensors["head.logit_scale"], requires_grad=True)
            return EncoderBundle(vocab, teacher, student, logit_scale, images)
        except CheckpointError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"inconsistent checkpoint ({exc})") from None
