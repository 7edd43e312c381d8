"""Finite-difference gradient checking and small fixtures shared by the tests."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from altalign import tensor as T
from altalign.tensor import Tensor


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation relative to the largest reference gradient entry."""
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(np.asarray(analytic, np.float64) - numeric))) / scale


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], dtype=np.float64,
              h: float = 1e-6, seed: int = 0, coords: int | None = None) -> float:
    """Relative error of ``fn``'s analytic gradient, see :func:`rel_error`.

    The output is reduced with a fixed random weighting so every output
    element contributes. The analytic gradient is computed in ``dtype``;
    the reference is always a float64 central difference. ``coords`` limits
    the check to that many random coordinates per input. Errors are scaled
    by the largest gradient entry over all inputs, so an input whose true
    gradient is zero (e.g. the pad embedding) is held to the same bar.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(x, np.float64) for x in inputs]
    with T.precision(np.float64):
        probe = fn(*[Tensor(x) for x in inputs])
    weights = rng.normal(size=probe.shape)

    def scalar(arrays, dt):
        with T.precision(dt):
            ts = [Tensor(a, requires_grad=True) for a in arrays]
            out = fn(*ts)
            loss = T.sum(T.mul(out, Tensor(weights)))
        return loss, ts

    loss, ts = scalar(inputs, dtype)
    loss.backward()
    analytic_all, numeric_all = [], []
    for i, x in enumerate(inputs):
        analytic = ts[i].grad
        flat = np.arange(x.size)
        if coords is not None and coords < x.size:
            flat = rng.choice(x.size, size=coords, replace=False)
        numeric = np.zeros(len(flat))
        for j, c in enumerate(flat):
            idx = np.unravel_index(c, x.shape)
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[i][idx] += h
            minus[i][idx] -= h
            with T.no_grad():
                fp = scalar(plus, np.float64)[0].item()
                fm = scalar(minus, np.float64)[0].item()
            numeric[j] = (fp - fm) / (2 * h)
        analytic_all.append(analytic.reshape(-1)[flat])
        numeric_all.append(numeric)
    return rel_error(np.concatenate(analytic_all), np.concatenate(numeric_all))


def tiny_encoder_config(**overrides):
    from altalign.encoders import TextEncoderConfig

    cfg = dict(layers=2, model_dim=8, heads=2, ffn_dim=16, max_len=6, vocab_size=12,
               pooling="CLS", proj_dim=5)
    cfg.update(overrides)
    return TextEncoderConfig(**cfg)


# -- brute-force ranking oracles -----------------------------------------

def cosine(u, v) -> float:
    u, v = np.asarray(u, np.float64), np.asarray(v, np.float64)
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def position(scores: Sequence[float], target: int) -> int:
    """0-based rank of ``target``: candidates scoring higher, or equal with a lower index, go first."""
    s = scores[target]
    return sum(1 for j, v in enumerate(scores) if v > s or (v == s and j < target))


def retrieval_oracle(texts, images, text_to_image, ks=(1, 5, 10)):
    sims = [[cosine(t, im) for im in images] for t in texts]
    t2i = {k: 100.0 * sum(position(row, g) < k for row, g in zip(sims, text_to_image)) / len(texts)
           for k in ks}
    i2t = {}
    for k in ks:
        hits = 0
        for j in range(len(images)):
            column = [sims[i][j] for i in range(len(texts))]
            caps = [i for i, g in enumerate(text_to_image) if g == j]
            hits += any(position(column, c) < k for c in caps)
        i2t[k] = 100.0 * hits / len(images)
    mr = sum(list(t2i.values()) + list(i2t.values())) / (2 * len(ks))
    return t2i, i2t, mr


def classify_oracle(items, labels, prototypes):
    top1 = top5 = 0
    per_class: dict[int, list[bool]] = {}
    for x, y in zip(items, labels):
        scores = [cosine(x, p) for p in prototypes]
        pos = position(scores, int(y))
        top1 += pos == 0
        top5 += pos < 5
        per_class.setdefault(int(y), []).append(pos == 0)
    n = len(items)
    acc1, acc5 = 100.0 * top1 / n, 100.0 * top5 / n
    mpc = 100.0 * sum(sum(per_class[c]) / len(per_class[c]) for c in sorted(per_class)) / len(per_class)
    return acc1, mpc, (acc1 + acc5) / 2


def retrieval_instance(rng, tied: bool):
    """Random retrieval problem; ``tied`` draws from axis vectors so exact score ties occur."""
    n_img = int(rng.integers(1, 33))
    n_txt = int(rng.integers(n_img, 65))
    dim = int(rng.integers(2, 9))
    if tied:
        def draw(n):
            return np.eye(dim)[rng.integers(0, dim, size=n)]
    else:
        def draw(n):
            return rng.normal(size=(n, dim))
    gt = np.concatenate([rng.permutation(n_img), rng.integers(0, n_img, size=n_txt - n_img)])
    return draw(n_txt), draw(n_img), rng.permutation(gt)


def classify_instance(rng, tied: bool):
    n_cls = int(rng.integers(1, 13))
    n_items = int(rng.integers(1, 65))
    dim = int(rng.integers(2, 9))
    if tied:
        def draw(n):
            return np.eye(dim)[rng.integers(0, dim, size=n)]
    else:
        def draw(n):
            return rng.normal(size=(n, dim))
    return draw(n_items), rng.integers(0, n_cls, size=n_items), draw(n_cls)
