"""Acceptance criteria 1-9, one test each.

Every test prints a ``PASS``/``FAIL`` line (visible in ``pytest -v`` output)
with the measured quantities behind the verdict. Run standalone with
``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import contextlib
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from altalign import tensor as T
from altalign.ablation import Toggles, run_ablation
from altalign.cli import main as cli_main
from altalign.encoders import ImageProvider, TextEncoder, param_digest
from altalign.evaluation import evaluate_retrieval, fmt, mean_recall, retrieval_eval, zero_shot_classify
from altalign.synthetic import SynthConfig, gen_synthetic_corpus, initial_bundle
from altalign.tensor import Tensor
from altalign.training import (
    DESK_CONTRASTIVE,
    DESK_TEACHER_LEARNING,
    ContrastiveHead,
    StageConfig,
    contrastive_loss,
    lr_at,
    run_stage,
)

from helpers import (
    classify_instance,
    classify_oracle,
    gradcheck,
    retrieval_instance,
    retrieval_oracle,
    tiny_encoder_config,
)

SEEDS = range(20)
TRIALS = 1000


@contextlib.contextmanager
def criterion(capsys, number: int, title: str):
    """Print one verdict line for the enclosed checks; ``notes`` collects measurements."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        with capsys.disabled():
            print(f"\nFAIL [{number}] {title}: {'; '.join(notes)} ({type(exc).__name__}: {exc})".rstrip())
        raise
    with capsys.disabled():
        print(f"\nPASS [{number}] {title}: {'; '.join(notes)}")


# -- 1: gradients ------------------------------------------------------

def _primitive_cases(rng):
    """name -> (function of tensors, input arrays) for one random draw."""
    n, d = int(rng.integers(2, 5)), int(rng.integers(2, 6))

    def x(*shape, s=1.0):
        return rng.normal(size=shape) * s

    targets = rng.integers(0, d, size=n)
    ids = rng.integers(0, 5, size=(n, 3))
    rows = rng.integers(0, n, size=n + 2)
    return {
        "add": (T.add, [x(n, d), x(d)]),
        "sub": (T.sub, [x(n, d), x(n, 1)]),
        "mul": (T.mul, [x(n, d), x(n, d)]),
        "scale": (lambda a: T.scale(a, 1.7), [x(n, d)]),
        "exp": (T.exp, [x(n, d, s=0.5)]),
        "gelu": (T.gelu, [x(n, d, s=2.0)]),
        "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [x(2, n, d)]),
        "reshape": (lambda a: T.reshape(a, (d, n)), [x(n, d)]),
        "index": (lambda a: T.index(a, rows), [x(n, d)]),
        "embedding": (lambda t: T.embedding(t, ids), [x(5, d)]),
        "sum": (lambda a: T.sum(a, axis=1, keepdims=True), [x(n, d)]),
        "mean": (lambda a: T.mean(a, axis=0), [x(n, d)]),
        "matmul": (T.matmul, [x(2, n, d), x(d, 3)]),
        "softmax": (T.softmax, [x(n, d)]),
        "layer_norm": (T.layer_norm, [x(n, d), 1 + x(d, s=0.1), x(d, s=0.1)]),
        "l2_normalize": (T.l2_normalize, [x(n, d)]),
        "softmax_cross_entropy": (lambda z: T.softmax_cross_entropy(z, targets), [x(n, d)]),
        "mse": (T.mse, [x(n, d), x(n, d)]),
        "contrastive_loss": (lambda a, b, s: contrastive_loss(a, b, ContrastiveHead(s)),
                             [x(n, d), x(n, d), np.array(rng.uniform(0.0, 2.0))]),
    }


def _encoder_case(seed):
    rng = np.random.default_rng(seed)
    cfg = tiny_encoder_config()
    enc = TextEncoder(cfg, rng=rng)
    names = sorted(enc.params)
    lens = rng.integers(1, cfg.max_len, size=3)
    ids = np.zeros((3, cfg.max_len), dtype=np.int64)
    for r, k in enumerate(lens):
        ids[r, 0] = 1
        ids[r, 1:k] = rng.integers(4, cfg.vocab_size, size=k - 1)

    def fn(*tensors):
        return TextEncoder(cfg, dict(zip(names, tensors)))(ids)

    return fn, [enc.params[k].data.astype(np.float64) for k in names]


def test_criterion_1_gradients(capsys):
    with criterion(capsys, 1, "finite-difference gradient suite") as notes:
        start = time.perf_counter()
        worst = {np.float32: {}, np.float64: {}}
        for seed in SEEDS:
            cases = _primitive_cases(np.random.default_rng(seed))
            cases["student_encoder"] = _encoder_case(seed)
            for name, (fn, inputs) in cases.items():
                coords = 4 if name == "student_encoder" else None
                for dtype in worst:
                    err = gradcheck(fn, inputs, dtype=dtype, seed=seed, coords=coords)
                    worst[dtype][name] = max(worst[dtype].get(name, 0.0), err)
        elapsed = time.perf_counter() - start
        w32 = max(worst[np.float32].values())
        w64 = max(worst[np.float64].values())
        notes.append(f"{len(worst[np.float32])} functions x {len(SEEDS)} seeds")
        notes.append(f"max rel err f32 {w32:.2e} ({max(worst[np.float32], key=worst[np.float32].get)})")
        notes.append(f"f64 {w64:.2e} ({max(worst[np.float64], key=worst[np.float64].get)})")
        notes.append(f"student encoder f32 {worst[np.float32]['student_encoder']:.2e}, "
                     f"f64 {worst[np.float64]['student_encoder']:.2e}")
        notes.append(f"{elapsed:.1f}s")
        assert w32 < 1e-3
        assert w64 < 1e-5
        assert elapsed < 60


# -- 2: ranking oracles ------------------------------------------------

def test_criterion_2_oracle_equivalence(capsys):
    with criterion(capsys, 2, "retrieval/classification vs brute-force oracles") as notes:
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        mismatches = 0
        for i in range(200):
            texts, images, gt = retrieval_instance(rng, tied=bool(i % 2))
            t2i, i2t, mr = retrieval_oracle(texts, images, gt)
            r = retrieval_eval(texts, images, gt)
            mismatches += (r.t2i_recall, r.i2t_recall, r.mean_recall) != (t2i, i2t, mr)
            items, labels, protos = classify_instance(rng, tied=bool(i % 2))
            c = zero_shot_classify(items, labels, protos)
            mismatches += (c.accuracy, c.mean_per_class, c.mean_top1_top5) != classify_oracle(items, labels, protos)
        elapsed = time.perf_counter() - start
        notes.append("200 retrieval + 200 classification instances, half with exact ties")
        notes.append(f"{mismatches} mismatches; {elapsed:.1f}s")
        assert mismatches == 0
        assert elapsed < 30


# -- 3: MR anchor ------------------------------------------------------

def test_criterion_3_mean_recall_anchor(capsys):
    with criterion(capsys, 3, "mean-recall arithmetic anchor") as notes:
        mr = mean_recall({1: 65.0, 5: 87.1, 10: 92.2}, {1: 85.1, 5: 97.3, 10: 99.2})
        notes.append(f"MR {mr!r} -> {fmt(mr)}")
        assert mr == pytest.approx(87.65, abs=1e-9)
        assert fmt(mr) == "87.6"


# -- 4: loss anchors ---------------------------------------------------

def test_criterion_4_loss_anchors(capsys):
    with criterion(capsys, 4, "loss anchors") as notes:
        rng = np.random.default_rng(4)
        for n in (2, 4, 16):
            t = np.tile(rng.normal(size=(1, 8)), (n, 1))
            im = np.tile(rng.normal(size=(1, 8)), (n, 1))
            loss = contrastive_loss(Tensor(t), Tensor(im), ContrastiveHead(Tensor(math.log(1 / 0.07)))).item()
            notes.append(f"N={n}: |loss - ln N| = {abs(loss - math.log(n)):.1e}")
            assert abs(loss - math.log(n)) < 1e-6
        one = contrastive_loss(Tensor(rng.normal(size=(1, 8))), Tensor(rng.normal(size=(1, 8))),
                               ContrastiveHead(Tensor(math.log(1 / 0.07)))).item()
        e = rng.normal(size=(5, 8))
        mse = T.mse(Tensor(e), Tensor(e)).item()
        notes.append(f"N=1 loss {one}; MSE(x, x) {mse}")
        assert one == 0.0
        assert mse == 0.0


# -- 5 & 6: the full synthetic pipeline --------------------------------

@pytest.fixture(scope="module")
def pipeline():
    start = time.perf_counter()
    corpus = gen_synthetic_corpus(SynthConfig(seed=7, concepts=10, langs=("en", "zh"), dim=32))
    bundle = initial_bundle(corpus)
    s1 = run_stage("distill", DESK_TEACHER_LEARNING, corpus.parallel, bundle)
    mid = s1.bundle
    mid.set_images(ImageProvider.from_pairs(corpus.train_pairs))
    digests = {"teacher0": param_digest({"t": bundle.teacher.table}),
               "teacher1": param_digest({"t": mid.teacher.table}),
               "images1": param_digest({"i": mid.images.table})}
    s2 = run_stage("contrast", DESK_CONTRASTIVE, corpus.train_pairs, mid)
    digests["teacher2"] = param_digest({"t": s2.bundle.teacher.table})
    digests["images2"] = param_digest({"i": s2.bundle.images.table})
    mr = {lang: evaluate_retrieval(corpus.eval_pairs, s2.bundle.embed_texts, lang).mean_recall
          for lang in corpus.config.langs}
    return {"s1": s1, "s2": s2, "digests": digests, "mr": mr, "elapsed": time.perf_counter() - start}


def test_criterion_5_freezing(capsys, pipeline):
    with criterion(capsys, 5, "frozen teacher and image provider") as notes:
        d = pipeline["digests"]
        notes.append(f"stage 1 ran {len(pipeline['s1'].log)} steps, stage 2 ran {len(pipeline['s2'].log)} steps")
        notes.append(f"teacher sha256 {d['teacher0'][:12]}.. before/after both stages")
        notes.append(f"images sha256 {d['images1'][:12]}.. before/after stage 2")
        assert len(pipeline["s1"].log) == 500
        assert len(pipeline["s2"].log) == 200
        assert d["teacher0"] == d["teacher1"] == d["teacher2"]
        assert d["images1"] == d["images2"]


def test_criterion_6_end_to_end(capsys, pipeline):
    with criterion(capsys, 6, "end-to-end convergence on the synthetic corpus") as notes:
        s1_log, s2_log = pipeline["s1"].log, pipeline["s2"].log
        final_mse = s1_log[-1]["loss"]
        first = s2_log[0]["loss"]
        tail = float(np.mean([r["loss"] for r in s2_log[-10:]]))
        drop = 1 - tail / first
        notes.append(f"stage-1 final MSE {final_mse:.2e} after {len(s1_log)} steps")
        notes.append(f"stage-2 loss {first:.3f} -> {tail:.3f} (last-10 mean, {100 * drop:.0f}% drop)")
        notes.append("MR " + ", ".join(f"{k} {fmt(v)}" for k, v in pipeline["mr"].items()))
        notes.append(f"{pipeline['elapsed']:.1f}s")
        assert len(s1_log) <= 500 and final_mse < 1e-3
        assert drop >= 0.20
        assert all(v >= 95.0 for v in pipeline["mr"].values())
        assert pipeline["elapsed"] < 300


# -- 7: ablation directions --------------------------------------------

def test_criterion_7_ablation_direction(capsys):
    with criterion(capsys, 7, "ablation directions") as notes:
        corpus = gen_synthetic_corpus(SynthConfig(seed=7))
        rows = [Toggles(True, False, False, False), Toggles(True, True, False, False),
                Toggles(False, True, False, False)]
        same, both, mt = run_ablation(initial_bundle(corpus), corpus.parallel, corpus.train_pairs,
                                      corpus.eval_pairs, corpus.classification, DESK_TEACHER_LEARNING,
                                      DESK_CONTRASTIVE, "en", "zh", rows)
        notes.append(f"target retrieval MR: EN-EN {fmt(same.results['retrieval_tgt'])} -> "
                     f"+MT {fmt(both.results['retrieval_tgt'])}")
        notes.append(f"source classification: MT-only {fmt(mt.results['classify_src'])} -> "
                     f"+EN-EN {fmt(both.results['classify_src'])}")
        assert both.results["retrieval_tgt"] > same.results["retrieval_tgt"]
        assert both.results["classify_src"] > mt.results["classify_src"]


# -- 8: CLI determinism ------------------------------------------------

def _cli_session(root: Path, configs: Path) -> None:
    """Every subcommand, with paths relative to ``root`` so manifests are comparable."""
    cwd = os.getcwd()
    os.chdir(root)
    try:
        c1, c2 = str(configs / "s1.json"), str(configs / "s2.json")
        for argv in (
            ["gen-synth", "--seed", "7", "--out-dir", "data"],
            ["init", "--vocab", "data/vocab.txt", "--out", "init", "--seed", "3"],
            ["distill", "--data", "data", "--out", "distill", "--seed", "7"],
            ["contrast", "--data", "data", "--init-checkpoint", "distill/final.ckpt", "--out", "contrast"],
            ["eval", "--task", "retrieval", "--checkpoint", "contrast/final.ckpt", "--data", "data", "--out", "eval_r"],
            ["eval", "--task", "classify", "--checkpoint", "contrast/final.ckpt", "--data", "data", "--out", "eval_c"],
            ["eval", "--task", "multilingual", "--checkpoint", "contrast/final.ckpt", "--data", "data",
             "--out", "eval_m", "--format", "json"],
            ["ablate", "--data", "data", "--config", c1, "--contrast-config", c2, "--out", "ablate", "--keep-runs"],
            ["write-config", "--stage", "distill", "--out", "cfg/distill.json"],
        ):
            assert cli_main(argv) == 0, argv
    finally:
        os.chdir(cwd)


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_cli_determinism(capsys, tmp_path):
    with criterion(capsys, 8, "CLI determinism") as notes:
        configs = tmp_path / "configs"
        configs.mkdir()
        replace(DESK_TEACHER_LEARNING, total_steps=40).save(configs / "s1.json")
        replace(DESK_CONTRASTIVE, total_steps=20).save(configs / "s2.json")
        trees = []
        for run in ("a", "b"):
            (tmp_path / run).mkdir()
            with capsys.disabled(), contextlib.redirect_stdout(open(os.devnull, "w")):
                _cli_session(tmp_path / run, configs)
            trees.append(_tree(tmp_path / run))
        a, b = trees
        differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
        kinds = {Path(k).suffix or Path(k).name for k in a}
        notes.append(f"{len(a)} files compared ({', '.join(sorted(kinds))})")
        notes.append(f"{len(differing)} differ" + (f": {differing[:5]}" if differing else ""))
        assert any(k.endswith(".ckpt") for k in a) and any(k.endswith("loss_log.jsonl") for k in a)
        assert any(k.endswith("report.json") for k in a)
        assert not differing


# -- 9: invariance suite -----------------------------------------------

def _positive_scales(rng, n):
    return np.exp(rng.uniform(-3, 3, size=(n, 1)))


def test_criterion_9_invariances(capsys):
    with criterion(capsys, 9, "invariance suite") as notes:
        rng = np.random.default_rng(99)
        violations = dict.fromkeys(("recall_monotone", "scale_invariant", "permutation_invariant",
                                    "loss_row_rescaling", "lr_schedule_shape"), 0)
        for trial in range(TRIALS):
            texts, images, gt = retrieval_instance(rng, tied=bool(trial % 2))
            base = retrieval_eval(texts, images, gt)

            for rec in (base.t2i_recall, base.i2t_recall):
                ok = 0.0 <= rec[1] <= rec[5] <= rec[10] <= 100.0
                violations["recall_monotone"] += not ok

            scaled = retrieval_eval(texts * _positive_scales(rng, len(texts)),
                                    images * _positive_scales(rng, len(images)), gt)
            violations["scale_invariant"] += scaled != base

            # permutations move tie-breaks, so they are checked on tie-free draws
            t, im, g = retrieval_instance(rng, tied=False)
            ref = retrieval_eval(t, im, g)
            pt, pi = rng.permutation(len(t)), rng.permutation(len(im))
            inv = np.argsort(pi)
            permuted = retrieval_eval(t[pt], im[pi], inv[np.asarray(g)[pt]])
            items, labels, protos = classify_instance(rng, tied=False)
            pc = rng.permutation(len(items))
            same_cls = zero_shot_classify(items[pc], labels[pc], protos) == zero_shot_classify(items, labels, protos)
            violations["permutation_invariant"] += (permuted != ref) or not same_cls

            n, d = int(rng.integers(1, 17)), int(rng.integers(2, 9))
            a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            with T.precision(np.float64):
                head = ContrastiveHead(Tensor(rng.uniform(0.0, math.log(100))))
                l0 = contrastive_loss(Tensor(a), Tensor(b), head).item()
                l1 = contrastive_loss(Tensor(a * _positive_scales(rng, n)), Tensor(b * _positive_scales(rng, n)),
                                      head).item()
            violations["loss_row_rescaling"] += abs(l0 - l1) > 1e-9 * max(1.0, abs(l0))

            cfg = StageConfig(lr=float(rng.uniform(1e-6, 1e-2)), warmup_steps=int(rng.integers(0, 60)),
                              total_steps=int(rng.integers(0, 200)),
                              schedule=str(rng.choice(["constant", "linear", "cosine"])))
            lrs = [lr_at(s, cfg) for s in range(1, 260)]
            w = cfg.warmup_steps
            warm, after = lrs[: max(w, 1)], lrs[max(w, 1) - 1:]
            ok = all(0.0 <= v <= cfg.lr * (1 + 1e-12) for v in lrs)
            ok &= all(x <= y for x, y in zip(warm, warm[1:]))
            ok &= lrs[max(w, 1) - 1] == pytest.approx(cfg.lr)
            if cfg.schedule == "constant" or cfg.total_steps <= w:
                ok &= all(v == cfg.lr for v in after)
            else:
                ok &= all(x >= y for x, y in zip(after, after[1:]))
            violations["lr_schedule_shape"] += not ok
        notes.append(f"{TRIALS} trials per property; violations " + ", ".join(f"{k}={v}" for k, v in violations.items()))
        assert not any(violations.values())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
