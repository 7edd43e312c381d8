"""``altalign`` command line: corpus generation, both training stages, evaluation, ablation.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 non-finite loss.
Every command appends one audit record to ``<out>/run_manifest.jsonl``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .ablation import DEFAULT_ROWS, AblationRow, ablation_table, run_ablation
from .data import (
    DataFormatError,
    MixtureSpec,
    filter_by_aesthetic,
    load_classification,
    load_parallel_pairs,
    load_text_image_pairs,
)
from .encoders import (
    CheckpointError,
    EncoderBundle,
    TextEncoder,
    TextEncoderConfig,
    Vocab,
    load_checkpoint,
    save_checkpoint,
)
from .evaluation import (
    classification_table,
    evaluate_classification,
    evaluate_retrieval,
    multilingual_retrieval_eval,
    multilingual_table,
    retrieval_table,
)
from .synthetic import FILES, SynthConfig, default_student_config, gen_synthetic_corpus, write_corpus
from .training import (
    DESK_CONTRASTIVE,
    DESK_TEACHER_LEARNING,
    PAPER_CONTRASTIVE,
    PAPER_TEACHER_LEARNING,
    NonFiniteError,
    StageConfig,
    run_stage,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PRESETS = {
    ("distill", "desk"): DESK_TEACHER_LEARNING,
    ("distill", "paper"): PAPER_TEACHER_LEARNING,
    ("contrast", "desk"): DESK_CONTRASTIVE,
    ("contrast", "paper"): PAPER_CONTRASTIVE,
}

log = logging.getLogger("altalign")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- argument types ----------------------------------------------------

def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _langs(text: str) -> tuple[str, ...]:
    langs = tuple(x.strip() for x in text.split(",") if x.strip())
    if not langs or len(set(langs)) != len(langs):
        raise argparse.ArgumentTypeError("need a comma-separated list of distinct language codes")
    return langs


def _mixture(text: str) -> MixtureSpec:
    try:
        return MixtureSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad mixture {text!r}: {exc}") from None


def _rows(text: str) -> tuple[int, ...]:
    try:
        rows = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("rows are comma-separated row numbers") from None
    if not rows or any(r < 1 or r > len(DEFAULT_ROWS) for r in rows):
        raise argparse.ArgumentTypeError(f"row numbers must be in 1..{len(DEFAULT_ROWS)}")
    return rows


# -- helpers -----------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(paths: Sequence[Path]) -> dict[str, str]:
    return {str(p): _sha256(p) for p in paths if p.is_file()}


def _append_manifest(out: Path, command: str, args: argparse.Namespace, seed,
                     inputs: Sequence[Path], outputs: Sequence[Path]) -> None:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
             if k not in ("func", "command")}
    flags = json.loads(json.dumps(flags, default=str))
    rec = {"command": command, "flags": flags, "seed": seed,
           "inputs": _hashes(inputs), "outputs": _hashes(outputs)}
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_manifest.jsonl", "a", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n")


def _resolve(data: Path, key: str) -> Path:
    """A data flag may name a file or a generated corpus directory."""
    if data.is_dir():
        return data / FILES[key]
    if not data.exists():
        raise FileNotFoundError(f"no such file or directory: {data}")
    return data


def _stage_config(args, stage: str, path: Path | None) -> StageConfig:
    config = StageConfig.load(path) if path is not None else PRESETS[(stage, "desk")]
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _corpus_langs(data_dir: Path) -> tuple[str, ...] | None:
    manifest = data_dir / "manifest.json"
    if not manifest.is_file():
        return None
    with open(manifest, encoding="utf-8") as fh:
        return tuple(json.load(fh)["config"]["langs"])


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


# -- commands ----------------------------------------------------------

def cmd_gen_synth(args) -> int:
    config = SynthConfig(seed=args.seed, concepts=args.concepts, langs=args.langs, dim=args.dim)
    out = args.out_dir
    manifest = write_corpus(gen_synthetic_corpus(config), out)
    outputs = [out / name for name in manifest["files"].values()] + [out / "manifest.json"]
    _append_manifest(out, "gen-synth", args, args.seed, [], outputs)
    print(f"wrote {len(outputs)} files to {out}")
    return EXIT_OK


def cmd_init(args) -> int:
    vocab = Vocab.load(args.vocab)
    rng = np.random.default_rng(args.seed)
    teacher = TextEncoder(TextEncoderConfig(layers=args.layers, model_dim=args.dim, heads=args.heads,
                                            ffn_dim=2 * args.dim, max_len=args.max_len,
                                            vocab_size=len(vocab), pooling="TOS"), rng=rng)
    student = TextEncoder(default_student_config(len(vocab), args.dim, args.max_len), rng=rng)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(EncoderBundle(vocab, teacher, student), out / "init.ckpt")
    _append_manifest(out, "init", args, args.seed, [args.vocab], [out / "init.ckpt"])
    print(f"wrote {out / 'init.ckpt'}")
    return EXIT_OK


def _train(args, stage: str) -> int:
    data = _resolve(args.data, "parallel" if stage == "distill" else "text_image")
    init = args.init_checkpoint
    if init is None:
        if not args.data.is_dir():
            raise UsageError("--init-checkpoint is required unless --data is a corpus directory")
        init = args.data / FILES["init_checkpoint"]
    config = _stage_config(args, stage, args.config)
    bundle = load_checkpoint(init)
    mixture = None
    if stage == "distill":
        pairs = load_parallel_pairs(data)
        mixture = args.mixture
    else:
        pairs = load_text_image_pairs(data, dim=bundle.joint_dim)
        if args.aesthetic_threshold is not None:
            pairs = filter_by_aesthetic(pairs, args.aesthetic_threshold)
    out = args.out
    try:
        result = run_stage(stage, config, pairs, bundle, out, mixture=mixture)
    finally:
        inputs = [p for p in (args.config, data, init) if p is not None]
        outputs = [out / "loss_log.jsonl", out / "final.ckpt"]
        _append_manifest(out, stage, args, config.seed, inputs, outputs)
    final = result.log[-1]["loss"] if result.log else float("nan")
    print(f"{stage}: {len(result.log)} steps, final loss {final:.6f}, checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_distill(args) -> int:
    return _train(args, "distill")


def cmd_contrast(args) -> int:
    return _train(args, "contrast")


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    encode = bundle.embed_texts
    name = args.name or (args.data.stem if args.data.is_file() else args.data.name)
    if args.task == "classify":
        path = _resolve(args.data, "classification")
        dataset = load_classification(path)
        langs = [args.lang] if args.lang else sorted(dataset.class_names)
        reports = {lang: evaluate_classification(dataset, lang, encode) for lang in langs}
        table = classification_table({f"{name}_{lang.upper()}": r for lang, r in reports.items()})
        results = {lang: r.to_dict() for lang, r in reports.items()}
    else:
        path = _resolve(args.data, "retrieval")
        pairs = load_text_image_pairs(path)
        if args.task == "retrieval":
            langs = [args.lang] if args.lang else sorted({p.lang for p in pairs})
            reports = {lang: evaluate_retrieval(pairs, encode, lang) for lang in langs}
            table = retrieval_table({f"{name}_{lang.upper()}": r for lang, r in reports.items()})
            results = {lang: r.to_dict() for lang, r in reports.items()}
        else:
            report = multilingual_retrieval_eval(pairs, encode, [args.lang] if args.lang else None)
            table = multilingual_table(report)
            results = {"multilingual": report.to_dict()}
    doc = {"task": args.task, "dataset": name, "results": results}
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", doc)
    _write_text(out / "report.txt", table)
    _append_manifest(out, "eval", args, None, [args.checkpoint, path],
                     [out / "report.json", out / "report.txt"])
    print(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) if args.format == "json" else table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    data_dir = args.data
    if not data_dir.is_dir():
        raise FileNotFoundError(f"--data must be a corpus directory: {data_dir}")
    langs = args.langs or _corpus_langs(data_dir)
    if not langs or len(langs) < 2:
        raise UsageError("need a source and a target language (--langs en,zh)")
    src, tgt = langs[0], langs[1]
    init = args.init_checkpoint or data_dir / FILES["init_checkpoint"]
    stage1 = _stage_config(args, "distill", args.config)
    stage2 = _stage_config(args, "contrast", args.contrast_config)
    bundle = load_checkpoint(init)
    inputs = [data_dir / FILES[k] for k in ("parallel", "text_image", "retrieval", "classification")]
    parallel = load_parallel_pairs(inputs[0])
    text_image = load_text_image_pairs(inputs[1], dim=bundle.joint_dim)
    retrieval = load_text_image_pairs(inputs[2])
    classification = load_classification(inputs[3])
    rows = [DEFAULT_ROWS[i - 1] for i in (args.rows or range(1, len(DEFAULT_ROWS) + 1))]
    out = args.out
    results = run_ablation(bundle, parallel, text_image, retrieval, classification, stage1, stage2,
                           src, tgt, rows, out_dir=out if args.keep_runs else None)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"src_lang": src, "tgt_lang": tgt, "rows": [r.to_dict() for r in results]}
    table = ablation_table(results, src, tgt)
    _write_json(out / "ablation.json", doc)
    _write_text(out / "ablation.txt", table)
    _append_manifest(out, "ablate", args, stage1.seed, inputs + [init] + [p for p in (args.config, args.contrast_config) if p],
                     [out / "ablation.json", out / "ablation.txt"])
    print(json.dumps(doc, indent=2, sort_keys=True) if args.format == "json" else table)
    return EXIT_OK


def cmd_write_config(args) -> int:
    config = PRESETS[(args.stage, args.preset)]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    config.save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="altalign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a deterministic synthetic corpus")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--concepts", type=_positive_int, default=10)
    g.add_argument("--langs", type=_langs, default=("en", "zh"))
    g.add_argument("--dim", type=_positive_int, default=32)
    g.add_argument("--out-dir", type=Path, required=True)
    g.set_defaults(func=cmd_gen_synth)

    i = sub.add_parser("init", help="random transformer teacher + fresh student from a vocabulary")
    i.add_argument("--vocab", type=Path, required=True)
    i.add_argument("--dim", type=_positive_int, default=32)
    i.add_argument("--layers", type=_positive_int, default=2)
    i.add_argument("--heads", type=_positive_int, default=4)
    i.add_argument("--max-len", type=_positive_int, default=8)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", type=Path, required=True)
    i.set_defaults(func=cmd_init)

    for stage, helptext in (("distill", "stage 1: MSE teacher learning on parallel text"),
                            ("contrast", "stage 2: contrastive tuning against frozen image embeddings")):
        s = sub.add_parser(stage, help=helptext)
        s.add_argument("--config", type=Path, help="stage config JSON (default: desk preset)")
        s.add_argument("--data", type=Path, required=True, help="data file or corpus directory")
        s.add_argument("--init-checkpoint", type=Path, required=(stage == "contrast"))
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--seed", type=int, help="overrides the config seed")
        if stage == "distill":
            s.add_argument("--mixture", type=_mixture, default=None,
                           help="enabled provenance classes, e.g. SAME,MT or SAME:1,MT:0.5")
        else:
            s.add_argument("--aesthetic-threshold", type=float, default=None)
        s.set_defaults(func=cmd_distill if stage == "distill" else cmd_contrast)

    e = sub.add_parser("eval", help="retrieval, zero-shot classification or multilingual retrieval")
    e.add_argument("--task", choices=("retrieval", "classify", "multilingual"), required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--lang")
    e.add_argument("--name", help="dataset label in the table (default: file stem)")
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--format", choices=("json", "table"), default="table")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the data-mixture ablation rows")
    a.add_argument("--data", type=Path, required=True, help="corpus directory from gen-synth")
    a.add_argument("--config", type=Path, help="stage-1 config JSON")
    a.add_argument("--contrast-config", type=Path, help="stage-2 config JSON")
    a.add_argument("--init-checkpoint", type=Path)
    a.add_argument("--langs", type=_langs, help="source,target (default: from the corpus manifest)")
    a.add_argument("--rows", type=_rows, help="subset of rows 1-5")
    a.add_argument("--seed", type=int)
    a.add_argument("--keep-runs", action="store_true", help="keep per-row checkpoints and loss logs")
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--format", choices=("json", "table"), default="table")
    a.set_defaults(func=cmd_ablate)

    w = sub.add_parser("write-config", help="write a preset stage config as JSON")
    w.add_argument("--stage", choices=("distill", "contrast"), required=True)
    w.add_argument("--preset", choices=("desk", "paper"), default="desk")
    w.add_argument("--out", type=Path, required=True)
    w.set_defaults(func=cmd_write_config)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"altalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"altalign: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, CheckpointError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"altalign: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
