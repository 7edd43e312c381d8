"""Data-mixture ablation: which parallel data feeds teacher learning, with or without contrastive tuning."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .data import ClassificationDataset, MixtureSpec, ParallelPair, Provenance, TextImagePair
from .encoders import EncoderBundle
from .evaluation import evaluate_classification, evaluate_retrieval, fmt
from .training import StageConfig, run_stage

RESULT_KEYS = ("retrieval_src", "retrieval_tgt", "classify_src", "classify_tgt")


@dataclass(frozen=True)
class Toggles:
    en_en: bool
    en_xx_mt: bool
    en_xx_ht: bool
    cl: bool

    def __post_init__(self):
        if not (self.en_en or self.en_xx_mt or self.en_xx_ht):
            raise ValueError("at least one parallel-data source must be enabled")

    def mixture(self) -> MixtureSpec:
        on = {Provenance.SAME: self.en_en, Provenance.MT: self.en_xx_mt, Provenance.HT: self.en_xx_ht}
        return MixtureSpec({p: 1.0 for p, enabled in on.items() if enabled})

    def label(self) -> str:
        parts = [name for name, on in (("EN-EN", self.en_en), ("MT", self.en_xx_mt),
                                       ("HT", self.en_xx_ht), ("CL", self.cl)) if on]
        return "+".join(parts)


# Rows in the order of the published ablation table.
DEFAULT_ROWS = (
    Toggles(True, True, True, True),
    Toggles(True, True, True, False),
    Toggles(True, True, False, False),
    Toggles(True, False, False, False),
    Toggles(False, True, False, False),
)


@dataclass
class AblationRow:
    toggles: Toggles
    results: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"toggles": asdict(self.toggles), "results": dict(self.results)}

    @classmethod
    def from_dict(cls, doc: dict) -> "AblationRow":
        row = cls(Toggles(**doc["toggles"]), {k: float(v) for k, v in doc["results"].items()})
        if set(row.results) != set(RESULT_KEYS):
            raise ValueError(f"ablation results must have keys {RESULT_KEYS}")
        return row


def run_ablation(
    bundle: EncoderBundle,
    parallel: Sequence[ParallelPair],
    text_image: Sequence[TextImagePair],
    retrieval: Sequence[TextImagePair],
    classification: ClassificationDataset,
    stage1: StageConfig,
    stage2: StageConfig,
    src_lang: str,
    tgt_lang: str,
    rows: Sequence[Toggles] = DEFAULT_ROWS,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Train and evaluate each row from the same starting bundle and seeds.

    Rows sharing a teacher-learning mixture reuse that run; since every run is
    seeded identically the result is the same as retraining.
    """
    out = Path(out_dir) if out_dir is not None else None
    stage1_cache: dict[tuple, EncoderBundle] = {}
    results = []
    for i, toggles in enumerate(rows, start=1):
        row_dir = out / f"row{i}" if out is not None else None
        key = (toggles.en_en, toggles.en_xx_mt, toggles.en_xx_ht)
        if key not in stage1_cache:
            stage1_cache[key] = run_stage(
                "distill", stage1, parallel, bundle,
                row_dir / "distill" if row_dir is not None else None, mixture=toggles.mixture(),
            ).bundle
        trained = stage1_cache[key]
        if toggles.cl:
            trained = run_stage("contrast", stage2, text_image, trained,
                                row_dir / "contrast" if row_dir is not None else None).bundle
        encode = trained.embed_texts
        results.append(AblationRow(toggles, {
            "retrieval_src": evaluate_retrieval(retrieval, encode, src_lang).mean_recall,
            "retrieval_tgt": evaluate_retrieval(retrieval, encode, tgt_lang).mean_recall,
            "classify_src": evaluate_classification(classification, src_lang, encode).accuracy,
            "classify_tgt": evaluate_classification(classification, tgt_lang, encode).accuracy,
        }))
    return results


def ablation_table(rows: Sequence[AblationRow], src_lang: str, tgt_lang: str) -> str:
    tgt = tgt_lang.upper()
    cols = ["EN-EN", f"EN-{tgt}_MT", f"EN-{tgt}_HT", "CL"]
    metrics = [f"Retrieval_{src_lang.upper()}", f"Retrieval_{tgt}",
               f"Classify_{src_lang.upper()}", f"Classify_{tgt}"]
    widths = [max(len(c), 5) for c in cols] + [max(len(m), 6) for m in metrics]
    head = " | ".join(f"{c:^{w}}" for c, w in zip(cols + metrics, widths))
    lines = [head, "-" * len(head)]
    for row in rows:
        t = row.toggles
        marks = ["x" if on else "" for on in (t.en_en, t.en_xx_mt, t.en_xx_ht, t.cl)]
        vals = [fmt(row.results[k]) for k in RESULT_KEYS]
        lines.append(" | ".join(f"{v:^{w}}" for v, w in zip(marks + vals, widths)))
    return "\n".join(lines)
