"""Test-set metrics: SI-SDR, SI-SDR improvement, extraction accuracy, and
scorer-based speaker similarity, aggregated into a report.

Every manifest mixture is evaluated twice, once per enrollment side.  The
similarity scorer is the pretrained reference encoder, never the system
under evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CorpusStore
from .losses import sdr, si_sdr, si_sdr_raw, speaker_similarity
from .model import EmbeddingPair, ModelConfig, encode_speaker, separate
from .util import fmt17

REPORT_VERSION = "1"

ROW_COLUMNS = ["mixture_id", "target_speaker", "si_sdr_db", "si_sdri_db",
               "success", "similarity", "sdr_db"]
SUMMARY_KEYS = ["SI_SDR", "SI_SDRi", "Acc", "Sim", "SDR"]

SUCCESS_THRESHOLD_DB = 1.0


@dataclass
class MetricRow:
    mixture_id: str
    target_speaker: int
    si_sdr_db: float
    si_sdri_db: float
    success: bool
    similarity: float
    sdr_db: float


@dataclass
class EvalReport:
    rows: list[MetricRow]
    config_hash: str = ""
    corpus_hash: str = ""
    checkpoint_epoch: int = -1

    def aggregates(self) -> dict[str, float]:
        n = len(self.rows)
        if n == 0:
            raise ValueError("empty report")
        return {
            "SI_SDR": sum(r.si_sdr_db for r in self.rows) / n,
            "SI_SDRi": sum(r.si_sdri_db for r in self.rows) / n,
            "Acc": 100.0 * sum(r.success for r in self.rows) / n,
            "Sim": 100.0 * sum(r.similarity for r in self.rows) / n,
            "SDR": sum(r.sdr_db for r in self.rows) / n,
        }


def si_sdri(est: np.ndarray, mix: np.ndarray, ref: np.ndarray) -> float:
    """SI-SDR improvement of the estimate over the unprocessed mixture.

    Both terms are evaluated unclamped; the difference is reported as is.
    """
    return float(si_sdr_raw(est, ref) - si_sdr_raw(mix, ref))


def extraction_accuracy(si_sdri_values) -> float:
    """Fraction of rows with improvement strictly above 1 dB."""
    vals = list(si_sdri_values)
    if not vals:
        raise ValueError("no rows")
    return sum(v > SUCCESS_THRESHOLD_DB for v in vals) / len(vals)


def similarity_score(est, target, scorer_params: dict[str, np.ndarray],
                     cfg: ModelConfig) -> float:
    """Cosine of the scorer's unit embeddings of estimate and clean target."""
    e_est = encode_speaker(est, scorer_params, cfg).unit
    e_ref = encode_speaker(target, scorer_params, cfg).unit
    return speaker_similarity(e_ref, e_est)


def evaluate(params: dict[str, np.ndarray], store: CorpusStore,
             scorer_params: dict[str, np.ndarray], cfg: ModelConfig,
             split: str = "test", unit_mask: bool = False,
             config_hash: str = "", checkpoint_epoch: int = -1) -> EvalReport:
    """Evaluate a parameter set over both enrollment sides of every mixture.

    The cue embedding comes from the evaluated parameters' own encoder; in
    frozen-encoder training those are the pretrained weights carried in the
    checkpoint.  With unit_mask=True the separator is bypassed by an
    all-ones mask (estimate == mixture up to reconstruction error).
    """
    rows: list[MetricRow] = []
    for rec in store.manifest.split_mixtures(split):
        for side in (0, 1):
            sample = store.sample(rec, side)
            cue = encode_speaker(sample.enrollment, params, cfg)
            est = separate(sample.mixture, cue, params, cfg, unit_mask=unit_mask)
            ref = sample.target.samples
            improvement = si_sdri(est.samples, sample.mixture.samples, ref)
            rows.append(MetricRow(
                mixture_id=rec.mix_id,
                target_speaker=sample.target_speaker,
                si_sdr_db=si_sdr(est.samples, ref),
                si_sdri_db=improvement,
                success=improvement > SUCCESS_THRESHOLD_DB,
                similarity=similarity_score(est, sample.target, scorer_params, cfg),
                sdr_db=sdr(est.samples, ref),
            ))
    return EvalReport(rows, config_hash, store.manifest.corpus_hash,
                      checkpoint_epoch)


def save_report(report: EvalReport, path) -> None:
    agg = report.aggregates()
    lines = [f"report v{REPORT_VERSION} config_hash={report.config_hash} "
             f"corpus_hash={report.corpus_hash} epoch={report.checkpoint_epoch} "
             f"rows={len(report.rows)}"]
    for key in SUMMARY_KEYS:
        lines.append(f"{key}={fmt17(agg[key])}")
    lines.append(",".join(ROW_COLUMNS))
    for r in report.rows:
        lines.append(",".join([
            r.mixture_id, str(r.target_speaker), fmt17(r.si_sdr_db),
            fmt17(r.si_sdri_db), str(int(r.success)), fmt17(r.similarity),
            fmt17(r.sdr_db)]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_report(path) -> EvalReport:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(f"report v{REPORT_VERSION} "):
        raise ValueError(f"{path}: not a v{REPORT_VERSION} report")
    header = dict(f.split("=", 1) for f in lines[0].split()[2:])
    i = 1
    while i < len(lines) and "=" in lines[i] and "," not in lines[i]:
        i += 1                              # summary block is recomputable
    if i >= len(lines) or lines[i] != ",".join(ROW_COLUMNS):
        raise ValueError(f"{path}: missing row header")
    rows = []
    for line in lines[i + 1:]:
        f = line.split(",")
        rows.append(MetricRow(f[0], int(f[1]), float(f[2]), float(f[3]),
                              bool(int(f[4])), float(f[5]), float(f[6])))
    return EvalReport(rows, header.get("config_hash", ""),
                      header.get("corpus_hash", ""), int(header.get("epoch", -1)))
