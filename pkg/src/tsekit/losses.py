"""Loss and similarity algebra for consistency-aware speaker extraction.

Includes SI-SDR (metric and differentiable loss), embedding cosine
similarity, the plain and centroid-based consistency losses, cross-entropy,
the weighted composite objective, and the similarity-gated suppression of
the consistency term with a linearly decaying threshold.

Scalar helpers operate on plain floats/arrays; *_nodes builders construct
the same quantities on a diffgraph tape for training.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from .audio import Waveform
from .model import ModelConfig, encode_speaker
from .util import fmt17, params_fingerprint

SI_SDR_EPS = 1e-12
SI_SDR_CLAMP_DB = 60.0
_LOG10 = float(np.log(10.0))

BANK_VERSION = "1"


# ---------------------------------------------------------------------------
# SI-SDR

def si_sdr_raw(est: np.ndarray, ref: np.ndarray) -> float:
    """Unclamped scale-invariant SDR in dB.

    The estimate is projected onto the reference; the ratio of projected
    energy to residual energy (stabilized by a 1e-12 floor) is returned in
    dB.  Raises on zero-energy references.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(np.sum(ref * ref))
    if ref_energy == 0.0:
        raise ValueError("reference signal has zero energy")
    alpha = float(np.sum(est * ref)) / ref_energy
    target = alpha * ref
    noise = target - est
    num = float(np.sum(target * target))
    den = float(np.sum(noise * noise)) + SI_SDR_EPS
    return 10.0 * np.log10(num / den)


def si_sdr(est: np.ndarray, ref: np.ndarray) -> float:
    """SI-SDR in dB, clamped to +-60 dB for reporting."""
    return float(np.clip(si_sdr_raw(est, ref), -SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))


def sdr(est: np.ndarray, ref: np.ndarray) -> float:
    """Plain (non-scale-invariant) SDR in dB, clamped like si_sdr."""
    ref = np.asarray(ref, dtype=np.float64)
    noise = ref - np.asarray(est, dtype=np.float64)
    val = 10.0 * np.log10(float(np.sum(ref * ref)) /
                          (float(np.sum(noise * noise)) + SI_SDR_EPS))
    return float(np.clip(val, -SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))


def si_sdr_loss_nodes(tape: dg.Tape, est: dg.Node, ref: np.ndarray) -> dg.Node:
    """Per-sample negated SI-SDR for a (B, N) estimate node; returns (B,).

    No clamp on the tape: clamping would zero the gradient.
    """
    B = ref.shape[0]
    ref_c = tape.const(ref)
    ref_energy = np.sum(ref * ref, axis=1)
    if np.any(ref_energy == 0.0):
        raise ValueError("reference signal has zero energy")
    alpha = dg.div(dg.sum_(dg.mul(est, ref_c), axis=1), tape.const(ref_energy))
    target = dg.mul(dg.reshape(alpha, (B, 1)), ref_c)
    noise = dg.sub(target, est)
    num = dg.sum_(dg.square(target), axis=1)
    den = dg.sum_(dg.square(noise), axis=1) + SI_SDR_EPS
    return dg.log(dg.div(num, den)) * (-10.0 / _LOG10)


# ---------------------------------------------------------------------------
# embedding similarity and consistency losses

def _check_unit(e: np.ndarray, name: str) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if abs(float(np.linalg.norm(e)) - 1.0) > 1e-6:
        raise ValueError(f"{name} is not unit-norm")
    return e


def speaker_similarity(ref_emb: np.ndarray, est_emb: np.ndarray) -> float:
    """Cosine of two unit embeddings, clipped into [-1, 1]."""
    ref_emb = _check_unit(ref_emb, "ref_emb")
    est_emb = _check_unit(est_emb, "est_emb")
    return float(np.clip(np.dot(ref_emb, est_emb), -1.0, 1.0))


def consistency_loss(ref_emb: np.ndarray, est_emb: np.ndarray) -> float:
    """1 - similarity; 0 when embeddings agree, 2 when opposed."""
    return 1.0 - speaker_similarity(ref_emb, est_emb)


def consistency_loss_nodes(ref_units: dg.Node, est_units: dg.Node) -> dg.Node:
    """Per-sample 1 - cosine for (B, E) unit-embedding nodes; returns (B,)."""
    return 1.0 - dg.sum_(dg.mul(ref_units, est_units), axis=1)


# ---------------------------------------------------------------------------
# centroid bank

@dataclass
class CentroidBank:
    """Per-speaker mean unit embeddings plus the encoder they came from."""

    speaker_ids: list[int]
    centroids: np.ndarray          # (N, E), raw means of unit embeddings
    fingerprint: str               # hash of the encoder parameters
    counts: list[int]              # utterances averaged per speaker

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] != len(self.speaker_ids):
            raise ValueError("centroid matrix does not match the speaker roster")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("non-finite centroid entries")
        if not self.fingerprint:
            raise ValueError("empty encoder fingerprint")

    def index_of(self, speaker_id: int) -> int:
        try:
            return self.speaker_ids.index(speaker_id)
        except ValueError:
            raise KeyError(f"speaker {speaker_id} not in centroid bank") from None

    def unit_rows(self) -> np.ndarray:
        norms = np.linalg.norm(self.centroids, axis=1, keepdims=True)
        return self.centroids / np.maximum(norms, 1e-12)


def build_centroid_bank(params: dict[str, np.ndarray],
                        utterances_by_speaker: dict[int, list[Waveform]],
                        cfg: ModelConfig) -> CentroidBank:
    """Average each speaker's utterance-level unit embeddings."""
    ids = sorted(utterances_by_speaker)
    rows, counts = [], []
    for spk in ids:
        utts = utterances_by_speaker[spk]
        if not utts:
            raise ValueError(f"speaker {spk} has no utterances")
        embs = [encode_speaker(w, params, cfg).unit for w in utts]
        rows.append(np.mean(embs, axis=0))
        counts.append(len(embs))
    enc = {n: v for n, v in params.items() if n.startswith("enc.")}
    return CentroidBank(ids, np.stack(rows), params_fingerprint(enc), counts)


def save_centroid_bank(bank: CentroidBank, path, config_hash: str = "") -> None:
    E = bank.centroids.shape[1]
    lines = [f"centroids v{BANK_VERSION} dim={E} speakers={len(bank.speaker_ids)} "
             f"fingerprint={bank.fingerprint} config_hash={config_hash}"]
    for spk, row, k in zip(bank.speaker_ids, bank.centroids, bank.counts):
        lines.append(f"{spk} {k} " + " ".join(fmt17(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_centroid_bank(path) -> CentroidBank:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(f"centroids v{BANK_VERSION} "):
        raise ValueError(f"{path}: not a v{BANK_VERSION} centroid bank")
    header = dict(f.split("=", 1) for f in lines[0].split()[2:])
    ids, counts, rows = [], [], []
    for line in lines[1:]:
        f = line.split()
        ids.append(int(f[0]))
        counts.append(int(f[1]))
        rows.append([float(x) for x in f[2:]])
    bank = CentroidBank(ids, np.array(rows), header["fingerprint"], counts)
    if bank.centroids.shape[1] != int(header["dim"]):
        raise ValueError(f"{path}: embedding dim mismatch")
    return bank


def centroid_loss(est_emb: np.ndarray, bank: CentroidBank, target_id: int) -> float:
    """Negative log-softmax over cosines to all centroids, at the target.

    The enrollment embedding is not an input; only the extracted-speech
    embedding and the (constant) bank enter.
    """
    est_emb = _check_unit(est_emb, "est_emb")
    cos = bank.unit_rows() @ est_emb
    t = bank.index_of(target_id)
    m = float(np.max(cos))
    return float(m + np.log(np.sum(np.exp(cos - m))) - cos[t])


def centroid_loss_nodes(tape: dg.Tape, est_units: dg.Node, bank: CentroidBank,
                        target_ids) -> dg.Node:
    """Per-sample centroid loss for (B, E) unit-embedding nodes; returns (B,).

    The bank enters as constant data, so centroids receive no gradient.
    """
    rows = tape.const(bank.unit_rows().T)                    # (E, N)
    cos = dg.matmul(est_units, rows)                         # (B, N)
    logp = dg.log_softmax(cos)
    idx = [bank.index_of(t) for t in target_ids]
    return -dg.gather_rows(logp, idx)


# ---------------------------------------------------------------------------
# cross-entropy

def ce_loss(logits: np.ndarray, target: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < logits.shape[-1]:
        raise ValueError(f"target {target} out of range for {logits.shape[-1]} classes")
    m = float(np.max(logits))
    return float(m + np.log(np.sum(np.exp(logits - m))) - logits[target])


def ce_loss_nodes(logits: dg.Node, targets) -> dg.Node:
    """Per-sample negative log-likelihood for (B, N) logit nodes; returns (B,)."""
    n_classes = logits.value.shape[-1]
    for t in targets:
        if not 0 <= t < n_classes:
            raise ValueError(f"target {t} out of range for {n_classes} classes")
    return -dg.gather_rows(dg.log_softmax(logits), targets)


# ---------------------------------------------------------------------------
# composite objective and gated suppression

@dataclass(frozen=True)
class LossWeights:
    """Mixing weights: SI-SDR gets 1 - ce_weight - consistency_weight."""

    ce_weight: float = 0.0
    consistency_weight: float = 0.0

    def __post_init__(self):
        for name in ("ce_weight", "consistency_weight"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.ce_weight + self.consistency_weight > 1.0:
            raise ValueError("ce_weight + consistency_weight must not exceed 1")

    @property
    def si_sdr_weight(self) -> float:
        return 1.0 - self.ce_weight - self.consistency_weight


@dataclass(frozen=True)
class GateSchedule:
    """Similarity threshold for suppressing the consistency term.

    The threshold decays linearly from start to end over total_steps; the
    term stays active while the detached similarity is <= the threshold.
    """

    start: float = 1.0
    end: float = 0.8
    total_steps: int = 1
    enabled: bool = False

    def __post_init__(self):
        if self.start < self.end:
            raise ValueError("threshold must not increase over training")
        for v in (self.start, self.end):
            if not -1.0 <= v <= 1.0:
                raise ValueError("thresholds must lie in [-1, 1]")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")


def threshold_at(step: int, sched: GateSchedule) -> float:
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    return sched.start + (sched.end - sched.start) * step / sched.total_steps


def gate_open(similarity: float, threshold: float) -> bool:
    """True while the consistency term stays active (similarity <= threshold)."""
    if not -1.0 <= similarity <= 1.0:
        raise ValueError(f"similarity {similarity} outside [-1, 1]")
    return similarity <= threshold


def suppression_gate(x: float, similarity: float, threshold: float) -> float:
    """x when the gate is open, exact 0.0 otherwise."""
    return x if gate_open(similarity, threshold) else 0.0


@dataclass
class LossBreakdown:
    """Per-sample component values, weights, and gate state for one step."""

    si_sdr_loss: float
    ce_loss: float
    consistency_loss: float
    similarity: float
    weights: LossWeights
    threshold: float = 1.0
    gate_open: bool = True
    total: float = 0.0

    def expected_total(self) -> float:
        w = self.weights
        gated = self.consistency_loss if self.gate_open else 0.0
        return (w.si_sdr_weight * self.si_sdr_loss + w.ce_weight * self.ce_loss
                + w.consistency_weight * gated)


def combined_loss(l_si_sdr: float, l_ce: float, l_consistency: float,
                  weights: LossWeights) -> LossBreakdown:
    """Weighted composite objective (no gating)."""
    b = LossBreakdown(l_si_sdr, l_ce, l_consistency, similarity=0.0,
                      weights=weights, threshold=1.0, gate_open=True)
    b.total = b.expected_total()
    return b


def gated_combined_loss(l_si_sdr: float, l_ce: float, l_consistency: float,
                        similarity: float, weights: LossWeights,
                        sched: GateSchedule, step: int) -> LossBreakdown:
    """Composite objective with the consistency term gated per sample.

    The gate compares the detached enrollment/extraction similarity against
    the scheduled threshold; when closed, the term contributes exactly zero
    (the SI-SDR and CE weights are unchanged).  With the schedule disabled
    this reduces to combined_loss for every step.
    """
    if not sched.enabled:
        b = combined_loss(l_si_sdr, l_ce, l_consistency, weights)
        b.similarity = similarity
        return b
    thr = threshold_at(step, sched)
    b = LossBreakdown(l_si_sdr, l_ce, l_consistency, similarity, weights,
                      threshold=thr, gate_open=gate_open(similarity, thr))
    b.total = b.expected_total()
    return b
