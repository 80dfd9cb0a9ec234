"""Optimization loop: Adam, learning-rate decay, frozen/joint encoder modes,
epoch-level centroid refresh, checkpointing, and last-K checkpoint averaging.

Everything is deterministic per seed: batch order, enrollment draws, and
segment crops come from counter-derived generators, and all artifacts are
written with 17-significant-digit floats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from .audio import Waveform
from .corpus import CorpusStore, MixtureRecord
from .losses import (CentroidBank, GateSchedule, LossBreakdown, LossWeights,
                     build_centroid_bank, centroid_loss, centroid_loss_nodes,
                     consistency_loss, consistency_loss_nodes, ce_loss_nodes,
                     gate_open, gated_combined_loss, si_sdr_loss_nodes,
                     threshold_at)
from .model import (EmbeddingPair, ModelConfig, bind_params, classify_logits,
                    encode_frames, encode_speaker, feature_node, frame_features,
                    init_params, encoder_param_names, separator_param_names,
                    separate_batch, stft_kernel)
from .audio import stft_node
from .util import config_hash, fmt17, params_fingerprint, rng_for

CHECKPOINT_VERSION = "1"

LOG_COLUMNS = ["step", "epoch", "lr", "threshold", "gate_open_fraction",
               "si_sdr_loss", "ce_loss", "consistency_loss", "similarity_mean",
               "total"]


class TrainingError(Exception):
    """Non-finite values or broken training invariants."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    segment_seconds: float = 2.0
    lr_start: float = 1e-3
    lr_end: float = 2.5e-5
    encoder_mode: str = "frozen"        # frozen | joint
    consistency: str = "none"           # none | sc | centroid
    gate_enabled: bool = False
    gate_start: float = 1.0
    gate_end: float = 0.8
    seed: int = 0
    batch_size: int = 8
    checkpoint_avg: int = 5
    grad_clip: float = 5.0
    ce_weight: float = -1.0             # < 0: resolve from encoder_mode
    consistency_weight: float = -1.0    # < 0: resolve from consistency

    def __post_init__(self):
        if self.encoder_mode not in ("frozen", "joint"):
            raise ValueError(f"unknown encoder_mode {self.encoder_mode!r}")
        if self.consistency not in ("none", "sc", "centroid"):
            raise ValueError(f"unknown consistency mode {self.consistency!r}")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.epochs <= 0 or self.batch_size <= 0 or self.checkpoint_avg <= 0:
            raise ValueError("epochs, batch_size, checkpoint_avg must be positive")

    def weights(self) -> LossWeights:
        ce = self.ce_weight
        if ce < 0:
            ce = 0.0 if self.encoder_mode == "frozen" else 0.1
        cons = self.consistency_weight
        if cons < 0:
            cons = 0.1 if self.consistency != "none" else 0.0
        if self.encoder_mode == "frozen" and ce != 0.0:
            raise ValueError("frozen encoder requires ce_weight == 0")
        return LossWeights(ce_weight=ce, consistency_weight=cons)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Geometric decay from lr_start to lr_end with exact endpoints."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch == 0 or cfg.epochs == 1:
        return cfg.lr_start
    if epoch == cfg.epochs - 1:
        return cfg.lr_end
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


# ---------------------------------------------------------------------------
# Adam

class AdamState:
    """Per-parameter first/second moments with bias-corrected updates."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place (sorted name order)."""
    for name in grads:
        if grads[name].shape != params[name].shape:
            raise TrainingError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in sorted(grads):
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        params[name] = params[name] - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients to a global L2 norm of at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items())))
    if total > max_norm > 0:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor
    return total


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    epoch: int
    rng_state: str
    config_hash: str = ""
    corpus_hash: str = ""


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    lines = [f"checkpoint v{CHECKPOINT_VERSION} epoch={ckpt.epoch} "
             f"config_hash={ckpt.config_hash} corpus_hash={ckpt.corpus_hash} "
             f"rng={ckpt.rng_state}"]
    lines.append("config " + json.dumps(ckpt.config, sort_keys=True))
    for name in sorted(ckpt.params):
        a = ckpt.params[name]
        shape = ",".join(str(s) for s in a.shape)
        vals = " ".join(fmt17(v) for v in a.reshape(-1))
        lines.append(f"param {name} {shape} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> Checkpoint:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(f"checkpoint v{CHECKPOINT_VERSION} "):
        raise ValueError(f"{path}: not a v{CHECKPOINT_VERSION} checkpoint")
    header = dict(f.split("=", 1) for f in lines[0].split()[2:])
    config = {}
    params: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "config":
            config = json.loads(rest)
        elif kind == "param":
            name, shape_s, vals = rest.split(" ", 2)
            shape = tuple(int(s) for s in shape_s.split(","))
            params[name] = np.array(vals.split(), dtype=np.float64).reshape(shape)
        else:
            raise ValueError(f"{path}: unknown record kind {kind!r}")
    return Checkpoint(params, config, int(header["epoch"]), header.get("rng", ""),
                      header.get("config_hash", ""), header.get("corpus_hash", ""))


def average_checkpoints(ckpts: list[Checkpoint]) -> Checkpoint:
    """Element-wise arithmetic mean of the parameter tensors."""
    if not ckpts:
        raise ValueError("no checkpoints to average")
    names = sorted(ckpts[0].params)
    for c in ckpts[1:]:
        if sorted(c.params) != names:
            raise ValueError("checkpoints have different parameter sets")
    avg = {}
    for name in names:
        stack = [c.params[name] for c in ckpts]
        for a in stack[1:]:
            if a.shape != stack[0].shape:
                raise ValueError(f"shape mismatch for {name}")
        avg[name] = np.mean(stack, axis=0)
    last = ckpts[-1]
    return Checkpoint(avg, last.config, last.epoch, last.rng_state,
                      last.config_hash, last.corpus_hash)


# ---------------------------------------------------------------------------
# batch preparation

@dataclass
class Batch:
    mixtures: np.ndarray                     # (B, N)
    targets: np.ndarray                      # (B, N)
    target_speakers: list[int]
    class_indices: list[int] | None          # positions in the train roster
    enroll_units: np.ndarray | None          # (B, E) frozen-mode cue embeddings
    enroll_feats: np.ndarray | None          # (B, T, bins) joint-mode features
    sample_ids: list[str]


def _crop_or_pad(x: np.ndarray, length: int, offset: int) -> np.ndarray:
    if x.size >= length:
        return x[offset:offset + length]
    out = np.zeros(length)
    out[: x.size] = x
    return out


def prepare_batch(store: CorpusStore, items: list[tuple[MixtureRecord, int, str, int]],
                  cfg: TrainConfig, model_cfg: ModelConfig,
                  cue_encoder: dict[str, np.ndarray] | None,
                  embedding_cache: dict[str, np.ndarray] | None = None) -> Batch:
    """Materialize (record, side, enrollment id, crop seed) items into arrays.

    In frozen mode the cue embeddings are computed here with `cue_encoder`;
    in joint mode enrollment features are cropped to one second so the batch
    stays rectangular and the encoder runs on the tape.
    """
    rate = None
    seg = None
    mixes, targets, speakers, ids = [], [], [], []
    units, feats = [], []
    roster = store.manifest.split_speakers("train")
    class_indices: list[int] = []
    for rec, side, enroll_id, crop_seed in items:
        sample = store.sample(rec, side, enroll_id)
        rate = sample.mixture.sample_rate
        seg = int(round(cfg.segment_seconds * rate))
        rng = rng_for(cfg.seed, "crop", crop_seed)
        n = len(sample.mixture)
        offset = int(rng.integers(n - seg + 1)) if n > seg else 0
        mixes.append(_crop_or_pad(sample.mixture.samples, seg, offset))
        targets.append(_crop_or_pad(sample.target.samples, seg, offset))
        speakers.append(sample.target_speaker)
        ids.append(f"{rec.mix_id}:{side}")
        if sample.target_speaker in roster:
            class_indices.append(roster.index(sample.target_speaker))
        else:
            class_indices.append(-1)
        if cfg.encoder_mode == "frozen":
            if embedding_cache is not None and enroll_id in embedding_cache:
                units.append(embedding_cache[enroll_id])
            else:
                u = encode_speaker(sample.enrollment, cue_encoder, model_cfg).unit
                if embedding_cache is not None:
                    embedding_cache[enroll_id] = u
                units.append(u)
        else:
            e = sample.enrollment.samples
            er = rng_for(cfg.seed, "enrollcrop", crop_seed)
            one_sec = rate
            off = int(er.integers(e.size - one_sec + 1)) if e.size > one_sec else 0
            cropped = _crop_or_pad(e, one_sec, off)
            feats.append(frame_features(stft_kernel(cropped[None, :],
                                                    model_cfg.stft))[0])
    return Batch(np.stack(mixes), np.stack(targets), speakers,
                 class_indices if cfg.encoder_mode == "joint" else None,
                 np.stack(units) if units else None,
                 np.stack(feats) if feats else None, ids)


# ---------------------------------------------------------------------------
# one optimization step

@dataclass
class StepGraph:
    """A built objective tape plus the detached per-sample diagnostics."""

    tape: dg.Tape
    total: dg.Node
    si_vec: dg.Node
    ce_vec: dg.Node | None
    cons_values: np.ndarray
    similarities: np.ndarray
    gates: list[bool]


def build_step_graph(batch: Batch, params: dict[str, np.ndarray],
                     cfg: TrainConfig, model_cfg: ModelConfig, global_step: int,
                     sched: GateSchedule,
                     bank: CentroidBank | None = None) -> StepGraph:
    """Construct the composite objective for one batch.

    The consistency term is attached per sample, and only for samples whose
    gate is open; suppressed samples leave no trace on the loss graph, so a
    fully suppressed step matches a consistency-free step bit for bit.  The
    gate decision itself uses detached similarities (control flow, not
    taped), which keeps the recorded graph differentiable as built.
    """
    weights = cfg.weights()
    if cfg.consistency == "centroid" and weights.consistency_weight > 0 and bank is None:
        raise TrainingError("centroid consistency requires a centroid bank")
    B = batch.mixtures.shape[0]
    tape = dg.Tape()
    trainable = set(separator_param_names(params))
    if cfg.encoder_mode == "joint":
        trainable |= set(encoder_param_names(params))
    bound = bind_params(tape, params, trainable)

    if cfg.encoder_mode == "frozen":
        cue = tape.const(batch.enroll_units)
        enroll_pair = None
    else:
        enroll_pair = encode_frames(tape, tape.const(batch.enroll_feats), bound,
                                    model_cfg)
        cue = enroll_pair.unit

    est = separate_batch(tape, batch.mixtures, cue, bound, model_cfg)
    si_vec = si_sdr_loss_nodes(tape, est, batch.targets)

    est_pair = encode_frames(tape, feature_node(stft_node(est, model_cfg.stft)),
                             bound, model_cfg)
    est_units_np = est_pair.unit.value
    cue_np = cue.value
    sims = np.clip(np.sum(cue_np * est_units_np, axis=1), -1.0, 1.0)

    ce_vec = None
    if weights.ce_weight > 0.0:
        if batch.class_indices is None or min(batch.class_indices) < 0:
            raise TrainingError("classifier targets unavailable for CE loss")
        logits = classify_logits(enroll_pair, bound)
        ce_vec = ce_loss_nodes(logits, batch.class_indices)

    # detached per-sample values for the breakdown (computed in every mode)
    cons_values = np.zeros(B)
    if cfg.consistency == "sc":
        for i in range(B):
            cons_values[i] = consistency_loss(cue_np[i], est_units_np[i])
    elif cfg.consistency == "centroid" and bank is not None:
        for i in range(B):
            cons_values[i] = centroid_loss(est_units_np[i], bank,
                                           batch.target_speakers[i])

    thr = threshold_at(min(global_step, sched.total_steps), sched)
    gates = [gate_open(float(s), thr) if sched.enabled else True for s in sims]

    total = dg.scale(dg.mean(si_vec), weights.si_sdr_weight)
    if ce_vec is not None:
        total = dg.add(total, dg.scale(dg.mean(ce_vec), weights.ce_weight))
    if cfg.consistency != "none" and weights.consistency_weight > 0.0:
        w = weights.consistency_weight / B
        for i in range(B):
            if not gates[i]:
                continue
            row = dg.slice_axis(est_pair.unit, 0, i, i + 1)
            if cfg.consistency == "sc":
                cue_row = dg.slice_axis(cue, 0, i, i + 1)
                term = dg.sum_(consistency_loss_nodes(cue_row, row))
            else:
                term = dg.sum_(centroid_loss_nodes(
                    tape, row, bank, [batch.target_speakers[i]]))
            total = dg.add(total, dg.scale(term, w))
    return StepGraph(tape, total, si_vec, ce_vec, cons_values, sims, gates)


def train_step(batch: Batch, params: dict[str, np.ndarray], adam: AdamState,
               cfg: TrainConfig, model_cfg: ModelConfig, lr: float,
               global_step: int, sched: GateSchedule,
               bank: CentroidBank | None = None) -> list[LossBreakdown]:
    """Forward, backward, clip, and Adam-update one batch."""
    g = build_step_graph(batch, params, cfg, model_cfg, global_step, sched, bank)
    B = batch.mixtures.shape[0]
    if not np.isfinite(float(g.total.value)):
        bad = [batch.sample_ids[i] for i in range(B)
               if not np.isfinite(g.si_vec.value[i])]
        raise TrainingError(f"non-finite loss (samples {bad or batch.sample_ids})")

    grads = dg.backward(g.tape, g.total)
    clip_gradients(grads, cfg.grad_clip)
    adam_step(params, grads, adam, lr)

    weights = cfg.weights()
    breakdowns = []
    for i in range(B):
        b = gated_combined_loss(float(g.si_vec.value[i]),
                                float(g.ce_vec.value[i]) if g.ce_vec is not None else 0.0,
                                float(g.cons_values[i]), float(g.similarities[i]),
                                weights, sched, min(global_step, sched.total_steps))
        breakdowns.append(b)
    return breakdowns


# ---------------------------------------------------------------------------
# full runs

def _train_utterances_by_speaker(store: CorpusStore) -> dict[int, list[Waveform]]:
    out: dict[int, list[Waveform]] = {}
    for spk in store.manifest.split_speakers("train"):
        out[spk] = [store.waveform(u)
                    for u in store.manifest.speaker_utterances(spk, "train")]
    return out


def make_bank(params: dict[str, np.ndarray], store: CorpusStore,
              model_cfg: ModelConfig) -> CentroidBank:
    return build_centroid_bank(params, _train_utterances_by_speaker(store), model_cfg)


def train_run(store: CorpusStore, cfg: TrainConfig, model_cfg: ModelConfig,
              out_dir, pretrained: dict[str, np.ndarray] | None = None,
              bank: CentroidBank | None = None, verbose: bool = False,
              run_config_hash: str = "") -> list[Path]:
    """Train per the config; writes one checkpoint per epoch plus a log CSV.

    Frozen mode requires `pretrained` encoder parameters (they also provide
    the centroid bank unless one is passed in).  Joint+centroid mode
    rebuilds the bank from the current encoder at each epoch start.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = cfg.weights()
    if cfg.encoder_mode == "frozen" and pretrained is None:
        raise TrainingError("frozen mode requires pretrained encoder parameters")

    params = init_params(cfg.seed, model_cfg)
    if cfg.encoder_mode == "frozen":
        for name in encoder_param_names(pretrained):
            params[name] = pretrained[name].copy()
        frozen_fp = params_fingerprint(
            {n: params[n] for n in encoder_param_names(params)})

    if (cfg.consistency == "centroid" and bank is None
            and cfg.encoder_mode == "frozen"):
        bank = make_bank(pretrained, store, model_cfg)

    samples = [(rec, side) for rec in store.manifest.split_mixtures("train")
               for side in (0, 1)]
    samples.sort(key=lambda rs: (rs[0].mix_id, rs[1]))
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    sched = GateSchedule(cfg.gate_start, cfg.gate_end,
                         max(1, cfg.epochs * steps_per_epoch), cfg.gate_enabled)

    adam = AdamState()
    emb_cache: dict[str, np.ndarray] = {}
    log_rows: list[dict] = []
    ckpt_paths: list[Path] = []
    if not run_config_hash:
        run_config_hash = config_hash({"train": cfg.to_dict(),
                                       "corpus": store.manifest.corpus_hash})
    global_step = 0
    for epoch in range(cfg.epochs):
        if cfg.consistency == "centroid" and cfg.encoder_mode == "joint":
            bank = make_bank(params, store, model_cfg)    # refreshed per epoch
        lr = lr_at(epoch, cfg)
        rng = rng_for(cfg.seed, "epoch", epoch)
        order = rng.permutation(len(samples))
        items = []
        for pos in order:
            rec, side = samples[pos]
            pool = store.enrollment_pool(rec, side)
            enroll_id = pool[int(rng.integers(len(pool)))]
            items.append((rec, side, enroll_id, f"{epoch}:{rec.mix_id}:{side}"))
        for start in range(0, len(items), cfg.batch_size):
            chunk = items[start:start + cfg.batch_size]
            batch = prepare_batch(store, chunk, cfg, model_cfg, pretrained,
                                  emb_cache if cfg.encoder_mode == "frozen" else None)
            breakdowns = train_step(batch, params, adam, cfg, model_cfg, lr,
                                    global_step, sched, bank)
            n = len(breakdowns)
            gated_cons = sum(b.consistency_loss for b in breakdowns if b.gate_open) / n
            log_rows.append({
                "step": global_step,
                "epoch": epoch,
                "lr": lr,
                "threshold": breakdowns[0].threshold,
                "gate_open_fraction": sum(b.gate_open for b in breakdowns) / n,
                "si_sdr_loss": sum(b.si_sdr_loss for b in breakdowns) / n,
                "ce_loss": sum(b.ce_loss for b in breakdowns) / n,
                "consistency_loss": gated_cons,
                "similarity_mean": sum(b.similarity for b in breakdowns) / n,
                "total": sum(b.total for b in breakdowns) / n,
            })
            global_step += 1
        if cfg.encoder_mode == "frozen":
            now = params_fingerprint({n: params[n] for n in encoder_param_names(params)})
            if now != frozen_fp:
                raise TrainingError("frozen encoder parameters changed")
        ckpt = Checkpoint(dict(params), cfg.to_dict(), epoch,
                          f"seed{cfg.seed}.epoch{epoch}", run_config_hash,
                          store.manifest.corpus_hash)
        path = out_dir / f"checkpoint_epoch{epoch:03d}.txt"
        save_checkpoint(ckpt, path)
        ckpt_paths.append(path)
        if verbose:
            row = log_rows[-1]
            print(f"epoch {epoch}: lr={lr:.2e} total={row['total']:.3f} "
                  f"si_sdr_loss={row['si_sdr_loss']:.3f}")
    write_log(log_rows, out_dir / "training_log.csv")
    return ckpt_paths


def write_log(rows: list[dict], path) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            str(row[c]) if c in ("step", "epoch") else fmt17(row[c])
            for c in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# encoder pretraining

@dataclass(frozen=True)
class PretrainConfig:
    max_epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    target_accuracy: float = 0.95
    min_accuracy: float = 0.60
    crop_seconds: float = 1.0
    grad_clip: float = 5.0
    seed: int = 0


def classifier_accuracy(params: dict[str, np.ndarray], store: CorpusStore,
                        model_cfg: ModelConfig) -> float:
    """Fraction of full train-split utterances classified as their speaker."""
    roster = store.manifest.split_speakers("train")
    correct = 0
    total = 0
    for spk in roster:
        for utt in store.manifest.speaker_utterances(spk, "train"):
            pair = encode_speaker(store.waveform(utt), params, model_cfg)
            logits = pair.pre_norm @ params["enc.cls.w"] + params["enc.cls.b"]
            correct += int(np.argmax(logits) == roster.index(spk))
            total += 1
    return correct / total


def pretrain_encoder(store: CorpusStore, model_cfg: ModelConfig,
                     cfg: PretrainConfig = PretrainConfig(),
                     verbose: bool = False) -> tuple[dict[str, np.ndarray], float, int]:
    """Train encoder+classifier with CE on single-speaker utterances.

    Stops once full-utterance train accuracy reaches the target (or at the
    epoch cap); raises if the cap is hit below the minimum accuracy.
    Returns (parameters, final accuracy, epochs used).
    """
    roster = store.manifest.split_speakers("train")
    utts = []
    for spk in roster:
        for u in store.manifest.speaker_utterances(spk, "train"):
            utts.append((u, roster.index(spk)))
    utts.sort()
    if not utts:
        raise TrainingError("no train utterances available")

    params = init_params(cfg.seed, model_cfg)
    enc_names = set(encoder_param_names(params))
    adam = AdamState()
    rate = store.waveform(utts[0][0]).sample_rate
    crop = int(round(cfg.crop_seconds * rate))
    accuracy = 0.0
    epochs_used = 0
    for epoch in range(cfg.max_epochs):
        rng = rng_for(cfg.seed, "pretrain", epoch)
        order = rng.permutation(len(utts))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [utts[i] for i in order[start:start + cfg.batch_size]]
            feats, targets = [], []
            for utt_id, cls in chunk:
                x = store.waveform(utt_id).samples
                off = int(rng.integers(x.size - crop + 1)) if x.size > crop else 0
                feats.append(frame_features(
                    stft_kernel(_crop_or_pad(x, crop, off)[None, :],
                                model_cfg.stft))[0])
                targets.append(cls)
            tape = dg.Tape()
            bound = bind_params(tape, {n: params[n] for n in sorted(enc_names)},
                                trainable=enc_names)
            pair = encode_frames(tape, tape.const(np.stack(feats)), bound, model_cfg)
            loss = dg.mean(ce_loss_nodes(classify_logits(pair, bound), targets))
            if not np.isfinite(float(loss.value)):
                raise TrainingError("non-finite pretraining loss")
            grads = dg.backward(tape, loss)
            clip_gradients(grads, cfg.grad_clip)
            adam_step(params, grads, adam, cfg.lr)
        accuracy = classifier_accuracy(params, store, model_cfg)
        epochs_used = epoch + 1
        if verbose:
            print(f"pretrain epoch {epoch}: accuracy {accuracy:.3f}")
        if accuracy >= cfg.target_accuracy:
            break
    if accuracy < cfg.min_accuracy:
        raise TrainingError(
            f"pretraining stalled at {accuracy:.1%} accuracy after "
            f"{cfg.max_epochs} epochs")
    return params, accuracy, epochs_used
