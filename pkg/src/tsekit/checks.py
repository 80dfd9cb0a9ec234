"""Gradient-checking battery: every loss alone, then the full training
objective through the separator and the re-encoded estimate.

The battery uses a shrunken model (two bands, narrow layers) so central
differences over every parameter coordinate stay fast; the op set and graph
structure are identical to the full-size configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .audio import BandPlan, StftConfig, Waveform
from .corpus import make_speaker, mixture_components, synth_utterance
from .losses import (CentroidBank, GateSchedule, centroid_loss_nodes,
                     ce_loss_nodes, consistency_loss_nodes, si_sdr_loss_nodes)
from .model import ModelConfig, frame_features, init_params
from .audio import stft_kernel
from .train import Batch, TrainConfig, build_step_graph

GRAD_TOLERANCE = 1e-4
FD_STEP = 1e-5


def _unit_rows(rng, n, e):
    m = rng.standard_normal((n, e))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _normalized(tape, pre):
    norm = dg.sqrt(dg.sum_(dg.square(pre), axis=1) + 1e-24)
    return dg.div(pre, dg.reshape(norm, (pre.value.shape[0], 1)))


def check_consistency_loss(seed: int, h: float = FD_STEP) -> float:
    """1 - cosine, differentiated through the normalization of both sides."""
    rng = np.random.default_rng(seed)
    tape = dg.Tape()
    a = rng.standard_normal((2, 5))
    b = rng.standard_normal((2, 5))
    an = tape.param("a", a)
    bn = tape.param("b", b)
    loss = dg.mean(consistency_loss_nodes(_normalized(tape, an), _normalized(tape, bn)))
    return dg.grad_check(tape, loss, {"a": a, "b": b}, h=h)


def check_centroid_loss(seed: int, h: float = FD_STEP) -> float:
    rng = np.random.default_rng(seed)
    bank = CentroidBank([0, 1, 2, 3], _unit_rows(rng, 4, 5), "battery", [1] * 4)
    tape = dg.Tape()
    pre = rng.standard_normal((2, 5))
    pn = tape.param("pre", pre)
    loss = dg.mean(centroid_loss_nodes(tape, _normalized(tape, pn), bank, [2, 0]))
    return dg.grad_check(tape, loss, {"pre": pre}, h=h)


def check_ce_loss(seed: int, h: float = FD_STEP) -> float:
    rng = np.random.default_rng(seed)
    tape = dg.Tape()
    logits = rng.standard_normal((3, 6))
    ln = tape.param("logits", logits)
    loss = dg.mean(ce_loss_nodes(ln, [1, 5, 0]))
    return dg.grad_check(tape, loss, {"logits": logits}, h=h)


def check_si_sdr_loss(seed: int, h: float = FD_STEP) -> float:
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal((2, 40))
    est = ref + 0.4 * rng.standard_normal((2, 40))
    tape = dg.Tape()
    en = tape.param("est", est)
    loss = dg.mean(si_sdr_loss_nodes(tape, en, ref))
    return dg.grad_check(tape, loss, {"est": est}, h=h)


def battery_model_config() -> ModelConfig:
    """Full-bin front end with narrow layers: small enough for exhaustive
    coordinate-wise finite differences, structurally identical otherwise."""
    stft = StftConfig(256, 128)
    plan = BandPlan(((0, 64), (64, 129)))
    return ModelConfig(stft=stft, band_plan=plan, embed_dim=3, hidden_dim=6,
                       feat_dim=6, depth=2, n_speakers=4)


def _battery_batch(seed: int, cfg: ModelConfig) -> Batch:
    """One synthetic 0.5 s mixture plus a one-second enrollment crop."""
    target = synth_utterance(make_speaker(0, seed), 0, 0.6)
    interferer = synth_utterance(make_speaker(1, seed), 1, 0.6)
    target = Waveform(target.samples[:4000], target.sample_rate)
    interferer = Waveform(interferer.samples[:4000], interferer.sample_rate)
    mix, t, _ = mixture_components(target, interferer, 0.0)
    enroll = synth_utterance(make_speaker(0, seed), 2, 1.0).samples
    feats = frame_features(stft_kernel(enroll[None, :], cfg.stft))
    return Batch(mixtures=mix[None, :], targets=t[None, :], target_speakers=[0],
                 class_indices=[0], enroll_units=None, enroll_feats=feats,
                 sample_ids=["battery:0"])


def check_full_pipeline(seed: int, h: float = FD_STEP) -> float:
    """Gated composite objective through separator and re-encoding.

    Joint mode exercises every head (SI-SDR, CE, gated centroid term) and
    every parameter of the shrunken model gets a central-difference check.
    """
    cfg = battery_model_config()
    params = init_params(seed, cfg)
    batch = _battery_batch(seed, cfg)
    rng = np.random.default_rng(seed + 17)
    bank = CentroidBank(list(range(cfg.n_speakers)),
                        _unit_rows(rng, cfg.n_speakers, cfg.embed_dim),
                        "battery", [1] * cfg.n_speakers)
    tcfg = TrainConfig(encoder_mode="joint", consistency="centroid",
                       gate_enabled=True, seed=seed)
    sched = GateSchedule(1.0, 0.8, 100, enabled=True)
    graph = build_step_graph(batch, params, tcfg, cfg, 0, sched, bank)
    if not all(graph.gates):
        raise AssertionError("battery gate should be open at threshold 1.0")
    return dg.grad_check(graph.tape, graph.total, params, h=h)


def run_battery(seeds=(0, 1, 2), verbose: bool = False) -> dict[str, float]:
    """Run every check at every seed; returns max error per check name."""
    results: dict[str, float] = {}
    named = [("consistency_loss", check_consistency_loss),
             ("centroid_loss", check_centroid_loss),
             ("ce_loss", check_ce_loss),
             ("si_sdr_loss", check_si_sdr_loss),
             ("full_pipeline", check_full_pipeline)]
    for name, fn in named:
        worst = 0.0
        for seed in seeds:
            err = fn(seed)
            worst = max(worst, err)
            if verbose:
                print(f"  {name} seed {seed}: {err:.3e}")
        results[name] = worst
    return results
