"""Trainable speaker encoder and embedding-conditioned band-mask separator.

Both networks are expressed as diffgraph tapes.  Parameters live in a flat
dict of float64 arrays with "enc." / "sep." name prefixes; binding them as
tape params or constants selects which ones are trained.

Encoder: log-magnitude STFT frames -> per-frame MLP (tanh) -> mean+std
pooling over frames -> linear head -> embedding (pre-norm and unit views),
plus a linear classifier over the pre-norm features.

Separator: per-band projections of the mixture's log-magnitude features,
modulated by an embedding-conditioned scale and shift, run through a stack
of gated recurrent time-mixing blocks shared across bands, then per-band
sigmoid mask heads; the mask gates the complex mixture bins and an iSTFT
returns the estimate.

The full recurrence is one fused tape op ("gru_seq") with a hand-derived
backward-through-time adjoint; keeping the loop out of the per-node tape
machinery is what makes CPU training viable.  Its gradient is covered by
the same finite-difference checks as every other op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import diffgraph as dg
from .audio import (BandPlan, StftConfig, Waveform, default_band_plan,
                    istft_node, log_magnitude, stft_kernel, stft_node)
from .util import rng_for

# fixed affine that brings log-magnitude features into tanh's useful range
_FEAT_SHIFT = 4.0
_FEAT_SCALE = 0.25


@dataclass(frozen=True)
class ModelConfig:
    stft: StftConfig = StftConfig()
    band_plan: BandPlan = field(default_factory=default_band_plan)
    embed_dim: int = 32            # E
    hidden_dim: int = 64           # H, encoder hidden width
    feat_dim: int = 32             # D, separator feature width
    depth: int = 2                 # R, time-mixing blocks
    n_speakers: int = 32           # classifier width

    @property
    def bins(self) -> int:
        return self.stft.bins


@dataclass
class EmbeddingPair:
    """Pooled speaker features before and after L2 normalization.

    The classifier consumes pre_norm; every cosine-based quantity consumes
    unit.  Fields hold tape nodes during training and ndarrays otherwise.
    """

    pre_norm: object
    unit: object


def init_params(seed: int, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Uniform init in +-sqrt(3/fan_in), deterministic per (seed, name)."""
    params: dict[str, np.ndarray] = {}

    def mat(name, fan_in, fan_out):
        bound = np.sqrt(3.0 / fan_in)
        params[name] = rng_for(seed, name).uniform(-bound, bound, (fan_in, fan_out))

    def vec(name, n):
        params[name] = np.zeros(n)

    H, E, D = cfg.hidden_dim, cfg.embed_dim, cfg.feat_dim
    mat("enc.proj.w", cfg.bins, H); vec("enc.proj.b", H)
    mat("enc.h1.w", H, H); vec("enc.h1.b", H)
    mat("enc.h2.w", H, H); vec("enc.h2.b", H)
    mat("enc.pool.w", 2 * H, E); vec("enc.pool.b", E)
    mat("enc.cls.w", E, cfg.n_speakers); vec("enc.cls.b", cfg.n_speakers)

    for b, (start, stop) in enumerate(cfg.band_plan.ranges):
        nb = stop - start
        mat(f"sep.band{b}.in.w", nb, D); vec(f"sep.band{b}.in.b", D)
        mat(f"sep.band{b}.scale.w", E, D); vec(f"sep.band{b}.scale.b", D)
        mat(f"sep.band{b}.shift.w", E, D); vec(f"sep.band{b}.shift.b", D)
        # small mask-head init keeps the initial mask near 0.5 across bins,
        # so training starts from estimate ~ mixture instead of random gating
        mat(f"sep.band{b}.mask.w", D, nb)
        params[f"sep.band{b}.mask.w"] *= 0.1
        vec(f"sep.band{b}.mask.b", nb)
    for r in range(cfg.depth):
        for gate in ("update", "reset", "cand"):
            mat(f"sep.block{r}.{gate}.w", D, D)
            mat(f"sep.block{r}.{gate}.u", D, D)
            vec(f"sep.block{r}.{gate}.b", D)
    return params


def encoder_param_names(params: dict[str, np.ndarray]) -> list[str]:
    return sorted(n for n in params if n.startswith("enc."))


def separator_param_names(params: dict[str, np.ndarray]) -> list[str]:
    return sorted(n for n in params if n.startswith("sep."))


def bind_params(tape: dg.Tape, params: dict[str, np.ndarray],
                trainable: set[str] | None = None) -> dict[str, dg.Node]:
    """Bind every parameter onto the tape; names outside `trainable` become
    constants (no gradient, bytes untouched by any training step)."""
    bound = {}
    for name in sorted(params):
        if trainable is None or name in trainable:
            bound[name] = tape.param(name, params[name])
        else:
            bound[name] = tape.const(params[name])
    return bound


# ---------------------------------------------------------------------------
# fused gated-recurrence op

def gru_seq_kernel(x, wz, uz, bz, wr, ur, br, wc, uc, bc):
    """Run an update/reset-gated recurrence over (T, M, D) inputs.

    h_t = (1-z_t) h_{t-1} + z_t tanh(x_t Wc + (r_t . h_{t-1}) Uc + bc) with
    z/r the sigmoid update/reset gates; h_0 = 0.  Returns stacked h (T, M, D).
    """
    T, M, D = x.shape
    flat = x.reshape(T * M, D)
    az = (flat @ wz + bz).reshape(T, M, D)
    ar = (flat @ wr + br).reshape(T, M, D)
    ac = (flat @ wc + bc).reshape(T, M, D)
    h = np.zeros((M, D))
    out = np.empty((T, M, D))
    for t in range(T):
        z = expit(az[t] + h @ uz)
        r = expit(ar[t] + h @ ur)
        c = np.tanh(ac[t] + (r * h) @ uc)
        h = h + z * (c - h)
        out[t] = h
    return out


def gru_seq_vjp(attrs, out, vals, g):
    """Backward-through-time adjoint of gru_seq_kernel."""
    x, wz, uz, bz, wr, ur, br, wc, uc, bc = vals
    T, M, D = x.shape
    flat = x.reshape(T * M, D)
    h_prev = np.concatenate([np.zeros((1, M, D)), out[:-1]], axis=0)
    hp_flat = h_prev.reshape(T * M, D)
    # gates recomputed in one shot from the stored states
    z = expit((flat @ wz + bz + hp_flat @ uz).reshape(T, M, D))
    r = expit((flat @ wr + br + hp_flat @ ur).reshape(T, M, D))
    rh = r * h_prev
    c = np.tanh((flat @ wc + bc).reshape(T, M, D) + (rh.reshape(T * M, D) @ uc).reshape(T, M, D))
    gaz = np.empty((T, M, D))
    gar = np.empty((T, M, D))
    gac = np.empty((T, M, D))
    carry = np.zeros((M, D))
    for t in range(T - 1, -1, -1):
        gh = g[t] + carry
        zt, rt, ct, hp = z[t], r[t], c[t], h_prev[t]
        gz = gh * (ct - hp)
        gc = gh * zt
        ghp = gh * (1.0 - zt)
        ga_c = gc * (1.0 - ct * ct)
        gac[t] = ga_c
        grh = ga_c @ uc.T
        ghp += grh * rt
        ga_r = (grh * hp) * rt * (1.0 - rt)
        gar[t] = ga_r
        ghp += ga_r @ ur.T
        ga_z = gz * zt * (1.0 - zt)
        gaz[t] = ga_z
        carry = ghp + ga_z @ uz.T
    gaz_f = gaz.reshape(T * M, D)
    gar_f = gar.reshape(T * M, D)
    gac_f = gac.reshape(T * M, D)
    gx = (gaz_f @ wz.T + gar_f @ wr.T + gac_f @ wc.T).reshape(T, M, D)
    return (gx,
            flat.T @ gaz_f, hp_flat.T @ gaz_f, gaz_f.sum(axis=0),
            flat.T @ gar_f, hp_flat.T @ gar_f, gar_f.sum(axis=0),
            flat.T @ gac_f, rh.reshape(T * M, D).T @ gac_f, gac_f.sum(axis=0))


dg.register_op("gru_seq", lambda attrs, *v: gru_seq_kernel(*v), gru_seq_vjp)


def gru_seq(x: dg.Node, p: dict[str, dg.Node], block: str) -> dg.Node:
    names = [f"{block}.update.w", f"{block}.update.u", f"{block}.update.b",
             f"{block}.reset.w", f"{block}.reset.u", f"{block}.reset.b",
             f"{block}.cand.w", f"{block}.cand.u", f"{block}.cand.b"]
    return dg._apply("gru_seq", (x, *[p[n] for n in names]))


# ---------------------------------------------------------------------------
# encoder

def frame_features(planes: np.ndarray) -> np.ndarray:
    """Scaled log-magnitude features from (..., 2, T, bins) STFT planes."""
    return (log_magnitude(planes) + _FEAT_SHIFT) * _FEAT_SCALE


def separator_features(planes: np.ndarray) -> np.ndarray:
    """Frame-relative log-magnitude: spectral shape with the broadband level
    removed, which is what the masks need to pick bins by."""
    logmag = log_magnitude(planes)
    return (logmag - np.mean(logmag, axis=-1, keepdims=True)) * _FEAT_SCALE


def waveform_frame_features(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(T, bins) features for a single waveform."""
    return frame_features(stft_kernel(samples[None, :], cfg))[0]


def feature_node(spec_planes: dg.Node) -> dg.Node:
    """On-tape equivalent of frame_features for (B, 2, T, bins) planes."""
    B, _, T, bins = spec_planes.value.shape
    re = dg.reshape(dg.slice_axis(spec_planes, 1, 0, 1), (B, T, bins))
    im = dg.reshape(dg.slice_axis(spec_planes, 1, 1, 2), (B, T, bins))
    power = dg.add(dg.square(re), dg.square(im)) + 1e-10
    return (dg.log(power) * 0.5 + _FEAT_SHIFT) * _FEAT_SCALE


def encode_frames(tape: dg.Tape, feats: dg.Node, p: dict[str, dg.Node],
                  cfg: ModelConfig) -> EmbeddingPair:
    """Encode a (B, T, bins) feature node into batched embedding nodes.

    Returns an EmbeddingPair of (B, E) nodes; unit rows are L2-normalized.
    """
    B, T, bins = feats.value.shape
    H = cfg.hidden_dim
    flat = dg.reshape(feats, (B * T, bins))
    h = dg.tanh(dg.matmul(flat, p["enc.proj.w"]) + p["enc.proj.b"])
    h = dg.tanh(dg.matmul(h, p["enc.h1.w"]) + p["enc.h1.b"])
    h = dg.tanh(dg.matmul(h, p["enc.h2.w"]) + p["enc.h2.b"])
    h = dg.reshape(h, (B, T, H))
    m = dg.mean(h, axis=1)                                   # (B, H)
    centered = dg.sub(h, dg.reshape(m, (B, 1, H)))
    var = dg.mean(dg.square(centered), axis=1)
    s = dg.sqrt(var + 1e-8)
    pooled = dg.concat([m, s], axis=1)                       # (B, 2H)
    pre = dg.matmul(pooled, p["enc.pool.w"]) + p["enc.pool.b"]
    norm = dg.sqrt(dg.sum_(dg.square(pre), axis=1) + 1e-24)  # (B,)
    unit = dg.div(pre, dg.reshape(norm, (B, 1)))
    return EmbeddingPair(pre, unit)


def classify_logits(pair: EmbeddingPair, p: dict[str, dg.Node]) -> dg.Node:
    """Linear classifier over the pre-normalization features."""
    return dg.matmul(pair.pre_norm, p["enc.cls.w"]) + p["enc.cls.b"]


def encode_speaker(w: Waveform, params: dict[str, np.ndarray],
                   cfg: ModelConfig) -> EmbeddingPair:
    """Forward-only embedding of one waveform (scratch tape, ndarray out)."""
    feats = waveform_frame_features(w.samples, cfg.stft)
    tape = dg.Tape()
    bound = bind_params(tape, {n: params[n] for n in encoder_param_names(params)},
                        trainable=set())
    pair = encode_frames(tape, tape.const(feats[None, ...]), bound, cfg)
    return EmbeddingPair(pair.pre_norm.value[0].copy(), pair.unit.value[0].copy())


def classify(pair: EmbeddingPair, params: dict[str, np.ndarray]) -> np.ndarray:
    """Forward-only classifier logits for an ndarray EmbeddingPair."""
    return np.asarray(pair.pre_norm) @ params["enc.cls.w"] + params["enc.cls.b"]


# ---------------------------------------------------------------------------
# separator

def separate_batch(tape: dg.Tape, mixtures: np.ndarray, embedding: dg.Node,
                   p: dict[str, dg.Node], cfg: ModelConfig,
                   unit_mask: bool = False) -> dg.Node:
    """Build the separator graph for a (B, N) mixture batch.

    `embedding` is a (B, E) node (or constant) conditioning the masks.
    Returns the (B, N) estimate node.  With unit_mask=True the learned mask
    is replaced by all-ones (reconstruction test hook).
    """
    B, n_samples = mixtures.shape
    spec = stft_kernel(mixtures, cfg.stft)                   # (B, 2, T, bins)
    T = spec.shape[2]
    D = cfg.feat_dim
    n_bands = len(cfg.band_plan)
    feats = separator_features(spec)                         # (B, T, bins)
    spec_c = tape.const(spec)

    bands = []
    conditioning = []
    for b, (start, stop) in enumerate(cfg.band_plan.ranges):
        nb = stop - start
        fb = tape.const(np.ascontiguousarray(feats[:, :, start:stop]))
        h = dg.matmul(dg.reshape(fb, (B * T, nb)), p[f"sep.band{b}.in.w"])
        h = dg.reshape(h + p[f"sep.band{b}.in.b"], (B, T, D))
        sc = dg.matmul(embedding, p[f"sep.band{b}.scale.w"]) + p[f"sep.band{b}.scale.b"]
        sh = dg.matmul(embedding, p[f"sep.band{b}.shift.w"]) + p[f"sep.band{b}.shift.b"]
        conditioning.append((sc, sh))
        h = dg.mul(h, dg.reshape(sc, (B, 1, D)) + 1.0)
        h = dg.add(h, dg.reshape(sh, (B, 1, D)))
        bands.append(dg.reshape(h, (B, T, 1, D)))
    x = dg.concat(bands, axis=2)                             # (B, T, bands, D)
    x = dg.reshape(dg.permute(x, (1, 0, 2, 3)), (T, B * n_bands, D))
    for r in range(cfg.depth):
        x = dg.add(x, gru_seq(x, p, f"sep.block{r}"))        # residual blocks

    x = dg.reshape(x, (T, B, n_bands, D))
    masks = []
    for b, (start, stop) in enumerate(cfg.band_plan.ranges):
        nb = stop - start
        hb = dg.reshape(dg.slice_axis(x, 2, b, b + 1), (T, B, D))
        # the same cue modulation gates the mask-head input, so the speaker
        # choice acts both before and after the time mixing
        sc, sh = conditioning[b]
        hb = dg.mul(hb, dg.reshape(sc, (1, B, D)) + 1.0)
        hb = dg.add(hb, dg.reshape(sh, (1, B, D)))
        hb = dg.reshape(hb, (T * B, D))
        mb = dg.sigmoid(dg.matmul(hb, p[f"sep.band{b}.mask.w"]) + p[f"sep.band{b}.mask.b"])
        masks.append(dg.reshape(mb, (T, B, nb)))
    mask = dg.permute(dg.concat(masks, axis=2), (1, 0, 2))   # (B, T, bins)
    if unit_mask:
        mask = tape.const(np.ones_like(mask.value))
    est_spec = dg.mul(spec_c, dg.reshape(mask, (B, 1, T, cfg.bins)))
    return istft_node(est_spec, cfg.stft, n_samples)


def separate(mix: Waveform, embedding: EmbeddingPair,
             params: dict[str, np.ndarray], cfg: ModelConfig,
             unit_mask: bool = False) -> Waveform:
    """Forward-only extraction of one mixture given an ndarray embedding."""
    if len(mix) < cfg.stft.window_length:
        raise ValueError("mixture shorter than one analysis window")
    tape = dg.Tape()
    bound = bind_params(tape, params, trainable=set())
    emb = tape.const(np.asarray(embedding.unit)[None, :])
    est = separate_batch(tape, mix.samples[None, :], emb, bound, cfg,
                         unit_mask=unit_mask)
    return Waveform(est.value[0].copy(), mix.sample_rate)
