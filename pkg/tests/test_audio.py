import numpy as np
import pytest

from tsekit import diffgraph as dg
from tsekit.audio import (BandPlan, Spectrogram, StftConfig, Waveform,
                          WavFormatError, band_merge, band_split,
                          default_band_plan, istft, istft_adjoint_kernel,
                          istft_kernel, periodic_hann, read_wav, stft,
                          stft_adjoint_kernel, stft_kernel, stft_node,
                          istft_node, write_wav)


@pytest.fixture
def cfg():
    return StftConfig(256, 128)


# --- WAV I/O -----------------------------------------------------------------

def test_wav_roundtrip_within_quantization(tmp_path):
    w = Waveform(np.array([0.0, 0.5, -0.5]), 8000)
    path = tmp_path / "t.wav"
    write_wav(path, w)
    back = read_wav(path)
    assert back.sample_rate == 8000
    assert len(back) == 3
    assert np.max(np.abs(back.samples - w.samples)) <= 1.0 / 32768


def test_wav_roundtrip_random(tmp_path):
    rng = np.random.default_rng(0)
    w = Waveform(rng.uniform(-1, 1, 2000), 16000)
    path = tmp_path / "r.wav"
    write_wav(path, w)
    back = read_wav(path)
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - w.samples)) <= 1.0 / 32768


def test_wav_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.wav"
    path.write_bytes(b"")
    with pytest.raises(WavFormatError, match="malformed"):
        read_wav(path)


def test_wav_garbage_rejected(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"this is not RIFF data at all")
    with pytest.raises(WavFormatError):
        read_wav(path)


def test_wav_stereo_rejected(tmp_path):
    import wave
    path = tmp_path / "stereo.wav"
    with wave.open(str(path), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(8000)
        f.writeframes(np.zeros(100, dtype="<i2").tobytes())
    with pytest.raises(WavFormatError, match="mono"):
        read_wav(path)


# --- STFT / iSTFT -------------------------------------------------------------

def test_stft_zero_input(cfg):
    w = Waveform(np.zeros(1000) + 1e-30, 8000)  # Waveform rejects empties only
    w.samples[:] = 0.0
    s = stft(w, cfg)
    assert np.all(s.data == 0)


def test_stft_frame_count_and_shape(cfg):
    w = Waveform(np.ones(1000), 8000)
    s = stft(w, cfg)
    assert s.data.shape == (1 + (1000 - 256) // 128, 129)


def test_stft_too_short_rejected(cfg):
    with pytest.raises(ValueError, match="shorter"):
        stft(Waveform(np.ones(128), 8000), cfg)


def test_sine_energy_concentrates_at_its_bin(cfg):
    # Direct-DFT oracle: a Hann window spreads a bin-centered sine into the
    # two adjacent bins, so >99% of frame energy sits in bins {k-1, k, k+1}
    # with the peak at k (a rectangular window would put ~100% in k alone).
    fs = 8000
    k = 20
    freq = k * fs / cfg.window_length
    n = np.arange(4000)
    w = Waveform(0.5 * np.sin(2 * np.pi * freq * n / fs), fs)

    seg = w.samples[:256] * periodic_hann(256)
    oracle = np.array([np.abs(np.sum(seg * np.exp(-2j * np.pi * kk * np.arange(256) / 256)))
                       for kk in range(129)])
    oracle_frac = oracle[k - 1:k + 2] ** 2 / np.sum(oracle ** 2)
    assert oracle_frac.sum() > 0.99  # the oracle itself shows the 3-bin spread

    s = stft(w, cfg)
    power = np.abs(s.data) ** 2
    for t in range(power.shape[0]):
        frame = power[t]
        assert np.argmax(frame) == k
        assert frame[k - 1:k + 2].sum() / frame.sum() > 0.99


def test_roundtrip_interior(cfg):
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.9, 0.9, 5000)
    w = Waveform(x, 8000)
    y = istft(stft(w, cfg))
    assert len(y) == 5000
    assert np.max(np.abs(y.samples[256:-256] - x[256:-256])) <= 1e-10


@pytest.mark.parametrize("window,hop", [(256, 128), (256, 64), (128, 64), (64, 16)])
def test_roundtrip_interior_cola_configs(window, hop):
    cfg = StftConfig(window, hop)
    rng = np.random.default_rng(window + hop)
    x = rng.uniform(-0.9, 0.9, 4000)
    y = istft(stft(Waveform(x, 8000), cfg))
    err = np.max(np.abs(y.samples[window:-window] - x[window:-window]))
    assert err <= 1e-10


def test_istft_zero_spectrogram(cfg):
    s = Spectrogram(np.zeros((10, 129), dtype=complex), cfg, 256 + 9 * 128)
    assert np.all(istft(s).samples == 0.0)


def test_istft_linearity(cfg):
    rng = np.random.default_rng(2)
    shape = (12, 129)
    n = 256 + 11 * 128
    a = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    b = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    ya = istft(Spectrogram(a, cfg, n)).samples
    yb = istft(Spectrogram(b, cfg, n)).samples
    yab = istft(Spectrogram(a + b, cfg, n)).samples
    assert np.max(np.abs(yab - (ya + yb))) <= 1e-12


def test_istft_inconsistent_bins_rejected(cfg):
    with pytest.raises(ValueError, match="bin count"):
        Spectrogram(np.zeros((4, 100), dtype=complex), cfg, 1000)


def test_parseval_per_frame(cfg):
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, 3000)
    s = stft(Waveform(x, 8000), cfg)
    win = periodic_hann(256)
    for t in range(s.data.shape[0]):
        seg = x[t * 128: t * 128 + 256] * win
        time_energy = np.sum(seg ** 2)
        mag2 = np.abs(s.data[t]) ** 2
        spec_energy = (mag2[0] + 2 * mag2[1:-1].sum() + mag2[-1]) / 256
        assert spec_energy == pytest.approx(time_energy, rel=1e-9)


def test_stft_istft_adjoints_exact(cfg):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 2000))
    T = cfg.frame_count(2000)
    u = rng.standard_normal((2, 2, T, cfg.bins))
    assert np.sum(u * stft_kernel(x, cfg)) == pytest.approx(
        np.sum(stft_adjoint_kernel(u, cfg, 2000) * x), rel=1e-12)
    p = rng.standard_normal((2, 2, T, cfg.bins))
    v = rng.standard_normal((2, 2000))
    assert np.sum(v * istft_kernel(p, cfg, 2000)) == pytest.approx(
        np.sum(istft_adjoint_kernel(v, cfg, T) * p), rel=1e-12)


def test_stft_istft_tape_gradcheck():
    # interior slice: edge samples are attenuated by the overlap-add floor,
    # leaving gradients too small for finite differences to resolve
    cfg = StftConfig(64, 32)
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((1, 400)) * 0.3
    tape = dg.Tape()
    x = tape.param("x", x0)
    planes = stft_node(x, cfg)
    y = istft_node(dg.scale(planes, 0.7), cfg, 400)
    loss = dg.mean(dg.square(dg.slice_axis(y, 1, 64, 336)))
    assert dg.grad_check(tape, loss, {"x": x0}, h=1e-6) < 1e-5


# --- band plans ----------------------------------------------------------------

def test_default_band_plan_tiles_129_bins():
    plan = default_band_plan(129)
    assert len(plan) == 8
    assert plan.widths()[:4] == [16, 16, 16, 16]
    assert sum(plan.widths()) == 129
    assert plan.ranges[0] == (0, 16)
    assert plan.ranges[-1][1] == 129


def test_band_plan_rejects_gaps():
    with pytest.raises(ValueError):
        BandPlan(((0, 10), (12, 20)))
    with pytest.raises(ValueError):
        BandPlan(((0, 10), (10, 10)))


def test_one_band_plan_is_identity():
    rng = np.random.default_rng(6)
    spec = rng.standard_normal((5, 20))
    plan = BandPlan(((0, 20),))
    bands = band_split(spec, plan)
    assert len(bands) == 1
    assert np.array_equal(bands[0], spec)
    assert np.array_equal(band_merge(bands, plan), spec)


def test_band_split_merge_bit_exact_roundtrip():
    rng = np.random.default_rng(7)
    spec = rng.standard_normal((4, 129)) + 1j * rng.standard_normal((4, 129))
    plan = default_band_plan(129)
    bands = band_split(spec, plan)
    assert [b.shape[-1] for b in bands] == plan.widths()
    merged = band_merge(bands, plan)
    assert merged.tobytes() == spec.tobytes()


def test_band_split_rejects_wrong_bin_count():
    plan = default_band_plan(129)
    with pytest.raises(ValueError, match="bins"):
        band_split(np.zeros((3, 100)), plan)


def test_band_merge_rejects_wrong_band_count():
    plan = default_band_plan(129)
    with pytest.raises(ValueError):
        band_merge([np.zeros((3, 16))], plan)


# --- config validation ----------------------------------------------------------

def test_stft_config_validation():
    with pytest.raises(ValueError):
        StftConfig(256, 100)       # hop must divide window
    with pytest.raises(ValueError):
        StftConfig(256, 256)       # needs overlap
    with pytest.raises(ValueError):
        StftConfig(0, 1)


def test_cola_window_sums_constant():
    for window, hop in [(256, 128), (256, 64), (128, 32)]:
        win = periodic_hann(window)
        k = window // hop
        total = np.zeros(4 * window)
        for t in range((total.size - window) // hop + 1):
            total[t * hop: t * hop + window] += win
        interior = total[window:-window]
        assert np.allclose(interior, k / 2, atol=1e-12)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([]), 8000)
    with pytest.raises(ValueError):
        Waveform(np.array([np.nan]), 8000)
    with pytest.raises(ValueError):
        Waveform(np.array([0.0]), 0)
