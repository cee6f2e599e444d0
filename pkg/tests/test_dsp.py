import numpy as np
import pytest
from hypothesis import given, strategies as st

from speechchain import dsp
from speechchain.dsp import (DSPConfig, DSPError, FeatureSequence, Waveform, deemphasis,
                             extract_features, fit_normalization, griffin_lim,
                             griffin_lim_magnitude, istft, mel_filterbank, preemphasis,
                             spectral_convergence, stft, stft_spectra)

CFG = DSPConfig()


def noise(n, seed=0):
    return np.random.default_rng(seed).uniform(-0.5, 0.5, n)


# -- time domain -----------------------------------------------------------------

def test_preemphasis_examples():
    y = preemphasis(Waveform([1.0, 1.0, 1.0]), 0.97).samples
    np.testing.assert_allclose(y, [1.0, 0.03, 0.03])
    x = noise(50)
    np.testing.assert_array_equal(preemphasis(Waveform(x), 0.0).samples, x)


def test_preemphasis_errors():
    with pytest.raises(DSPError):
        preemphasis(Waveform([]), 0.97)
    with pytest.raises(DSPError):
        preemphasis(Waveform([1.0]), 1.0)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=200), st.floats(0, 0.99))
def test_deemphasis_inverts_preemphasis(xs, coef):
    x = np.array(xs)
    y = deemphasis(preemphasis(Waveform(x), coef), coef).samples
    np.testing.assert_allclose(y, x, atol=1e-9)


def test_wave_normalize_peak():
    w = dsp.wave_normalize(Waveform([0.1, -0.4, 0.2]))
    assert np.max(np.abs(w.samples)) == 1.0
    assert np.all(dsp.wave_normalize(Waveform(np.zeros(5))).samples == 0)


# -- STFT --------------------------------------------------------------------------

def test_frame_geometry():
    assert (CFG.win_length, CFG.hop_length, CFG.n_bins) == (800, 200, 1025)
    mag, power = stft_spectra(Waveform(noise(16000)))
    # centre padding: 1 + floor(16000 / 200)
    assert mag.shape == power.shape == (81, 1025)
    np.testing.assert_allclose(power, mag ** 2)


def test_zero_signal_zero_magnitude():
    mag, _ = stft_spectra(Waveform(np.zeros(4000)))
    assert np.all(mag == 0)


def test_sine_at_bin_centre_concentrates_energy():
    k = 128
    f = k * 16000 / 2048
    t = np.arange(8000) / 16000
    mag, power = stft_spectra(Waveform(np.sin(2 * np.pi * f * t)))
    frame = power[mag.shape[0] // 2]
    lobe = int(np.ceil(2 * 2048 / 800))
    assert np.argmax(frame) == k
    assert frame[k - lobe:k + lobe + 1].sum() >= 0.99 * frame.sum()


def test_stft_rejects_bad_input():
    with pytest.raises(DSPError):
        stft(np.array([]), 2048, 200, 800)
    with pytest.raises(DSPError):
        stft_spectra(Waveform(noise(100)), frame_ms=200)


@pytest.mark.parametrize("n", [3000, 4801, 16000])
def test_istft_interior_roundtrip(n):
    x = noise(n, seed=n)
    y = istft(stft(x, 2048, 200, 800), 200, 800, length=n)
    inner = slice(1024, n - 1024)
    err = np.linalg.norm(y[inner] - x[inner]) / np.linalg.norm(x[inner])
    assert err < 1e-6


# -- mel filterbank --------------------------------------------------------------------

def test_filterbank_shape_and_coverage():
    fb = mel_filterbank(40, 2048, 16000)
    assert fb.shape == (40, 1025)
    assert np.all(fb >= 0)
    centres = dsp.mel_to_hz(dsp.mel_edges(40, 16000)[1:-1])
    assert np.all(np.diff(centres) > 0)
    # every bin strictly inside the span gets some weight
    assert np.all(fb[:, 1:-1].sum(axis=0) > 0)


def test_filterbank_too_many_mels():
    with pytest.raises(DSPError):
        mel_filterbank(2000, 2048, 16000)


def test_slaney_mel_scale_reference_points():
    # linear below 1 kHz (3 mels per 200 Hz), log above
    assert dsp.hz_to_mel(1000.0) == pytest.approx(15.0)
    assert dsp.hz_to_mel(200.0) == pytest.approx(3.0)
    assert dsp.hz_to_mel(6400.0) == pytest.approx(15.0 + 27.0)
    np.testing.assert_allclose(dsp.mel_to_hz(dsp.hz_to_mel(np.array([50.0, 3000.0]))),
                               [50.0, 3000.0])


# -- features ----------------------------------------------------------------------------

def test_extract_features_branches():
    mel, mag = extract_features(Waveform(noise(6000)))
    assert mel.dim == 40 and mag.dim == 1025
    assert mel.num_frames == mag.num_frames == 1 + 6000 // 200
    assert np.all(np.isfinite(mel.frames)) and np.all(np.isfinite(mag.frames))


def test_extract_features_silence_is_finite():
    mel, mag = extract_features(Waveform(np.zeros(1000)))
    assert np.all(np.isfinite(mel.frames))
    np.testing.assert_allclose(mag.frames, np.log(CFG.log_eps))


def test_extract_features_deterministic():
    x = noise(3000, seed=5)
    a = extract_features(Waveform(x))
    b = extract_features(Waveform(x.copy()))
    assert a[0].frames.tobytes() == b[0].frames.tobytes()
    assert a[1].frames.tobytes() == b[1].frames.tobytes()


def test_extract_rejects_rate_mismatch():
    with pytest.raises(DSPError):
        extract_features(Waveform(noise(1000), 8000))


def test_feature_sequence_validation():
    with pytest.raises(DSPError):
        FeatureSequence(np.zeros((0, 40)), dsp.LOG_MEL)
    with pytest.raises(DSPError):
        FeatureSequence(np.zeros((3, 40)), "mfcc")


def test_feature_file_roundtrip(tmp_path):
    mel, _ = extract_features(Waveform(noise(2000)))
    path = tmp_path / "a.mel.feat"
    dsp.write_features(path, mel)
    back = dsp.read_features(path)
    assert back.kind == dsp.LOG_MEL and back.frames.shape == mel.frames.shape
    np.testing.assert_array_equal(back.frames, mel.frames.astype(np.float32))
    assert (tmp_path / "a.mel.feat.json").exists()


def test_wav_roundtrip(tmp_path):
    x = noise(500)
    dsp.write_wav(tmp_path / "a.wav", Waveform(x))
    back = dsp.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, x, atol=1 / 32767)


# -- normalization ----------------------------------------------------------------------------

def test_normalization_fit_apply_invert(tmp_path):
    rng = np.random.default_rng(0)
    seqs = [FeatureSequence(rng.normal(3, 2, (n, 5)), dsp.LOG_MEL) for n in (4, 7, 9)]
    stats = fit_normalization(seqs)
    z = np.concatenate([stats.apply(s).frames for s in seqs])
    assert np.all(np.abs(z.mean(axis=0)) < 1e-8)
    np.testing.assert_allclose(z.var(axis=0), 1.0, atol=1e-6)
    for s in seqs:
        np.testing.assert_allclose(stats.invert(stats.apply(s)).frames, s.frames, atol=1e-10)
    stats.save(tmp_path / "s.json")
    again = dsp.NormalizationStats.load(tmp_path / "s.json")
    assert again.apply(seqs[0]).frames.tobytes() == stats.apply(seqs[0]).frames.tobytes()
    assert again.frame_count == 20


def test_normalization_single_sequence_and_floor():
    s = FeatureSequence(np.c_[np.arange(6.0), np.full(6, 2.0)], dsp.LOG_MEL)
    stats = fit_normalization([s])
    z = stats.apply(s).frames
    assert abs(z[:, 0].mean()) < 1e-12 and z[:, 0].var() == pytest.approx(1.0)
    assert stats.std[1] == dsp.STD_FLOOR
    with pytest.raises(DSPError):
        fit_normalization([FeatureSequence(np.zeros((1, 2)), dsp.LOG_MEL)])


# -- Griffin-Lim ----------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_griffin_lim_improves_on_random_signals(seed):
    x = noise(3200, seed=100 + seed)
    M = np.abs(stft(x, 2048, 200, 800))
    errs = {}

    def track(it, y):
        if it in (1, 60):
            errs[it] = spectral_convergence(y, M, 200, 800)

    griffin_lim_magnitude(M, 60, 200, 800, length=x.size, callback=track)
    assert errs[60] < errs[1]


def test_griffin_lim_convergence_nearly_monotone():
    x = noise(2400, seed=3)
    M = np.abs(stft(x, 2048, 200, 800))
    errs = []
    griffin_lim_magnitude(M, 20, 200, 800, length=x.size,
                          callback=lambda it, y: errs.append(spectral_convergence(y, M, 200, 800)))
    assert all(b <= a + 1e-7 for a, b in zip(errs, errs[1:]))


def test_griffin_lim_zero_iterations_is_zero_phase_inverse():
    M = np.abs(stft(noise(2000), 2048, 200, 800))
    y = griffin_lim_magnitude(M, 0, 200, 800)
    np.testing.assert_allclose(y, istft(M.astype(complex), 200, 800, 200 * (M.shape[0] - 1)))


def test_griffin_lim_zero_magnitude_and_errors():
    silent = FeatureSequence(np.full((5, 1025), np.log(CFG.log_eps)), dsp.LOG_MAG)
    assert np.all(griffin_lim(silent, 5).samples == 0)
    with pytest.raises(DSPError):
        griffin_lim(FeatureSequence(np.full((5, 1025), np.nan), dsp.LOG_MAG), 1)
    with pytest.raises(DSPError):
        griffin_lim(FeatureSequence(np.zeros((5, 40)), dsp.LOG_MEL), 1)
    with pytest.raises(DSPError):
        griffin_lim(FeatureSequence(np.zeros((5, 1025)), dsp.LOG_MAG, normalized=True), 1)


def test_config_validation_lists_errors():
    errs = DSPConfig(sample_rate=16000, frame_ms=500, n_mels=0, preemphasis=1.0).validate()
    assert len(errs) == 3
