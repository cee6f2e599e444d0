"""Speech feature extraction and Griffin-Lim waveform reconstruction.

Conventions follow the common librosa defaults: periodic Hann window
zero-padded to the FFT size, reflect padding of ``n_fft // 2`` samples at
both ends (``center=True``), Slaney mel scale with area-normalized
triangles.  The power spectrum feeds the mel filterbank; the linear branch
keeps plain magnitudes.
"""

from __future__ import annotations

import json
import logging
import struct
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LOG_MEL = "log-mel"
LOG_MAG = "log-magnitude"
_KIND_CODES = {LOG_MEL: 0, LOG_MAG: 1}


class DSPError(ValueError):
    pass


@dataclass
class DSPConfig:
    sample_rate: int = 16000
    frame_ms: float = 50.0
    shift_ms: float = 12.5
    fft_size: int = 2048
    n_mels: int = 40
    preemphasis: float = 0.97
    log_eps: float = 1e-10
    griffin_lim_iters: int = 60
    griffin_lim_power: float = 1.0

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.shift_ms / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def validate(self) -> list:
        errors = []
        if self.sample_rate <= 0:
            errors.append("dsp.sample_rate must be positive")
        if not 0 <= self.preemphasis < 1:
            errors.append("dsp.preemphasis must be in [0, 1)")
        if self.win_length > self.fft_size:
            errors.append("dsp.frame_ms gives a window longer than dsp.fft_size")
        if self.hop_length <= 0:
            errors.append("dsp.shift_ms must give a positive hop")
        if self.n_mels < 1 or self.n_mels > self.n_bins:
            errors.append("dsp.n_mels must be between 1 and the number of FFT bins")
        return errors


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise DSPError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class FeatureSequence:
    frames: np.ndarray
    kind: str
    normalized: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.kind not in _KIND_CODES:
            raise DSPError(f"unknown feature kind {self.kind!r}")
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DSPError(f"feature frames must be S x D with S >= 1, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------------------
# time-domain helpers
# ---------------------------------------------------------------------------

def wave_normalize(w: Waveform) -> Waveform:
    """Scale so the peak absolute sample is 1; silence is returned unchanged."""
    peak = np.max(np.abs(w.samples)) if len(w) else 0.0
    if peak == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(w.samples / peak, w.sample_rate)


def preemphasis(w: Waveform, coef: float = 0.97) -> Waveform:
    if not 0 <= coef < 1:
        raise DSPError(f"pre-emphasis coefficient must be in [0, 1), got {coef}")
    x = w.samples
    if x.size == 0:
        raise DSPError("pre-emphasis of an empty waveform")
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - coef * x[:-1]
    return Waveform(y, w.sample_rate)


def deemphasis(w: Waveform, coef: float = 0.97) -> Waveform:
    """Inverse recurrence of :func:`preemphasis`."""
    from scipy.signal import lfilter

    if w.samples.size == 0:
        raise DSPError("de-emphasis of an empty waveform")
    return Waveform(lfilter([1.0], [1.0, -coef], w.samples), w.sample_rate)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

def hann_window(win_length: int, fft_size: int) -> np.ndarray:
    """Periodic Hann window centred inside an ``fft_size`` frame."""
    n = np.arange(win_length)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    left = (fft_size - win_length) // 2
    out = np.zeros(fft_size)
    out[left:left + win_length] = win
    return out


def stft(x: np.ndarray, fft_size: int, hop: int, win_length: int) -> np.ndarray:
    """Complex STFT, frames on the first axis: ``(S, fft_size // 2 + 1)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DSPError("STFT of an empty signal")
    if win_length > fft_size:
        raise DSPError(f"window length {win_length} exceeds FFT size {fft_size}")
    pad = fft_size // 2
    mode = "reflect" if x.size > 1 else "constant"
    xp = np.pad(x, pad, mode=mode)
    if xp.size < fft_size:
        raise DSPError("signal shorter than one frame after padding")
    n_frames = 1 + (xp.size - fft_size) // hop
    frames = np.lib.stride_tricks.sliding_window_view(xp, fft_size)[::hop][:n_frames]
    return np.fft.rfft(frames * hann_window(win_length, fft_size), axis=1)


def istft(spec: np.ndarray, hop: int, win_length: int, length: int | None = None) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (weighted overlap-add)."""
    spec = np.asarray(spec)
    fft_size = 2 * (spec.shape[1] - 1)
    win = hann_window(win_length, fft_size)
    frames = np.fft.irfft(spec, n=fft_size, axis=1) * win
    n = fft_size + hop * (spec.shape[0] - 1)
    y = np.zeros(n)
    wsum = np.zeros(n)
    sq = win * win
    for t in range(spec.shape[0]):
        y[t * hop:t * hop + fft_size] += frames[t]
        wsum[t * hop:t * hop + fft_size] += sq
    nz = wsum > 1e-10
    y[nz] /= wsum[nz]
    pad = fft_size // 2
    y = y[pad:]
    if length is not None:
        y = y[:length] if y.size >= length else np.pad(y, (0, length - y.size))
    else:
        y = y[:n - 2 * pad]
    return y


def stft_spectra(w: Waveform, frame_ms: float = 50.0, shift_ms: float = 12.5,
                 fft_size: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(magnitude, power)``, each ``S x (fft_size // 2 + 1)``."""
    win = int(round(w.sample_rate * frame_ms / 1000.0))
    hop = int(round(w.sample_rate * shift_ms / 1000.0))
    if win > fft_size:
        raise DSPError(f"{frame_ms} ms frame ({win} samples) exceeds FFT size {fft_size}")
    mag = np.abs(stft(w.samples, fft_size, hop, win))
    return mag, mag * mag


# ---------------------------------------------------------------------------
# mel filterbank (Slaney scale)
# ---------------------------------------------------------------------------

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    return np.where(f >= _MIN_LOG_HZ,
                    _MIN_LOG_MEL + np.log(np.maximum(f, 1e-12) / _MIN_LOG_HZ) / _LOGSTEP, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    return np.where(m >= _MIN_LOG_MEL, _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL)),
                    _F_SP * m)


def mel_edges(n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None):
    """The ``n_mels + 2`` edge frequencies; centre of filter i is edge i + 1."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int = 40, fft_size: int = 2048, sample_rate: int = 16000) -> np.ndarray:
    """``n_mels x (fft_size // 2 + 1)`` matrix of area-normalized triangles."""
    n_bins = fft_size // 2 + 1
    if n_mels < 1:
        raise DSPError("n_mels must be at least 1")
    if n_mels > n_bins:
        raise DSPError(f"n_mels={n_mels} exceeds the {n_bins} FFT bins")
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = mel_edges(n_mels, sample_rate)
    widths = np.diff(edges)
    ramps = edges[:, None] - freqs[None, :]
    weights = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lower = -ramps[i] / widths[i]
        upper = ramps[i + 2] / widths[i + 1]
        weights[i] = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:n_mels + 2] - edges[:n_mels]))[:, None]
    return weights


# ---------------------------------------------------------------------------
# feature pipeline
# ---------------------------------------------------------------------------

_FB_CACHE: dict = {}


def _filterbank(cfg: DSPConfig) -> np.ndarray:
    key = (cfg.n_mels, cfg.fft_size, cfg.sample_rate)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    return _FB_CACHE[key]


def extract_features(w: Waveform, config: DSPConfig | None = None
                     ) -> tuple[FeatureSequence, FeatureSequence]:
    """Waveform -> (log-mel, log-magnitude), both un-normalized.

    Pipeline: peak normalization, pre-emphasis, STFT; the power spectrum
    goes through the mel filterbank, the magnitude is kept for the linear
    branch; both take ``log(value + eps)``.
    """
    cfg = config or DSPConfig()
    if w.sample_rate != cfg.sample_rate:
        raise DSPError(f"waveform rate {w.sample_rate} Hz != configured {cfg.sample_rate} Hz")
    x = preemphasis(wave_normalize(w), cfg.preemphasis)
    mag, power = stft_spectra(x, cfg.frame_ms, cfg.shift_ms, cfg.fft_size)
    mel = power @ _filterbank(cfg).T
    return (FeatureSequence(np.log(mel + cfg.log_eps), LOG_MEL),
            FeatureSequence(np.log(mag + cfg.log_eps), LOG_MAG))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

STD_FLOOR = 1e-5


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    kind: str = LOG_MEL
    corpus: str = ""
    frame_count: int = 0

    def apply(self, feats: FeatureSequence) -> FeatureSequence:
        self._check(feats)
        return FeatureSequence((feats.frames - self.mean) / self.std, feats.kind, True)

    def invert(self, feats: FeatureSequence) -> FeatureSequence:
        self._check(feats)
        return FeatureSequence(feats.frames * self.std + self.mean, feats.kind, False)

    def _check(self, feats: FeatureSequence) -> None:
        if feats.dim != self.mean.size:
            raise DSPError(f"stats have {self.mean.size} dims, features have {feats.dim}")

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "corpus": self.corpus,
                           "frame_count": self.frame_count,
                           "mean": self.mean.tolist(), "std": self.std.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "NormalizationStats":
        d = json.loads(text)
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   d["kind"], d.get("corpus", ""), int(d.get("frame_count", 0)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def fit_normalization(corpus, corpus_name: str = "") -> NormalizationStats:
    """Per-dimension mean and standard deviation over every frame of ``corpus``."""
    seqs = list(corpus)
    if not seqs:
        raise DSPError("cannot fit normalization on an empty corpus")
    kind = seqs[0].kind
    frames = np.concatenate([np.asarray(s.frames, dtype=np.float64) for s in seqs], axis=0)
    if frames.shape[0] < 2:
        raise DSPError("need at least 2 frames to fit normalization")
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    low = std < STD_FLOOR
    if low.any():
        log.warning("%d constant feature dimension(s); std floored at %g", int(low.sum()), STD_FLOOR)
        std = np.where(low, STD_FLOOR, std)
    return NormalizationStats(mean, std, kind, corpus_name, int(frames.shape[0]))


# ---------------------------------------------------------------------------
# Griffin-Lim
# ---------------------------------------------------------------------------

def spectral_convergence(y: np.ndarray, magnitude: np.ndarray, hop: int, win_length: int) -> float:
    fft_size = 2 * (magnitude.shape[1] - 1)
    est = np.abs(stft(y, fft_size, hop, win_length))[:magnitude.shape[0]]
    denom = np.linalg.norm(magnitude)
    return float(np.linalg.norm(est - magnitude) / denom) if denom > 0 else 0.0


def griffin_lim_magnitude(magnitude: np.ndarray, iterations: int, hop: int, win_length: int,
                          length: int | None = None, init: str = "zero", seed: int = 0,
                          callback=None) -> np.ndarray:
    """Recover a signal whose STFT magnitude approximates ``magnitude``.

    Starts from zero (or seeded random) phase and alternates inverse STFT
    with re-analysis, keeping the given magnitude each time.  ``callback``
    receives ``(iteration, signal)`` after every projection, with iteration 0
    for the initial estimate.
    """
    M = np.asarray(magnitude, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise DSPError("Griffin-Lim input contains non-finite values")
    fft_size = 2 * (M.shape[1] - 1)
    if init == "random":
        phase = np.exp(2j * np.pi * np.random.default_rng(seed).random(M.shape))
    else:
        phase = np.ones(M.shape, dtype=np.complex128)
    if length is None:
        length = hop * (M.shape[0] - 1)
    y = istft(M * phase, hop, win_length, length)
    if callback is not None:
        callback(0, y)
    for it in range(1, iterations + 1):
        X = stft(y, fft_size, hop, win_length)[:M.shape[0]]
        mag = np.abs(X)
        phase = np.where(mag > 0, X / np.where(mag > 0, mag, 1.0), 1.0)
        y = istft(M * phase, hop, win_length, length)
        if callback is not None:
            callback(it, y)
    return y


def griffin_lim(log_magnitude: FeatureSequence, iterations: int | None = None,
                config: DSPConfig | None = None) -> Waveform:
    """Invert a de-normalized log-magnitude spectrogram to a de-emphasized
    waveform."""
    cfg = config or DSPConfig()
    if log_magnitude.kind != LOG_MAG:
        raise DSPError(f"Griffin-Lim needs {LOG_MAG} features, got {log_magnitude.kind}")
    if log_magnitude.normalized:
        raise DSPError("Griffin-Lim input must be de-normalized first")
    frames = np.asarray(log_magnitude.frames, dtype=np.float64)
    if not np.all(np.isfinite(frames)):
        raise DSPError("Griffin-Lim input contains non-finite values")
    mag = np.maximum(np.exp(frames) - cfg.log_eps, 0.0)
    if cfg.griffin_lim_power != 1.0:
        mag = mag ** cfg.griffin_lim_power
    iters = cfg.griffin_lim_iters if iterations is None else iterations
    y = griffin_lim_magnitude(mag, iters, cfg.hop_length, cfg.win_length)
    return deemphasis(Waveform(y, cfg.sample_rate), cfg.preemphasis)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"SCFEAT\x00\x01"
FEATURE_VERSION = 1


def write_features(path, feats: FeatureSequence, config: DSPConfig | None = None,
                   stats_name: str = "") -> None:
    """Binary container: magic, u32 version, u8 kind, u8 normalized flag,
    u32 S, u32 D, then S*D little-endian float32.  A ``.json`` sidecar next
    to the file records the extraction config."""
    path = Path(path)
    header = FEATURE_MAGIC + struct.pack("<IBBII", FEATURE_VERSION, _KIND_CODES[feats.kind],
                                         int(feats.normalized), *feats.frames.shape)
    path.write_bytes(header + np.ascontiguousarray(feats.frames, dtype="<f4").tobytes())
    side = {"kind": feats.kind, "normalized": feats.normalized,
            "shape": list(feats.frames.shape), "stats": stats_name,
            "config": asdict(config or DSPConfig())}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")


def read_features(path) -> FeatureSequence:
    blob = Path(path).read_bytes()
    if blob[:8] != FEATURE_MAGIC:
        raise DSPError(f"{path}: not a feature file")
    version, kind, normalized, S, D = struct.unpack_from("<IBBII", blob, 8)
    if version != FEATURE_VERSION:
        raise DSPError(f"{path}: unsupported feature file version {version}")
    names = {v: k for k, v in _KIND_CODES.items()}
    data = np.frombuffer(blob, dtype="<f4", count=S * D, offset=22).reshape(S, D)
    return FeatureSequence(data.astype(np.float32), names[kind], bool(normalized))


def write_wav(path, w: Waveform) -> None:
    """16-bit PCM mono WAV; samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise DSPError(f"{path}: only 16-bit PCM is supported")
        rate = fh.getframerate()
        channels = fh.getnchannels()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return Waveform(pcm, rate)


def config_dict(cfg: DSPConfig) -> dict:
    return asdict(cfg)

