"""Synthetic toy corpus: small-lexicon sentences rendered as audio.

Every character owns a fixed log-amplitude template over the mel bands.
An utterance holds each character for a few frames, adds a speaker tilt
and per-frame jitter, and is rendered by summing sinusoids at the mel band
centres, so features come out of the ordinary extraction path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Manifest, ManifestRow, write_manifest
from .dsp import DSPConfig, Waveform, mel_edges, mel_to_hz, write_wav

log = logging.getLogger(__name__)

LEXICON = ("go", "red", "cat", "dog", "sun", "big", "top", "was", "on", "ten")
TEMPLATE_SEED = 1234
SPLITS = ("paired", "speech", "text", "dev", "test")


@dataclass
class ToyConfig:
    """Sizes and rendering knobs.  Sentence length counts characters,
    spaces included."""

    n_paired: int = 200
    n_speech: int = 800
    n_text: int = 800
    n_dev: int = 100
    n_test: int = 100
    min_chars: int = 3
    max_chars: int = 12
    max_words: int = 3
    min_frames: int = 4
    max_frames: int = 6
    lead_frames: int = 2
    jitter: float = 0.6
    noise: float = 0.02
    n_speakers: int = 1
    tilt: float = 1.5
    lexicon: tuple = field(default=LEXICON)

    def validate(self) -> list:
        errors = []
        if min(self.n_paired, self.n_dev) < 1:
            errors.append("toy.n_paired and toy.n_dev must be at least 1")
        if min(self.n_speech, self.n_text, self.n_test) < 0:
            errors.append("toy split sizes must be >= 0")
        if not 1 <= self.min_chars <= self.max_chars:
            errors.append("toy.min_chars must be in [1, max_chars]")
        if not 1 <= self.min_frames <= self.max_frames:
            errors.append("toy.min_frames must be in [1, max_frames]")
        if self.n_speakers < 1:
            errors.append("toy.n_speakers must be >= 1")
        if not any(self.min_chars <= len(w) <= self.max_chars for w in self.lexicon):
            errors.append("no lexicon word fits the sentence length bounds")
        return errors


def char_templates(n_bands: int = 40, seed: int = TEMPLATE_SEED) -> dict:
    """Fixed log-amplitude template per character; the space is near silence."""
    rng = np.random.default_rng(seed)
    chars = sorted(set("".join(LEXICON)) | set("abcdefghijklmnopqrstuvwxyz"))
    out = {}
    for ch in chars:
        raw = rng.standard_normal(n_bands)
        smooth = np.convolve(raw, np.ones(3) / 3.0, mode="same")
        out[ch] = 2.0 * smooth / (smooth.std() + 1e-9)
    out[" "] = np.full(n_bands, -6.0)
    return out


def random_sentence(rng: np.random.Generator, cfg: ToyConfig) -> str:
    while True:
        k = int(rng.integers(1, cfg.max_words + 1))
        words = [cfg.lexicon[i] for i in rng.integers(0, len(cfg.lexicon), size=k)]
        s = " ".join(words)
        if cfg.min_chars <= len(s) <= cfg.max_chars:
            return s


def band_frequencies(dsp: DSPConfig) -> np.ndarray:
    return mel_to_hz(mel_edges(dsp.n_mels, dsp.sample_rate)[1:-1])


def render(text: str, rng: np.random.Generator, cfg: ToyConfig, dsp: DSPConfig,
           speaker: int = 0, templates: dict | None = None) -> Waveform:
    """Render ``text`` as a waveform with per-frame sinusoid amplitudes."""
    templates = templates or char_templates(dsp.n_mels)
    silence = templates[" "]
    frames = [silence] * cfg.lead_frames
    for ch in text:
        d = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        frames.extend([templates[ch]] * d)
    frames.extend([silence] * cfg.lead_frames)
    logamp = np.asarray(frames)
    tilt = cfg.tilt * speaker * np.linspace(-1.0, 1.0, dsp.n_mels) / max(cfg.n_speakers - 1, 1)
    logamp = logamp + tilt + cfg.jitter * rng.standard_normal(logamp.shape)
    amp = np.exp(logamp)
    hop = dsp.hop_length
    n = logamp.shape[0] * hop
    t_frame = (np.arange(logamp.shape[0]) + 0.5) * hop
    t = np.arange(n)
    env = np.stack([np.interp(t, t_frame, amp[:, k]) for k in range(dsp.n_mels)])
    freqs = band_frequencies(dsp)
    phase = rng.uniform(0, 2 * np.pi, size=dsp.n_mels)
    sines = np.sin(2 * np.pi * freqs[:, None] * t[None, :] / dsp.sample_rate + phase[:, None])
    y = (env * sines).sum(axis=0)
    y = y / (np.abs(y).max() + 1e-12)
    y = y + cfg.noise * rng.standard_normal(n)
    return Waveform(0.9 * y / (np.abs(y).max() + 1e-12), dsp.sample_rate)


def make_corpus(out_dir, seed: int = 0, config: ToyConfig | None = None,
                dsp: DSPConfig | None = None) -> dict:
    """Write WAVs and the five manifests under ``out_dir``.

    Returns ``{split: manifest path}``.  Text-only rows carry no audio;
    speech-only rows carry no transcript.  Ids are unique across splits.
    """
    cfg = config or ToyConfig()
    dsp = dsp or DSPConfig()
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    out = Path(out_dir)
    wav_dir = out / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    templates = char_templates(dsp.n_mels)
    sizes = dict(zip(SPLITS, (cfg.n_paired, cfg.n_speech, cfg.n_text, cfg.n_dev, cfg.n_test)))
    streams = np.random.SeedSequence(seed).spawn(len(SPLITS))
    paths = {}
    for split, ss in zip(SPLITS, streams):
        rng = np.random.default_rng(ss)
        rows = []
        for i in range(sizes[split]):
            uid = f"{split}-{i:05d}"
            text = random_sentence(rng, cfg)
            spk = int(rng.integers(0, cfg.n_speakers))
            wav_rel = ""
            if split != "text":
                w = render(text, rng, cfg, dsp, spk, templates)
                wav_rel = f"wav/{uid}.wav"
                write_wav(out / wav_rel, w)
            transcript = "" if split == "speech" else text
            rows.append(ManifestRow(uid, wav_rel, transcript, str(spk) if wav_rel else "", i + 2))
        kind = {"speech": "speech-only", "text": "text-only"}.get(split, "paired")
        paths[split] = out / f"{split}.tsv"
        write_manifest(paths[split], Manifest(kind, rows, paths[split]))
        log.info("toy split %s: %d utterances", split, len(rows))
    return paths
