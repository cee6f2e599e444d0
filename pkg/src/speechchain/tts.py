"""Tacotron-style synthesizer with mel, linear and end-of-speech heads.

Text encoder: embedding, fully connected prenet, CBHG.  Decoder (one step
emits ``r`` mel frames): prenet over the last frame of the previous group,
LSTM 1 over ``[prenet; c_{prev}; speaker]``, location attention, LSTM 2
over ``[h1; c]``, mel head over ``[h2; c; speaker]`` and end-flag head over
``[mel; c]``.  A CBHG post-net maps the full mel sequence to the linear
(log-magnitude) spectrogram.

Attention is a single Gaussian window over character positions whose
centre moves forward by ``exp(w . h1 + b)`` each step, with a width shared
by all steps and normalized over the unmasked characters.  Because the
centre never decreases and the width is fixed within a pass, the expected
attended position is non-decreasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .nn import CBHG, Embedding, Linear, LSTM
from .params import ModelParameters

FLAG_EPS = 1e-7
MASK_VALUE = -1e30


class TTSError(ValueError):
    pass


@dataclass
class TTSConfig:
    num_classes: int = 35
    emb_dim: int = 256
    prenet: tuple = (256, 128)
    bank_size: int = 8
    bank_channels: int = 128
    enc_projections: tuple = (128, 128)
    highway_dim: int = 128
    n_highway: int = 4
    enc_rnn: int = 128
    dec_prenet: tuple = (256, 128)
    dec_hidden: int = 256
    reduction: int = 4
    mel_dim: int = 40
    linear_dim: int = 1025
    post_bank_size: int = 8
    post_channels: int = 128
    post_projections: tuple = (256, 40)
    post_rnn: int = 128
    n_speakers: int = 0
    speaker_dim: int = 64
    speaker_proj: int = 32
    att_width: float = 1.0
    flag_bias: float = -3.0
    leaky_slope: float = 0.01

    def __post_init__(self):
        self.prenet = tuple(self.prenet)
        self.enc_projections = tuple(self.enc_projections)
        self.dec_prenet = tuple(self.dec_prenet)
        self.post_projections = tuple(self.post_projections)

    @property
    def uses_speakers(self) -> bool:
        return self.n_speakers > 0 and self.speaker_dim > 0

    @property
    def enc_dim(self) -> int:
        return 2 * self.enc_rnn

    def validate(self) -> list:
        errors = []
        if self.reduction < 1:
            errors.append("tts.reduction must be >= 1")
        for name in ("num_classes", "emb_dim", "bank_size", "bank_channels", "highway_dim",
                     "enc_rnn", "dec_hidden", "mel_dim", "linear_dim", "post_bank_size",
                     "post_channels", "post_rnn"):
            if getattr(self, name) <= 0:
                errors.append(f"tts.{name} must be positive")
        if not self.prenet or not self.dec_prenet:
            errors.append("tts.prenet and tts.dec_prenet need at least one layer")
        if self.enc_projections and self.enc_projections[-1] != self.prenet[-1]:
            errors.append("tts.enc_projections must end with the prenet output width")
        if self.post_projections and self.post_projections[-1] != self.mel_dim:
            errors.append("tts.post_projections must end with mel_dim")
        if self.n_speakers < 0 or self.speaker_dim < 0:
            errors.append("tts.n_speakers and tts.speaker_dim must be >= 0")
        if self.att_width <= 0:
            errors.append("tts.att_width must be positive")
        return errors


@dataclass
class TTSOutput:
    """One utterance: mel ``(S, mel_dim)``, linear ``(S, linear_dim)``,
    end-flag probabilities ``(S,)`` and the ``(groups, T)`` alignment."""

    mel: np.ndarray
    linear: np.ndarray
    flags: np.ndarray
    alignment: np.ndarray
    stop_index: int | None = None
    hit_max: bool = False


@dataclass
class TeacherForcedOutput:
    """Graph-carrying outputs for a padded batch (frames padded to ``r``)."""

    mel: Tensor                 # (B, S, mel_dim)
    linear: Tensor              # (B, S, linear_dim)
    flags: Tensor               # (B, S) probabilities
    alignment: list = field(default_factory=list)   # per group (B, T)
    frame_mask: np.ndarray | None = None              # (B, S) real frames
    group_mask: np.ndarray | None = None              # (B, S) frames inside the utterance's groups


def padded_length(S: int, r: int) -> int:
    return -(-int(S) // r) * r


def end_flags(length: int, r: int, total: int | None = None) -> np.ndarray:
    """Gold end flags: 1 on every frame of the final group and on padding."""
    S_pad = padded_length(length, r)
    total = S_pad if total is None else total
    b = np.zeros(total)
    b[max(S_pad - r, 0):] = 1.0
    return b


class TTSModel:
    """P(x | y) as a deterministic regression with an end-of-speech head."""

    def __init__(self, config: TTSConfig | None = None, seed: int = 0):
        self.config = cfg = config or TTSConfig()
        errors = cfg.validate()
        if errors:
            raise TTSError("; ".join(errors))
        rng = np.random.default_rng(seed)
        self.params = p = ModelParameters("tts/1")
        slope = cfg.leaky_slope
        self.embed = Embedding(p, "enc.embed", cfg.num_classes, cfg.emb_dim, rng)
        dims = (cfg.emb_dim,) + cfg.prenet
        self.prenet = [Linear(p, f"enc.prenet{i}", a, b, rng)
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.encoder = CBHG(p, "enc.cbhg", cfg.prenet[-1], rng, cfg.bank_size, cfg.bank_channels,
                            cfg.enc_projections, cfg.highway_dim, cfg.n_highway, cfg.enc_rnn, slope)
        S = cfg.speaker_proj if cfg.uses_speakers else 0
        if cfg.uses_speakers:
            self.speakers = Embedding(p, "spk.embed", cfg.n_speakers, cfg.speaker_dim, rng)
            self.spk_proj = [Linear(p, f"spk.proj{i}", cfg.speaker_dim, S, rng) for i in range(3)]
        dims = (cfg.mel_dim,) + cfg.dec_prenet
        self.dec_prenet = [Linear(p, f"dec.prenet{i}", a, b, rng)
                           for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        E, H, r = cfg.enc_dim, cfg.dec_hidden, cfg.reduction
        self.rnn1 = LSTM(p, "dec.rnn1", cfg.dec_prenet[-1] + E + S, H, rng)
        self.att_step = Linear(p, "dec.att_step", H, 1, rng)
        self.att_log_width = p.add("dec.att_log_width", np.array([np.log(cfg.att_width)]))
        self.rnn2 = LSTM(p, "dec.rnn2", H + E, H, rng)
        self.mel_head = Linear(p, "dec.mel", H + E + S, r * cfg.mel_dim, rng)
        self.flag_head = Linear(p, "dec.flag", r * cfg.mel_dim + E, r, rng)
        self.flag_head.b.data[:] = cfg.flag_bias
        self.postnet = CBHG(p, "post.cbhg", cfg.mel_dim, rng, cfg.post_bank_size,
                            cfg.post_channels, cfg.post_projections, cfg.highway_dim,
                            cfg.n_highway, cfg.post_rnn, slope)
        self.linear_out = Linear(p, "post.linear", self.postnet.out_dim + S, cfg.linear_dim, rng)

    # -- helpers -------------------------------------------------------------
    def _speaker_vectors(self, speakers, B: int):
        if not self.config.uses_speakers:
            return None
        if speakers is None:
            raise TTSError("this model needs speaker ids")
        ids = np.broadcast_to(np.asarray(speakers, dtype=np.int64).reshape(-1), (B,))
        if ids.min() < 0 or ids.max() >= self.config.n_speakers:
            raise TTSError(f"unknown speaker id in {ids.tolist()}")
        e = self.speakers(ids)
        return [proj(e) for proj in self.spk_proj]

    @staticmethod
    def _tokens(tokens, lengths=None):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] == 0:
            raise TTSError("cannot encode an empty token sequence")
        if lengths is None:
            lengths = np.full(tokens.shape[0], tokens.shape[1])
        lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
        if lengths.min() < 1:
            raise TTSError("cannot encode an empty token sequence")
        return tokens, lengths

    # -- encoder -------------------------------------------------------------
    def encode_text(self, tokens, lengths=None):
        """Per-character states ``(B, T, 2 * enc_rnn)`` and the token mask."""
        cfg = self.config
        tokens, lengths = self._tokens(tokens, lengths)
        if tokens.min() < 0 or tokens.max() >= cfg.num_classes:
            raise TTSError(f"token id outside [0, {cfg.num_classes})")
        mask = (np.arange(tokens.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
        h = self.embed(tokens)
        for layer in self.prenet:
            h = ag.leaky_relu(layer(h), cfg.leaky_slope)
        return self.encoder(h, mask), mask

    # -- decoder -------------------------------------------------------------
    def init_state(self, enc: Tensor) -> dict:
        B = enc.shape[0]
        H = self.config.dec_hidden
        z = Tensor(np.zeros((B, H)))
        return {"rnn1": (z, z), "rnn2": (z, z), "ctx": Tensor(np.zeros((B, self.config.enc_dim))),
                "kappa": Tensor(np.zeros((B, 1)))}

    def attention(self, h1: Tensor, kappa: Tensor, enc: Tensor, mask: np.ndarray):
        """Advance the window centre and return ``(weights, context, kappa)``."""
        if enc.shape[1] == 0:
            raise TTSError("attention over a zero-length encoder")
        kappa = kappa + ag.exp(self.att_step(h1))
        pos = np.arange(enc.shape[1], dtype=np.float64)[None, :]
        inv_var = ag.exp(-2.0 * self.att_log_width)
        logits = ag.square(kappa - pos) * (inv_var * -0.5)
        a = ag.softmax(logits + np.where(mask > 0, 0.0, MASK_VALUE), axis=-1)
        B, T = a.shape
        ctx = ag.matmul(ag.reshape(a, (B, 1, T)), enc)
        return a, ag.reshape(ctx, (B, enc.shape[2])), kappa

    def decode_step(self, prev_frame, state: dict, enc: Tensor, mask: np.ndarray, spk=None):
        """One decoder step: ``(mel (B, r*mel_dim), flag probs (B, r), weights, state)``."""
        cfg = self.config
        prev_frame = ag.as_tensor(prev_frame)
        if prev_frame.ndim != 2 or prev_frame.shape[1] != cfg.mel_dim:
            raise ag.ShapeError("tts.decode_step", prev_frame.shape, (cfg.mel_dim,))
        if enc.ndim != 3 or enc.shape[1] == 0:
            raise TTSError("decode_step needs a non-empty encoder output")
        if enc.shape[2] != cfg.enc_dim or state["rnn1"][0].shape[1] != cfg.dec_hidden:
            raise TTSError("decoder state does not match the model configuration")
        x = prev_frame
        for layer in self.dec_prenet:
            x = ag.leaky_relu(layer(x), cfg.leaky_slope)
        parts = [x, state["ctx"]] + ([spk[0]] if spk else [])
        h1, c1 = self.rnn1.step(ag.concat(parts, axis=-1), state["rnn1"])
        a, ctx, kappa = self.attention(h1, state["kappa"], enc, mask)
        h2, c2 = self.rnn2.step(ag.concat([h1, ctx], axis=-1), state["rnn2"])
        parts = [h2, ctx] + ([spk[1]] if spk else [])
        mel = self.mel_head(ag.concat(parts, axis=-1))
        flags = self.flag_probs(mel, ctx)
        new_state = {"rnn1": (h1, c1), "rnn2": (h2, c2), "ctx": ctx, "kappa": kappa}
        return mel, flags, a, new_state

    def flag_probs(self, mel: Tensor, ctx: Tensor) -> Tensor:
        return ag.sigmoid(self.flag_head(ag.concat([mel, ctx], axis=-1)))

    def linear_head(self, mel, frame_mask=None, spk=None) -> Tensor:
        """Post-net: ``(B, S, mel_dim)`` mel -> ``(B, S, linear_dim)``."""
        mel = ag.as_tensor(mel)
        if mel.ndim == 2:
            mel = ag.reshape(mel, (1,) + mel.shape)
        if mel.shape[1] == 0:
            raise TTSError("linear head needs at least one frame")
        h = self.postnet(mel, frame_mask)
        if spk:
            B, S = h.shape[:2]
            s = ag.reshape(spk[2], (B, 1, -1)) * np.ones((1, S, 1))
            h = ag.concat([h, s], axis=-1)
        return self.linear_out(h)

    # -- teacher forcing -----------------------------------------------------
    def forward_teacher_forced(self, tokens, mel, linear=None, token_lengths=None,
                               frame_lengths=None, speakers=None) -> TeacherForcedOutput:
        """Each group is conditioned on the gold last frame of the previous group."""
        cfg = self.config
        r = cfg.reduction
        mel = np.asarray(mel, dtype=np.float64)
        if mel.ndim == 2:
            mel = mel[None]
        B, S_in = mel.shape[:2]
        if linear is not None:
            linear = np.asarray(linear)
            if linear.ndim == 2:
                linear = linear[None]
            if linear.shape[:2] != mel.shape[:2]:
                raise TTSError(f"mel frames {mel.shape[:2]} != linear frames {linear.shape[:2]}")
        frame_lengths = (np.full(B, S_in) if frame_lengths is None
                         else np.asarray(frame_lengths, dtype=np.int64).reshape(-1))
        S = padded_length(S_in, r)
        if S != S_in:
            mel = np.pad(mel, ((0, 0), (0, S - S_in), (0, 0)))
        enc, tmask = self.encode_text(tokens, token_lengths)
        if enc.shape[0] != B:
            raise TTSError("token and frame batch sizes differ")
        spk = self._speaker_vectors(speakers, B)
        state = self.init_state(enc)
        prev = Tensor(np.zeros((B, cfg.mel_dim)))
        mels, flags, align = [], [], []
        for g in range(S // r):
            m, f, a, state = self.decode_step(prev, state, enc, tmask, spk)
            mels.append(m)
            flags.append(f)
            align.append(a)
            prev = Tensor(mel[:, (g + 1) * r - 1])
        mel_hat = ag.reshape(ag.stack(mels, axis=1), (B, S, cfg.mel_dim))
        flag_hat = ag.reshape(ag.stack(flags, axis=1), (B, S))
        frames = np.arange(S)[None, :]
        frame_mask = (frames < frame_lengths[:, None]).astype(np.float64)
        group_lengths = np.array([padded_length(n, r) for n in frame_lengths])
        group_mask = (frames < group_lengths[:, None]).astype(np.float64)
        lin_hat = self.linear_head(mel_hat, group_mask, spk)
        return TeacherForcedOutput(mel_hat, lin_hat, flag_hat, align, frame_mask, group_mask)

    def loss(self, tokens, mel, linear, token_lengths=None, frame_lengths=None,
             speakers=None) -> Tensor:
        mel = np.asarray(mel, dtype=np.float64)
        linear = np.asarray(linear, dtype=np.float64)
        if mel.ndim == 2:
            mel, linear = mel[None], linear[None]
        out = self.forward_teacher_forced(tokens, mel, linear, token_lengths, frame_lengths,
                                          speakers)
        return loss_from_output(out, mel, linear, self.config.reduction)

    # -- free running --------------------------------------------------------
    def synthesize(self, tokens, token_lengths=None, speakers=None,
                   max_frames: int = 400) -> list:
        """Feed back predictions until an end flag exceeds 0.5 or ``max_frames``."""
        cfg = self.config
        r = cfg.reduction
        if max_frames % r:
            raise TTSError(f"max_frames must be a multiple of r={r}")
        with no_grad():
            enc, tmask = self.encode_text(tokens, token_lengths)
            B = enc.shape[0]
            spk = self._speaker_vectors(speakers, B)
            state = self.init_state(enc)
            prev = Tensor(np.zeros((B, cfg.mel_dim)))
            stop = np.full(B, -1)
            mels, flags, align = [], [], []
            for g in range(max_frames // r):
                m, f, a, state = self.decode_step(prev, state, enc, tmask, spk)
                mel_g = m.data.reshape(B, r, cfg.mel_dim)
                mels.append(mel_g)
                flags.append(f.data)
                align.append(a.data)
                prev = Tensor(mel_g[:, -1])
                fired = (f.data > 0.5) & (stop < 0)[:, None]
                for b in np.flatnonzero(fired.any(axis=1)):
                    stop[b] = g * r + int(np.argmax(fired[b]))
                if (stop >= 0).all():
                    break
            mel_all = np.concatenate(mels, axis=1)
            flag_all = np.concatenate(flags, axis=1)
            align_all = np.stack(align, axis=1)
            n_frames = np.where(stop >= 0, (stop // r + 1) * r, mel_all.shape[1])
            mask = (np.arange(mel_all.shape[1])[None, :] < n_frames[:, None]).astype(np.float64)
            lin = self.linear_head(Tensor(mel_all * mask[:, :, None]), mask, spk).data
        outs = []
        for b in range(B):
            n = int(n_frames[b])
            outs.append(TTSOutput(mel_all[b, :n], lin[b, :n], flag_all[b, :n],
                                  align_all[b, :n // r, :int(tmask[b].sum())],
                                  int(stop[b]) if stop[b] >= 0 else None, bool(stop[b] < 0)))
        return outs


def loss_tts(mel, mel_hat: Tensor, linear, linear_hat: Tensor, flags, flag_hat: Tensor,
             frame_mask=None, group_mask=None) -> Tensor:
    """Per-frame mel MSE + linear MSE + end-flag cross-entropy.

    Squared errors are averaged over feature dimensions, the sum is averaged
    over the utterance's frames (``group_mask``), then over the batch.
    Regression terms only count real frames (``frame_mask``); the flag term
    also counts the padding that completes the final group.  ``flag_hat`` is
    clamped to ``[1e-7, 1 - 1e-7]``.
    """
    mel_hat, linear_hat, flag_hat = (ag.as_tensor(t) for t in (mel_hat, linear_hat, flag_hat))
    mel = np.asarray(mel, dtype=np.float64)
    linear = np.asarray(linear, dtype=np.float64)
    flags = np.asarray(flags, dtype=np.float64)
    if mel_hat.ndim == 2:
        mel_hat = ag.reshape(mel_hat, (1,) + mel_hat.shape)
        linear_hat = ag.reshape(linear_hat, (1,) + linear_hat.shape)
        flag_hat = ag.reshape(flag_hat, (1,) + flag_hat.shape)
        mel, linear, flags = mel[None], linear[None], flags[None]
    if mel.shape != mel_hat.shape or linear.shape != linear_hat.shape or flags.shape != flag_hat.shape:
        raise ag.ShapeError("loss_tts", mel.shape, mel_hat.shape, linear.shape, linear_hat.shape)
    for arr in (mel, linear, flags):
        if np.isnan(arr).any():
            raise TTSError("NaN in TTS loss targets")
    for t in (mel_hat, linear_hat, flag_hat):
        if np.isnan(t.data).any():
            raise TTSError("NaN in TTS predictions")
    B, S = flags.shape
    fm = np.ones((B, S)) if frame_mask is None else np.asarray(frame_mask, dtype=np.float64)
    gm = np.ones((B, S)) if group_mask is None else np.asarray(group_mask, dtype=np.float64)
    mel_se = ag.mean(ag.square(mel_hat - mel), axis=-1)
    lin_se = ag.mean(ag.square(linear_hat - linear), axis=-1)
    p = ag.clip(flag_hat, FLAG_EPS, 1.0 - FLAG_EPS)
    bce = -(flags * ag.log(p) + (1.0 - flags) * ag.log(1.0 - p))
    per_frame = (mel_se + lin_se) * fm + bce * gm
    per_utt = ag.sum(per_frame, axis=1) * (1.0 / gm.sum(axis=1))
    return ag.mean(per_utt)


def loss_from_output(out: TeacherForcedOutput, mel, linear, r: int) -> Tensor:
    """Pad gold features to the output length and apply :func:`loss_tts`."""
    B, S = out.flags.shape
    mel = np.asarray(mel, dtype=np.float64)
    linear = np.asarray(linear, dtype=np.float64)
    pad = S - mel.shape[1]
    if pad:
        mel = np.pad(mel, ((0, 0), (0, pad), (0, 0)))
        linear = np.pad(linear, ((0, 0), (0, pad), (0, 0)))
    lengths = out.frame_mask.sum(axis=1).astype(int)
    flags = np.stack([end_flags(n, r, S) for n in lengths])
    return loss_tts(mel, out.mel, linear, out.linear, flags, out.flags,
                    out.frame_mask, out.group_mask)
