"""Attention-based encoder-decoder speech recognizer.

Encoder: linear projection + leaky ReLU, then stacked bidirectional LSTMs;
the top two layers read every second frame of their input, so ``S`` frames
become ``ceil(S / 4)`` encoder states.  Decoder: character embedding and a
single LSTM whose input is ``[embed(y_{t-1}); c_{t-1}]``; the output layer
reads ``[h_t; c_t]``.  Attention scores are dot, bilinear or MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .decoding import Hypothesis, beam_search, greedy_search
from .nn import BiLSTM, Embedding, Linear, LSTM, uniform_init
from .params import ModelParameters
from .text import VOCAB

SCORERS = ("dot", "bilinear", "mlp")
MASK_VALUE = -1e30


class ASRError(ValueError):
    pass


@dataclass
class ASRConfig:
    input_dim: int = 40
    proj_dim: int = 512
    enc_hidden: int = 256
    enc_layers: int = 3
    subsample_layers: int = 2
    emb_dim: int = 128
    dec_hidden: int = 512
    score: str = "mlp"
    att_dim: int = 512
    num_classes: int = 35
    leaky_slope: float = 0.01

    @property
    def enc_dim(self) -> int:
        return 2 * self.enc_hidden

    @property
    def reduction(self) -> int:
        return 2 ** self.subsample_layers

    def validate(self) -> list:
        errors = []
        for name in ("input_dim", "proj_dim", "enc_hidden", "enc_layers", "emb_dim",
                     "dec_hidden", "att_dim", "num_classes"):
            if getattr(self, name) <= 0:
                errors.append(f"asr.{name} must be positive")
        if self.score not in SCORERS:
            errors.append(f"asr.score must be one of {SCORERS}, got {self.score!r}")
        if self.score == "dot" and self.enc_dim != self.dec_hidden:
            errors.append("asr.score='dot' needs 2 * enc_hidden == dec_hidden")
        if not 0 <= self.subsample_layers <= self.enc_layers:
            errors.append("asr.subsample_layers must be between 0 and enc_layers")
        return errors


def encoded_length(S, factor_layers: int = 2):
    """Frames left after ``factor_layers`` rounds of keeping every 2nd frame."""
    S = np.asarray(S)
    for _ in range(factor_layers):
        S = (S + 1) // 2
    return S


@dataclass
class EncoderStates:
    h: Tensor           # (B, S', 2 * enc_hidden)
    mask: np.ndarray    # (B, S') 1.0 on real frames
    lengths: np.ndarray
    keys: Tensor        # scorer-specific projection of h
    bias: np.ndarray    # (B, S') 0 or MASK_VALUE


@dataclass
class AttentionResult:
    weights: Tensor     # (B, S')
    context: Tensor     # (B, 2 * enc_hidden)


def score(h_enc, h_dec, kind: str = "dot", W=None, V=None) -> Tensor:
    """Alignment score between encoder state(s) ``h_enc`` (..., M) and a
    decoder state ``h_dec`` (N,).

    ``dot``: <h_enc, h_dec>; ``bilinear``: h_enc^T W h_dec with W (M, N);
    ``mlp``: V^T tanh(W [h_enc; h_dec]) with W (M + N, A) and V (A,).
    """
    h_enc, h_dec = ag.as_tensor(h_enc), ag.as_tensor(h_dec)
    if kind == "dot":
        if h_enc.shape[-1] != h_dec.shape[-1]:
            raise ag.ShapeError("score[dot]", h_enc.shape, h_dec.shape)
        return (h_enc * h_dec).sum(axis=-1)
    if kind == "bilinear":
        return ag.matmul(ag.matmul(h_enc, W), h_dec)
    if kind == "mlp":
        M = h_enc.shape[-1]
        W = ag.as_tensor(W)
        pre = ag.matmul(h_enc, W[:M]) + ag.matmul(h_dec, W[M:])
        return ag.matmul(ag.tanh(pre), V)
    raise ASRError(f"unknown score kind {kind!r}")


def _as_batch(x, lengths=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
        lengths = [x.shape[1]] if lengths is None else lengths
    if lengths is None:
        lengths = [x.shape[1]] * x.shape[0]
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    if lengths.size != x.shape[0]:
        raise ASRError("one length per utterance is required")
    return x, lengths


def _lengths_mask(lengths, S, dtype=np.float64) -> np.ndarray:
    return (np.arange(S)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)


class ASRModel:
    """P(y | x) over the character vocabulary."""

    def __init__(self, config: ASRConfig | None = None, seed: int = 0):
        self.config = cfg = config or ASRConfig()
        errors = cfg.validate()
        if errors:
            raise ASRError("; ".join(errors))
        rng = np.random.default_rng(seed)
        self.params = p = ModelParameters("asr/1")
        self.proj = Linear(p, "enc.proj", cfg.input_dim, cfg.proj_dim, rng)
        self.enc = []
        n_in = cfg.proj_dim
        for i in range(cfg.enc_layers):
            self.enc.append(BiLSTM(p, f"enc.rnn{i}", n_in, cfg.enc_hidden, rng))
            n_in = 2 * cfg.enc_hidden
        self.embed = Embedding(p, "dec.embed", cfg.num_classes, cfg.emb_dim, rng)
        self.dec = LSTM(p, "dec.rnn", cfg.emb_dim + cfg.enc_dim, cfg.dec_hidden, rng)
        M, N, A = cfg.enc_dim, cfg.dec_hidden, cfg.att_dim
        if cfg.score == "bilinear":
            self.att_W = p.add("att.W", uniform_init(rng, M, (M, N)))
        elif cfg.score == "mlp":
            self.att_W_enc = p.add("att.W_enc", uniform_init(rng, M + N, (M, A)))
            self.att_W_dec = p.add("att.W_dec", uniform_init(rng, M + N, (N, A)))
            self.att_V = p.add("att.V", uniform_init(rng, A, (A,)))
        self.out = Linear(p, "dec.out", N + M, cfg.num_classes, rng)

    # -- encoder -------------------------------------------------------------
    def encode(self, x, lengths=None) -> EncoderStates:
        """``x`` is ``(S, D)`` or padded ``(B, S, D)`` normalized log-mel."""
        cfg = self.config
        x, lengths = _as_batch(x, lengths)
        if x.shape[1] == 0 or lengths.min() < 1:
            raise ASRError("cannot encode an utterance with zero frames")
        if x.shape[2] != cfg.input_dim:
            raise ag.ShapeError("asr.encode", x.shape, (cfg.input_dim,))
        mask = _lengths_mask(lengths, x.shape[1])
        h = ag.leaky_relu(self.proj(Tensor(x)), cfg.leaky_slope)
        first_sub = cfg.enc_layers - cfg.subsample_layers
        for i, layer in enumerate(self.enc):
            if i >= first_sub:
                h = h[:, ::2]
                mask = mask[:, ::2]
                lengths = (lengths + 1) // 2
            h = layer(h, mask)
        bias = np.where(mask > 0, 0.0, MASK_VALUE)
        if cfg.score == "dot":
            keys = h
        elif cfg.score == "bilinear":
            keys = ag.matmul(h, self.att_W)
        else:
            keys = ag.matmul(h, self.att_W_enc)
        return EncoderStates(h, mask, lengths, keys, bias)

    # -- attention -----------------------------------------------------------
    def scores(self, enc: EncoderStates, h_dec: Tensor) -> Tensor:
        cfg = self.config
        B = h_dec.shape[0]
        if cfg.score == "mlp":
            q = ag.reshape(ag.matmul(h_dec, self.att_W_dec), (B, 1, cfg.att_dim))
            return ag.matmul(ag.tanh(enc.keys + q), self.att_V)
        q = ag.reshape(h_dec, (B, cfg.dec_hidden, 1))
        s = ag.matmul(enc.keys, q)
        return ag.reshape(s, s.shape[:2])

    def attend(self, enc: EncoderStates, h_dec) -> AttentionResult:
        h_dec = ag.as_tensor(h_dec)
        if h_dec.ndim == 1:
            h_dec = ag.reshape(h_dec, (1, -1))
        if h_dec.shape[-1] != self.config.dec_hidden:
            raise ag.ShapeError("asr.attend", h_dec.shape, (self.config.dec_hidden,))
        if not np.all(enc.mask.max(axis=1) > 0):
            raise ASRError("attention over an utterance with every position masked")
        return self.attend_scores(enc, self.scores(enc, h_dec))

    @staticmethod
    def attend_scores(enc: EncoderStates, scores: Tensor) -> AttentionResult:
        a = ag.softmax(scores + enc.bias, axis=-1)
        B, S = a.shape
        ctx = ag.matmul(ag.reshape(a, (B, 1, S)), enc.h)
        return AttentionResult(a, ag.reshape(ctx, (ctx.shape[0], ctx.shape[2])))

    def _step(self, enc, emb_t, ctx, state):
        h, c = self.dec.step(ag.concat([emb_t, ctx], axis=-1), state)
        att = self.attend(enc, h)
        logits = self.out(ag.concat([h, att.context], axis=-1))
        return logits, att, (h, c)

    # -- teacher forcing -----------------------------------------------------
    def forward_teacher_forced(self, x, tokens, x_lengths=None, token_lengths=None,
                               return_attention: bool = False):
        """Log-probabilities ``(B, T, C)`` for predicting ``tokens[:, 1:]``
        from the gold prefix; ``tokens`` include both sentinels."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.num_classes):
            raise ASRError(f"token id outside [0, {self.config.num_classes})")
        enc = self.encode(x, x_lengths)
        B, L = tokens.shape
        if B != enc.h.shape[0]:
            raise ASRError("feature and token batch sizes differ")
        T = L - 1
        emb = self.embed(tokens[:, :-1])
        state = self.dec.zero_state(B)
        ctx = Tensor(np.zeros((B, self.config.enc_dim)))
        logits, alignments = [], []
        for t in range(T):
            lg, att, state = self._step(enc, emb[:, t], ctx, state)
            ctx = att.context
            logits.append(lg)
            alignments.append(att.weights)
        logp = ag.log_softmax(ag.stack(logits, axis=1), axis=-1)
        if return_attention:
            return logp, alignments
        return logp

    def loss(self, x, tokens, x_lengths=None, token_lengths=None) -> Tensor:
        """Mean per-token cross-entropy within each utterance, then the mean
        over the batch."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        logp = self.forward_teacher_forced(x, tokens, x_lengths)
        if token_lengths is None:
            token_lengths = np.full(tokens.shape[0], tokens.shape[1])
        return loss_asr(tokens[:, 1:], logp, np.asarray(token_lengths) - 1)

    # -- inference -----------------------------------------------------------
    def _stepper(self, enc: EncoderStates):
        """Numpy step function for the search routines; state is (h, c, ctx)."""
        W_emb = self.embed.table

        def step(state, last):
            h, c, ctx = (Tensor(s) for s in state)
            emb_t = ag.embedding_lookup(W_emb, last)
            logits, att, (h, c) = self._step(enc, emb_t, ctx, (h, c))
            logp = ag.log_softmax(logits, axis=-1).data
            return logp, (h.data, c.data, att.context.data)

        return step

    def _init_state(self, rows: int) -> tuple:
        cfg = self.config
        return (np.zeros((rows, cfg.dec_hidden)), np.zeros((rows, cfg.dec_hidden)),
                np.zeros((rows, cfg.enc_dim)))

    def greedy_decode(self, x, max_len: int = 100, lengths=None) -> list:
        """Arg-max decoding for every utterance in a padded batch.

        Returns one :class:`Hypothesis` per utterance; ``tokens`` end with
        ``</s>`` unless ``max_len`` was hit.
        """
        with no_grad():
            enc = self.encode(x, lengths)
            B = enc.h.shape[0]
            step = self._stepper(enc)
            state = self._init_state(B)
            last = np.full(B, VOCAB.sos)
            tokens = [[] for _ in range(B)]
            totals = np.zeros(B)
            done = np.zeros(B, dtype=bool)
            for _ in range(max_len):
                logp, state = step(state, last)
                nxt = np.argmax(logp, axis=1)
                for b in np.flatnonzero(~done):
                    tokens[b].append(int(nxt[b]))
                    totals[b] += logp[b, nxt[b]]
                done |= nxt == VOCAB.eos
                if done.all():
                    break
                last = nxt
        return [Hypothesis(tokens[b], float(totals[b]), bool(done[b])) for b in range(B)]

    def beam_search_decode(self, x, beam: int = 5, max_len: int = 100,
                           seed_with_greedy: bool = True) -> Hypothesis:
        """Beam search for a single utterance ``(S, D)``."""
        if beam < 1:
            raise ValueError("beam size must be at least 1")
        with no_grad():
            enc = self.encode(x)
            if enc.h.shape[0] != 1:
                raise ASRError("beam search decodes one utterance at a time")
            step = self._stepper(enc)
            seed = None
            if seed_with_greedy:
                seed = greedy_search(step, self._init_state(1), VOCAB.sos, VOCAB.eos, max_len)
            return beam_search(step, self._init_state(1), VOCAB.sos, VOCAB.eos, beam, max_len,
                               seed=seed)

    def decode(self, x, lengths=None, beam: int = 1, max_len: int = 100) -> list:
        """Token lists (without sentinels) for a padded batch."""
        if beam <= 1:
            hyps = self.greedy_decode(x, max_len, lengths)
        else:
            x, lengths = _as_batch(x, lengths)
            hyps = [self.beam_search_decode(x[b, :lengths[b]], beam, max_len)
                    for b in range(x.shape[0])]
        return [[t for t in h.tokens if t not in (VOCAB.eos, VOCAB.sos)] for h in hyps]

    def config_dict(self) -> dict:
        return asdict(self.config)


def loss_asr(targets, logp: Tensor, lengths=None) -> Tensor:
    """``-(1/T) sum_t log p_t[y_t]`` per utterance, averaged over the batch.

    ``logp`` is ``(B, T, C)`` log-probabilities (from a log-softmax, so a
    zero-probability target never yields -inf); ``lengths`` counts the real
    targets of each row.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None]
    B, T = targets.shape
    if logp.shape[:2] != (B, T):
        raise ag.ShapeError("loss_asr", targets.shape, logp.shape)
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths).reshape(-1)
    mask = _lengths_mask(lengths, T, logp.data.dtype)
    picked = logp[np.arange(B)[:, None], np.arange(T)[None, :], targets]
    per_utt = ag.sum(picked * mask, axis=1) * (1.0 / lengths.astype(np.float64))
    return -ag.mean(per_utt)
