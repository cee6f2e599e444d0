"""scikit-learn style wrappers over the functional modules.

Sequences are passed as lists (one ``(S, D)`` array or string per
utterance) because lengths differ.  Hyperparameters are constructor
arguments, fitted state ends in ``_``, and ``get_params``/``set_params``
come from :class:`sklearn.base.BaseEstimator`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .asr import ASRConfig, ASRModel
from .chain import ChainConfig, ChainTrainer
from .data import Utterance, make_batches
from .dsp import DSPConfig, FeatureSequence, LOG_MEL, Waveform, extract_features, fit_normalization
from .metrics import corpus_cer
from .optim import OptimizerState, optimizer_step
from .text import decode, encode, normalize_text
from .tts import TTSConfig, TTSModel


def check_sequences(X, n_features=None, name="X") -> list:
    """Validate a list of 2-D finite float arrays with a common width."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    out = [check_array(x, dtype=np.float64, ensure_2d=True) for x in X]
    widths = {x.shape[1] for x in out}
    if len(widths) != 1:
        raise ValueError(f"{name} sequences have differing widths {sorted(widths)}")
    if n_features is not None and widths != {n_features}:
        raise ValueError(f"{name} has {widths.pop()} features, expected {n_features}")
    return out


def check_texts(y, name="y") -> list:
    if isinstance(y, str):
        y = [y]
    if len(y) == 0:
        raise ValueError(f"{name} is empty")
    return [normalize_text(t) for t in y]


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Waveform samples -> log-mel (``output="mel"``), log-magnitude
    (``"linear"``) or both as a tuple (``"both"``)."""

    def __init__(self, sample_rate=16000, frame_ms=50.0, shift_ms=12.5, fft_size=2048,
                 n_mels=40, preemphasis=0.97, output="mel"):
        self.sample_rate = sample_rate
        self.frame_ms = frame_ms
        self.shift_ms = shift_ms
        self.fft_size = fft_size
        self.n_mels = n_mels
        self.preemphasis = preemphasis
        self.output = output

    def _config(self) -> DSPConfig:
        return DSPConfig(self.sample_rate, self.frame_ms, self.shift_ms, self.fft_size,
                         self.n_mels, self.preemphasis)

    def fit(self, X=None, y=None):
        errors = self._config().validate()
        if self.output not in ("mel", "linear", "both"):
            errors.append("output must be 'mel', 'linear' or 'both'")
        if errors:
            raise ValueError("; ".join(errors))
        self.config_ = self._config()
        return self

    def transform(self, X) -> list:
        if not hasattr(self, "config_"):
            self.fit()
        if isinstance(X, np.ndarray) and X.ndim == 1:
            X = [X]
        out = []
        for x in X:
            x = check_array(np.asarray(x)[None, :], dtype=np.float64)[0]
            mel, lin = extract_features(Waveform(x, self.sample_rate), self.config_)
            out.append({"mel": mel.frames, "linear": lin.frames,
                        "both": (mel.frames, lin.frames)}[self.output])
        return out


class FeatureNormalizer(TransformerMixin, BaseEstimator):
    """Per-dimension standardization fitted over every frame."""

    def __init__(self, kind=LOG_MEL):
        self.kind = kind

    def fit(self, X, y=None):
        X = check_sequences(X)
        self.stats_ = fit_normalization(FeatureSequence(x, self.kind) for x in X)
        self.n_features_in_ = X[0].shape[1]
        return self

    def transform(self, X) -> list:
        check_is_fitted(self, "stats_")
        return [self.stats_.apply(FeatureSequence(x, self.kind)).frames
                for x in check_sequences(X, self.n_features_in_)]

    def inverse_transform(self, X) -> list:
        check_is_fitted(self, "stats_")
        return [self.stats_.invert(FeatureSequence(x, self.kind, True)).frames
                for x in check_sequences(X, self.n_features_in_)]


def _train_loop(params, loss_fn, utts, epochs, batch_size, lr, seed, r=1) -> list:
    rng = np.random.default_rng(seed)
    opt = OptimizerState(lr=lr)
    history = []
    for _ in range(epochs):
        losses = []
        for b in make_batches(utts, batch_size, rng, True, r):
            loss = loss_fn(b)
            loss.backward()
            optimizer_step(params, opt, allow_missing=True)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return history


class SpeechRecognizer(BaseEstimator):
    """Attention encoder-decoder: ``fit(features, transcripts)``, ``predict(features)``."""

    def __init__(self, proj_dim=64, enc_hidden=48, emb_dim=32, dec_hidden=96, att_dim=64,
                 scorer="mlp", epochs=10, batch_size=10, lr=3e-3, beam=1, max_len=100,
                 random_state=0):
        self.proj_dim = proj_dim
        self.enc_hidden = enc_hidden
        self.emb_dim = emb_dim
        self.dec_hidden = dec_hidden
        self.att_dim = att_dim
        self.scorer = scorer
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beam = beam
        self.max_len = max_len
        self.random_state = random_state

    def fit(self, X, y):
        X = check_sequences(X)
        y = check_texts(y)
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        cfg = ASRConfig(input_dim=X[0].shape[1], proj_dim=self.proj_dim,
                        enc_hidden=self.enc_hidden, emb_dim=self.emb_dim,
                        dec_hidden=self.dec_hidden, score=self.scorer, att_dim=self.att_dim)
        errors = cfg.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.model_ = ASRModel(cfg, seed=self.random_state)
        self.n_features_in_ = X[0].shape[1]
        utts = [Utterance(str(i), x, np.zeros((len(x), 1)), encode(t)) for i, (x, t)
                in enumerate(zip(X, y))]
        self.loss_curve_ = _train_loop(
            self.model_.params,
            lambda b: self.model_.loss(b.mel, b.tokens, b.frame_lengths, b.token_lengths),
            utts, self.epochs, self.batch_size, self.lr, self.random_state)
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.n_features_in_)
        return [decode(self.model_.decode(x, beam=self.beam, max_len=self.max_len)[0])
                for x in X]

    def score(self, X, y) -> float:
        """``1 - CER`` (fraction), so larger is better."""
        micro, _ = corpus_cer(self.predict(X), check_texts(y))
        return 1.0 - micro / 100.0


class SpeechSynthesizer(BaseEstimator):
    """Tacotron-style regressor: ``fit(texts, [(mel, linear), ...])``,
    ``predict(texts)`` returns ``(mel, linear)`` pairs."""

    def __init__(self, emb_dim=64, dec_hidden=96, reduction=4, epochs=10, batch_size=10,
                 lr=3e-3, max_frames=400, random_state=0):
        self.emb_dim = emb_dim
        self.dec_hidden = dec_hidden
        self.reduction = reduction
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.max_frames = max_frames
        self.random_state = random_state

    def fit(self, X, y):
        texts = check_texts(X, "X")
        if len(y) != len(texts):
            raise ValueError("X and y have different lengths")
        mels = check_sequences([m for m, _ in y], name="mel")
        lins = check_sequences([l for _, l in y], name="linear")
        cfg = TTSConfig(emb_dim=self.emb_dim, prenet=(self.emb_dim, self.emb_dim),
                        bank_channels=32, enc_projections=(self.emb_dim, self.emb_dim),
                        highway_dim=self.emb_dim, enc_rnn=32, dec_prenet=(64, 64),
                        dec_hidden=self.dec_hidden, reduction=self.reduction,
                        mel_dim=mels[0].shape[1], linear_dim=lins[0].shape[1],
                        post_channels=32, post_projections=(64, mels[0].shape[1]), post_rnn=32)
        errors = cfg.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.model_ = TTSModel(cfg, seed=self.random_state)
        utts = [Utterance(str(i), m, l, encode(t)) for i, (t, m, l)
                in enumerate(zip(texts, mels, lins))]
        self.loss_curve_ = _train_loop(
            self.model_.params,
            lambda b: self.model_.loss(b.tokens, b.mel, b.linear, b.token_lengths,
                                       b.frame_lengths),
            utts, self.epochs, self.batch_size, self.lr, self.random_state, self.reduction)
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "model_")
        out = []
        for t in check_texts(X, "X"):
            res = self.model_.synthesize(encode(t)[None], max_frames=self.max_frames)[0]
            out.append((res.mel, res.linear))
        return out


class SpeechChain(BaseEstimator):
    """Joint ASR/TTS training on paired plus optional unpaired data.

    ``fit(X, y, X_speech=None, y_text=None, X_dev=None, y_dev=None)`` where
    each ``X`` item is a ``(mel, linear)`` pair of normalized features.
    ``predict`` transcribes mel sequences.
    """

    def __init__(self, asr=None, tts=None, alpha=0.5, beta=1.0, gen_mode="greedy", beam=5,
                 epochs=20, warmup_epochs=0, batch_size=10, lr=3e-3, random_state=0):
        self.asr = asr
        self.tts = tts
        self.alpha = alpha
        self.beta = beta
        self.gen_mode = gen_mode
        self.beam = beam
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    @staticmethod
    def _utts(X, y=None, prefix="u") -> list:
        out = []
        for i, item in enumerate(X if X is not None else []):
            if isinstance(item, str):
                out.append(Utterance(f"{prefix}{i}", tokens=encode(normalize_text(item))))
                continue
            mel, lin = (check_array(a, dtype=np.float64) for a in item)
            toks = encode(normalize_text(y[i])) if y is not None else None
            out.append(Utterance(f"{prefix}{i}", mel, lin, toks))
        return out

    def fit(self, X, y, X_speech=None, y_text=None, X_dev=None, y_dev=None):
        y = check_texts(y)
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        paired = self._utts(X, y, "p")
        speech = self._utts(X_speech, None, "s")
        text = self._utts(y_text, None, "t")
        dev = self._utts(X_dev, y_dev, "d") if X_dev is not None else None
        mel_dim, lin_dim = paired[0].mel.shape[1], paired[0].linear.shape[1]
        asr_cfg = self.asr or ASRConfig(input_dim=mel_dim, proj_dim=64, enc_hidden=48,
                                        emb_dim=32, dec_hidden=96, att_dim=64)
        tts_cfg = self.tts or TTSConfig(emb_dim=64, prenet=(64, 64), bank_channels=32,
                                        enc_projections=(64, 64), highway_dim=64, enc_rnn=32,
                                        dec_prenet=(64, 64), dec_hidden=96, mel_dim=mel_dim,
                                        linear_dim=lin_dim, post_channels=32,
                                        post_projections=(64, mel_dim), post_rnn=32)
        cfg = ChainConfig(alpha=self.alpha, beta=self.beta if speech and text else 0.0,
                          gen_mode=self.gen_mode, beam=self.beam, batch_size=self.batch_size,
                          unpaired_batch_size=self.batch_size, lr=self.lr,
                          seed=self.random_state, epochs=self.epochs,
                          warmup_epochs=self.warmup_epochs)
        self.asr_ = ASRModel(asr_cfg, seed=2 * self.random_state)
        self.tts_ = TTSModel(tts_cfg, seed=2 * self.random_state + 1)
        trainer = ChainTrainer(self.asr_, self.tts_, cfg, paired, speech, text, dev)
        self.result_ = trainer.fit()
        trainer.restore_best()
        self.history_ = self.result_.history
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "asr_")
        return [decode(self.asr_.decode(x, max_len=100)[0]) for x in check_sequences(X)]

