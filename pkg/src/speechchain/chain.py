"""Closed-loop training of the recognizer and the synthesizer.

Each iteration takes one paired batch (teacher-forced losses for both
models) and, when ``beta > 0``, one text-only and one speech-only batch.
Text goes TTS -> ASR: synthesized mel frames are fed to the recognizer as
fixed inputs.  Speech goes ASR -> TTS: the decoded transcript conditions
the synthesizer, which must reconstruct the original frames.  Generated
intermediates never carry gradient, so each model only learns from its own
loss terms.  The weighted sum ``alpha * (paired) + beta * (unpaired)`` is
back-propagated once and both optimizers step.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .asr import ASRModel
from .autograd import Tensor, no_grad
from .data import Batch, Utterance, collate, make_batches
from .metrics import EvalReport, corpus_cer, end_flag_accuracy, spectrogram_mse
from .optim import OptimizerState, optimizer_step
from .text import VOCAB, decode
from .tts import TTSModel, end_flags, padded_length

log = logging.getLogger(__name__)

GEN_MODES = ("greedy", "beam")
LOG_COLUMNS = ("step", "epoch", "asr_p", "tts_p", "asr_u", "tts_u", "loss", "dev_cer",
               "dev_cer_macro", "dev_mel_mse", "dev_raw_mse", "dev_flag_acc",
               "skipped_u", "aborted")


class ChainConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class NumericError(FloatingPointError):
    pass


@dataclass
class ChainConfig:
    alpha: float = 1.0
    beta: float = 0.0
    gen_mode: str = "greedy"
    beam: int = 5
    batch_size: int = 20
    unpaired_batch_size: int = 20
    eval_batch_size: int = 50
    max_frames: int | None = None
    max_tokens: int | None = None
    synth_max_frames: int = 400
    decode_max_len: int = 100
    optimizer: str = "adam"
    lr: float = 1e-3
    clip_norm: float | None = 5.0
    seed: int = 0
    epochs: int = 50
    warmup_epochs: int = 0
    patience: int = 10
    # learning rate from ``warmup_epochs`` on; None keeps ``lr``
    finetune_lr: float | None = None

    def validate(self) -> list:
        errors = []
        if self.alpha < 0 or self.beta < 0:
            errors.append("chain.alpha and chain.beta must be >= 0")
        elif self.alpha == 0 and self.beta == 0:
            errors.append("chain.alpha and chain.beta cannot both be 0")
        if self.gen_mode not in GEN_MODES:
            errors.append(f"chain.gen_mode must be one of {GEN_MODES}")
        if self.beam < 1:
            errors.append("chain.beam must be >= 1")
        for name in ("batch_size", "unpaired_batch_size", "eval_batch_size", "synth_max_frames",
                     "decode_max_len", "epochs"):
            if getattr(self, name) < 1:
                errors.append(f"chain.{name} must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            errors.append("chain.optimizer must be 'adam' or 'sgd'")
        if self.lr <= 0 or (self.finetune_lr is not None and self.finetune_lr <= 0):
            errors.append("chain.lr and chain.finetune_lr must be positive")
        if self.warmup_epochs < 0 or self.patience < 1:
            errors.append("chain.warmup_epochs must be >= 0 and chain.patience >= 1")
        return errors


@dataclass
class LossReport:
    asr_p: float
    tts_p: float
    asr_u: float
    tts_u: float
    loss: float
    step: int
    aborted: bool = False
    skipped: int = 0


def combine_losses(alpha: float, beta: float, asr_p: float, tts_p: float, asr_u: float,
                   tts_u: float) -> float:
    return alpha * (tts_p + asr_p) + beta * (tts_u + asr_u)


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------

def supervised_step(asr: ASRModel, tts: TTSModel, batch: Batch) -> tuple[Tensor, Tensor]:
    """Teacher-forced ASR and TTS losses on the same paired batch."""
    if batch is None or len(batch) == 0 or batch.mel is None or batch.tokens is None:
        raise ValueError("supervised step needs a non-empty paired batch")
    l_asr = asr.loss(batch.mel, batch.tokens, batch.frame_lengths, batch.token_lengths)
    l_tts = tts.loss(batch.tokens, batch.mel, batch.linear, batch.token_lengths,
                     batch.frame_lengths, batch.speakers if tts.config.uses_speakers else None)
    return l_asr, l_tts


def unsupervised_text_step(asr: ASRModel, tts: TTSModel, batch: Batch,
                           max_frames: int = 400) -> tuple[Tensor, dict]:
    """Synthesize speech for text-only ``batch`` and score the ASR on it."""
    if batch is None or len(batch) == 0 or batch.tokens is None:
        raise ValueError("text step needs a non-empty text batch")
    spk = batch.speakers if tts.config.uses_speakers else None
    outs = tts.synthesize(batch.tokens, batch.token_lengths, spk, max_frames=max_frames)
    truncated = sum(o.hit_max for o in outs)
    if truncated:
        log.info("%d synthesized utterance(s) hit max_frames=%d", truncated, max_frames)
    gen = [Utterance(uid, o.mel, np.zeros((o.mel.shape[0], 1)), t[:n])
           for uid, o, t, n in zip(batch.ids, outs, batch.tokens, batch.token_lengths)]
    b = collate(gen)
    loss = asr.loss(b.mel, b.tokens, b.frame_lengths, b.token_lengths)
    return loss, {"truncated": truncated}


def transcribe_tokens(asr: ASRModel, mel, lengths, gen_mode: str = "greedy", beam: int = 5,
                      max_len: int = 100) -> list:
    """Token ids (sentinels stripped) for each utterance of a padded batch."""
    return asr.decode(mel, lengths, beam=beam if gen_mode == "beam" else 1, max_len=max_len)


def unsupervised_speech_step(asr: ASRModel, tts: TTSModel, batch: Batch,
                             gen_mode: str = "greedy", beam: int = 5,
                             max_len: int = 100) -> tuple[Tensor | None, dict]:
    """Transcribe speech-only ``batch`` and score the TTS reconstruction.

    Utterances whose transcript decodes to nothing are skipped; if all are
    skipped the loss is ``None``.
    """
    if batch is None or len(batch) == 0 or batch.mel is None:
        raise ValueError("speech step needs a non-empty speech batch")
    hyps = transcribe_tokens(asr, batch.mel, batch.frame_lengths, gen_mode, beam, max_len)
    keep = [i for i, h in enumerate(hyps) if h]
    skipped = len(hyps) - len(keep)
    if not keep:
        return None, {"skipped": skipped}
    r = tts.config.reduction
    gen = []
    for i in keep:
        n = int(batch.frame_lengths[i])
        toks = np.asarray([VOCAB.sos] + list(hyps[i]) + [VOCAB.eos], dtype=np.int64)
        gen.append(Utterance(batch.ids[i], batch.mel[i, :n], batch.linear[i, :n], toks,
                             speaker=int(batch.speakers[i])))
    b = collate(gen, r)
    loss = tts.loss(b.tokens, b.mel, b.linear, b.token_lengths, b.frame_lengths,
                    b.speakers if tts.config.uses_speakers else None)
    return loss, {"skipped": skipped}


def _value(t) -> float:
    return 0.0 if t is None else float(t.data)


def combine_and_update(terms: dict, alpha: float, beta: float, asr: ASRModel, tts: TTSModel,
                       opt_asr: OptimizerState, opt_tts: OptimizerState,
                       step: int = 0) -> LossReport:
    """Weight the four loss terms, back-propagate once and step both models.

    ``terms`` maps ``asr_p``, ``tts_p``, ``asr_u``, ``tts_u`` to a scalar
    Tensor or ``None`` (phase disabled).  A non-finite combined loss or
    gradient aborts the step: gradients are dropped and parameters left as
    they were.
    """
    vals = {k: _value(terms.get(k)) for k in ("asr_p", "tts_p", "asr_u", "tts_u")}
    total = combine_losses(alpha, beta, **vals)
    report = LossReport(vals["asr_p"], vals["tts_p"], vals["asr_u"], vals["tts_u"], total, step)
    weighted = []
    for key, w in (("tts_p", alpha), ("asr_p", alpha), ("tts_u", beta), ("asr_u", beta)):
        t = terms.get(key)
        if t is not None and w != 0.0:
            weighted.append(t if w == 1.0 else t * w)
    if not math.isfinite(total):
        return _abort(report, asr, tts, "non-finite loss")
    if not weighted:
        return report
    L = weighted[0]
    for t in weighted[1:]:
        L = L + t
    L.backward()
    for model in (asr, tts):
        for _, p in model.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                return _abort(report, asr, tts, "non-finite gradient")
    saved = (asr.params.snapshot(), tts.params.snapshot(),
             copy.deepcopy(opt_asr), copy.deepcopy(opt_tts))
    optimizer_step(asr.params, opt_asr, allow_missing=True)
    optimizer_step(tts.params, opt_tts, allow_missing=True)
    for model in (asr, tts):
        if not all(np.all(np.isfinite(p.data)) for _, p in model.params.items()):
            asr.params.restore(saved[0])
            tts.params.restore(saved[1])
            opt_asr.__dict__.update(saved[2].__dict__)
            opt_tts.__dict__.update(saved[3].__dict__)
            return _abort(report, asr, tts, "update produced non-finite parameters")
    return report


def _abort(report: LossReport, asr, tts, why: str) -> LossReport:
    log.warning("step %d aborted: %s", report.step, why)
    asr.params.zero_grad()
    tts.params.zero_grad()
    report.aborted = True
    return report


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(asr: ASRModel, tts: TTSModel, utts, batch_size: int = 50,
             max_len: int = 100, gen_mode: str = "greedy", beam: int = 5) -> EvalReport:
    """Decode CER plus teacher-forced spectrogram MSE and end-flag accuracy."""
    utts = list(utts)
    if not utts:
        raise ValueError("nothing to evaluate")
    r = tts.config.reduction
    hyps, refs = [], []
    mel_p, mel_g, lin_p, lin_g, fl_p, fl_g = [], [], [], [], [], []
    for b in make_batches(utts, batch_size, seed=None, sort_by_length=True, r=r):
        toks = transcribe_tokens(asr, b.mel, b.frame_lengths, gen_mode, beam, max_len)
        hyps.extend(decode(t) for t in toks)
        refs.extend(decode(t) for t in b.tokens)
        with no_grad():
            out = tts.forward_teacher_forced(b.tokens, b.mel, b.linear, b.token_lengths,
                                             b.frame_lengths,
                                             b.speakers if tts.config.uses_speakers else None)
        for i in range(len(b)):
            n = int(b.frame_lengths[i])
            g = padded_length(n, r)
            mel_p.append(out.mel.data[i, :n])
            mel_g.append(b.mel[i, :n])
            lin_p.append(out.linear.data[i, :n])
            lin_g.append(b.linear[i, :n])
            fl_p.append(out.flags.data[i, :g])
            fl_g.append(end_flags(n, r))
    micro, macro = corpus_cer(hyps, refs)
    mel_macro, mel_micro = spectrogram_mse(mel_p, mel_g)
    lin_macro, lin_micro = spectrogram_mse(lin_p, lin_g)
    return EvalReport(micro, mel_macro, lin_macro, end_flag_accuracy(fl_p, fl_g), len(utts),
                      macro, mel_micro, lin_micro)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class _Cycle:
    """Endless stream of batches, reshuffled on every pass."""

    def __init__(self, utts, batch_size: int, rng: np.random.Generator, r: int = 1,
                 max_frames=None, max_tokens=None):
        self.utts = list(utts)
        self.batch_size = batch_size
        self.rng = rng
        self.r = r
        self.limits = (max_frames, max_tokens)
        self.queue: list = []

    def next(self) -> Batch:
        if not self.queue:
            plan = make_batches(self.utts, self.batch_size, self.rng, True, self.r, *self.limits)
            if not len(plan):
                raise ValueError("unpaired set has no usable utterances")
            self.queue = list(plan)[::-1]
        return self.queue.pop()


@dataclass
class TrainResult:
    best_epoch: int
    best_cer: float
    best_report: EvalReport | None
    history: list
    stopped_early: bool


class ChainTrainer:
    """Stateful trainer; ``copy.deepcopy`` forks a run (models, optimizer
    state and data order included)."""

    def __init__(self, asr: ASRModel, tts: TTSModel, config: ChainConfig, paired,
                 speech=(), text=(), dev=None, out_dir=None):
        errors = config.validate()
        self.paired = list(paired)
        self.speech = list(speech)
        self.text = list(text)
        if not self.paired and config.alpha > 0:
            errors.append("paired set is empty but alpha > 0")
        if config.beta > 0 and (not self.speech or not self.text):
            errors.append("beta > 0 needs non-empty speech-only and text-only sets")
        if errors:
            raise ChainConfigError(errors)
        self.asr, self.tts, self.config = asr, tts, config
        self.dev = list(dev) if dev is not None else []
        r = tts.config.reduction
        ss = np.random.SeedSequence(config.seed).spawn(3)
        self.rng = np.random.default_rng(ss[0])
        self.speech_stream = _Cycle(self.speech, config.unpaired_batch_size,
                                    np.random.default_rng(ss[1]), r, config.max_frames)
        self.text_stream = _Cycle(self.text, config.unpaired_batch_size,
                                  np.random.default_rng(ss[2]), 1, None, config.max_tokens)
        kw = dict(kind=config.optimizer, lr=config.lr, clip_norm=config.clip_norm)
        self.opt_asr, self.opt_tts = OptimizerState(**kw), OptimizerState(**kw)
        self.epoch = 0
        self.step = 0
        self.history: list = []
        self.best_cer = math.inf
        self.best_epoch = -1
        self.best_report = None
        self.best_state = None
        self.bad_epochs = 0
        self.out_dir = None
        if out_dir is not None:
            self.set_output(out_dir)

    # -- output --------------------------------------------------------------
    def set_output(self, out_dir) -> None:
        """Direct logs and checkpoints to ``out_dir``; rows so far are rewritten."""
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with (self.out_dir / "metrics.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in self.history:
                w.writerow(_fmt(row))
        if self.best_state is not None:
            self._save_best()

    def _append(self, row: dict) -> None:
        self.history.append(row)
        if self.out_dir is not None:
            with (self.out_dir / "metrics.csv").open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(_fmt(row))

    def _save_best(self) -> None:
        from .params import dumps
        (self.out_dir / "asr_best.ckpt").write_bytes(dumps(self.asr.params.tag, self.best_state[0]))
        (self.out_dir / "tts_best.ckpt").write_bytes(dumps(self.tts.params.tag, self.best_state[1]))

    # -- loop ----------------------------------------------------------------
    def chain_active(self) -> bool:
        return self.config.beta > 0 and self.epoch >= self.config.warmup_epochs

    def train_step(self, batch: Batch) -> LossReport:
        cfg = self.config
        terms = {}
        if cfg.alpha > 0:
            terms["asr_p"], terms["tts_p"] = supervised_step(self.asr, self.tts, batch)
        skipped = 0
        beta = cfg.beta if self.chain_active() else 0.0
        if beta > 0:
            terms["asr_u"], _ = unsupervised_text_step(self.asr, self.tts, self.text_stream.next(),
                                                       cfg.synth_max_frames)
            terms["tts_u"], info = unsupervised_speech_step(
                self.asr, self.tts, self.speech_stream.next(), cfg.gen_mode, cfg.beam,
                cfg.decode_max_len)
            skipped = info["skipped"]
        report = combine_and_update(terms, cfg.alpha, beta, self.asr, self.tts, self.opt_asr,
                                    self.opt_tts, self.step)
        report.skipped = skipped
        self.step += 1
        return report

    def current_lr(self) -> float:
        cfg = self.config
        if cfg.finetune_lr is not None and self.epoch >= cfg.warmup_epochs:
            return cfg.finetune_lr
        return cfg.lr

    def run_epoch(self) -> dict:
        cfg = self.config
        self.opt_asr.lr = self.opt_tts.lr = self.current_lr()
        plan = make_batches(self.paired, cfg.batch_size, self.rng, True,
                            self.tts.config.reduction, cfg.max_frames, cfg.max_tokens)
        reports = [self.train_step(b) for b in plan]
        good = [r for r in reports if not r.aborted]
        mean = {k: (float(np.mean([getattr(r, k) for r in good])) if good else math.nan)
                for k in ("asr_p", "tts_p", "asr_u", "tts_u", "loss")}
        row = {"step": self.step, "epoch": self.epoch, **mean}
        if self.dev:
            ev = evaluate(self.asr, self.tts, self.dev, cfg.eval_batch_size, cfg.decode_max_len)
            row.update(dev_cer=ev.cer, dev_cer_macro=ev.cer_macro, dev_mel_mse=ev.mel_mse,
                       dev_raw_mse=ev.raw_mse, dev_flag_acc=ev.flag_accuracy)
            if ev.cer < self.best_cer:
                self.best_cer, self.best_epoch, self.best_report = ev.cer, self.epoch, ev
                self.best_state = (self.asr.params.snapshot(), self.tts.params.snapshot())
                self.bad_epochs = 0
                if self.out_dir is not None:
                    self._save_best()
            else:
                self.bad_epochs += 1
        else:
            row.update(dev_cer=math.nan, dev_cer_macro=math.nan, dev_mel_mse=math.nan,
                       dev_raw_mse=math.nan, dev_flag_acc=math.nan)
        row["skipped_u"] = sum(getattr(r, "skipped", 0) for r in reports)
        row["aborted"] = sum(r.aborted for r in reports)
        self._append(row)
        log.info("epoch %d step %d loss %.4f dev CER %.2f", self.epoch, self.step, row["loss"],
                 row["dev_cer"])
        self.epoch += 1
        return row

    def fit(self, epochs: int | None = None) -> TrainResult:
        """Run until ``epochs`` total epochs or the patience runs out."""
        target = self.config.epochs if epochs is None else epochs
        stopped = False
        while self.epoch < target:
            self.run_epoch()
            if self.dev and self.bad_epochs >= self.config.patience:
                stopped = True
                log.info("early stop after %d epochs without dev CER gain", self.bad_epochs)
                break
        return self.result(stopped)

    def result(self, stopped: bool = False) -> TrainResult:
        return TrainResult(self.best_epoch, self.best_cer, self.best_report,
                           list(self.history), stopped)

    def fork(self, **changes) -> "ChainTrainer":
        """Deep copy with ``config`` fields replaced (e.g. ``alpha``, ``beta``)."""
        other = copy.deepcopy(self)
        other.config = replace(self.config, **changes)
        errors = other.config.validate()
        if other.config.beta > 0 and (not other.speech or not other.text):
            errors.append("beta > 0 needs non-empty speech-only and text-only sets")
        if errors:
            raise ChainConfigError(errors)
        for opt in (other.opt_asr, other.opt_tts):
            opt.lr, opt.clip_norm = other.current_lr(), other.config.clip_norm
        other.out_dir = None
        return other

    def reset_best(self) -> None:
        """Forget the best-so-far state so selection only sees later epochs."""
        self.best_cer, self.best_epoch = math.inf, -1
        self.best_report = self.best_state = None
        self.bad_epochs = 0

    def restore_best(self) -> None:
        if self.best_state is not None:
            self.asr.params.restore(self.best_state[0])
            self.tts.params.restore(self.best_state[1])


def _fmt(row: dict) -> list:
    return [repr(row.get(c)) if isinstance(row.get(c), float) else str(row.get(c, ""))
            for c in LOG_COLUMNS]


def train(asr: ASRModel, tts: TTSModel, paired, config: ChainConfig, text=(), speech=(),
          dev=None, out_dir=None) -> TrainResult:
    """Train to completion; parameters end at the best-by-dev-CER state."""
    trainer = ChainTrainer(asr, tts, config, paired, speech, text, dev, out_dir)
    result = trainer.fit()
    trainer.restore_best()
    return result


def config_dict(cfg: ChainConfig) -> dict:
    return asdict(cfg)
