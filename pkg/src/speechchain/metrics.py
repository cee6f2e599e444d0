"""Evaluation metrics: CER, spectrogram MSE and end-flag accuracy."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


class MetricError(ValueError):
    pass


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs (two-row dynamic programme)."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def cer(hypothesis: str, reference: str) -> float:
    """Character edit distance divided by the reference length."""
    if not reference:
        raise MetricError("reference must be non-empty")
    return edit_distance(hypothesis, reference) / len(reference)


def corpus_cer(hypotheses, references) -> tuple[float, float]:
    """``(micro, macro)`` CER in percent.

    Micro is total edits over total reference characters; macro is the mean
    of per-utterance rates.
    """
    hypotheses, references = list(hypotheses), list(references)
    if len(hypotheses) != len(references):
        raise MetricError("hypothesis and reference counts differ")
    if not references:
        raise MetricError("no utterances to score")
    edits = [edit_distance(h, r) for h, r in zip(hypotheses, references)]
    lens = [len(r) for r in references]
    if min(lens) == 0:
        raise MetricError("reference must be non-empty")
    micro = 100.0 * sum(edits) / sum(lens)
    macro = 100.0 * float(np.mean([e / n for e, n in zip(edits, lens)]))
    return micro, macro


def spectrogram_mse(predicted, gold) -> tuple[float, float]:
    """``(macro, micro)`` mean squared error over utterance lists.

    Macro averages each utterance's frame-and-dimension mean; micro pools
    every element.  Single arrays are treated as a one-utterance list.
    """
    if isinstance(predicted, np.ndarray):
        predicted, gold = [predicted], [gold]
    predicted, gold = list(predicted), list(gold)
    if len(predicted) != len(gold) or not predicted:
        raise MetricError("need equally many predicted and gold spectrograms")
    per, total, count = [], 0.0, 0
    for p, g in zip(predicted, gold):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
        se = (p - g) ** 2
        per.append(float(se.mean()))
        total += float(se.sum())
        count += se.size
    return float(np.mean(per)), total / count


def end_flag_accuracy(predicted, gold) -> float:
    """Percent of frames where ``predicted > 0.5`` agrees with the gold flag."""
    if isinstance(predicted, np.ndarray) and predicted.ndim == 1:
        predicted, gold = [predicted], [gold]
    hits = frames = 0
    for p, g in zip(predicted, gold, strict=True):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise MetricError(f"flag length mismatch {p.shape} vs {g.shape}")
        hits += int(np.sum((p > 0.5) == (g > 0.5)))
        frames += p.size
    if frames == 0:
        raise MetricError("no frames to score")
    return 100.0 * hits / frames


@dataclass
class EvalReport:
    cer: float
    mel_mse: float
    raw_mse: float
    flag_accuracy: float
    utterances: int
    cer_macro: float = float("nan")
    mel_mse_micro: float = float("nan")
    raw_mse_micro: float = float("nan")

    def __post_init__(self):
        if self.cer < 0:
            raise MetricError("CER cannot be negative")
        if not 0.0 <= self.flag_accuracy <= 100.0 and not np.isnan(self.flag_accuracy):
            raise MetricError("flag accuracy must be within [0, 100]")

    @classmethod
    def columns(cls) -> list:
        return [f.name for f in fields(cls)]

    def csv_row(self) -> list:
        return [repr(getattr(self, c)) if isinstance(getattr(self, c), float)
                else str(getattr(self, c)) for c in self.columns()]

    def summary(self) -> str:
        return "\n".join([
            f"utterances      {self.utterances}",
            f"CER (%)         {self.cer:.2f}  (macro {self.cer_macro:.2f})",
            f"mel MSE         {self.mel_mse:.4f}  (micro {self.mel_mse_micro:.4f})",
            f"raw MSE         {self.raw_mse:.4f}  (micro {self.raw_mse_micro:.4f})",
            f"end-flag acc (%) {self.flag_accuracy:.2f}",
        ])
