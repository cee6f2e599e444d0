"""Direction-of-effect experiments on the toy corpus.

Every seed first trains on paired data only for ``warmup_epochs``.  Each
row, the supervised baseline included, then forks from that shared start
and continues (at ``finetune_lr`` when set) to the same epoch count.  The
table reports medians over seeds and the harness checks that chain
training lowers dev CER without raising dev mel MSE.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .asr import ASRModel
from .chain import ChainTrainer
from .config import RunConfig
from .data import fit_stats, load_manifest, load_utterances, normalize_utterances
from .tts import TTSModel

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("experiment", "alpha", "beta", "gen_mode", "cer", "mel_mse", "raw_mse",
                 "flag_acc", "seeds", "status")


@dataclass
class ExperimentSpec:
    """``alpha``/``beta``/``gen_mode`` of ``None`` mark the paired-only row."""

    name: str
    alpha: float | None = None
    beta: float | None = None
    gen_mode: str | None = None
    beam: int = 5

    @property
    def is_baseline(self) -> bool:
        return self.beta is None


DEFAULT_SPECS = (
    ExperimentSpec("baseline-supervised"),
    ExperimentSpec("chain-greedy-a0.25", 0.25, 1.0, "greedy"),
    ExperimentSpec("chain-greedy-a0.5", 0.5, 1.0, "greedy"),
)
BEAM_SPECS = (
    ExperimentSpec("chain-beam5-a0.25", 0.25, 1.0, "beam", 5),
    ExperimentSpec("chain-beam5-a0.5", 0.5, 1.0, "beam", 5),
)


@dataclass
class RunOutcome:
    cer: float = math.nan
    mel_mse: float = math.nan
    raw_mse: float = math.nan
    flag_acc: float = math.nan
    seconds: float = 0.0
    status: str = "ok"


@dataclass
class MatrixResult:
    specs: list
    seeds: list
    runs: dict = field(default_factory=dict)       # (name, seed) -> RunOutcome
    assertions: list = field(default_factory=list)  # (description, passed)

    def median(self, name: str, metric: str) -> float:
        vals = [getattr(self.runs[(name, s)], metric) for s in self.seeds
                if (name, s) in self.runs and self.runs[(name, s)].status == "ok"]
        return float(np.median(vals)) if vals else math.nan

    def status(self, name: str) -> str:
        cells = [(s, self.runs.get((name, s), RunOutcome(status="missing"))) for s in self.seeds]
        bad = [f"seed {s}: {run.status}" for s, run in cells if run.status != "ok"]
        return "ok" if not bad else "; ".join(bad)

    def rows(self) -> list:
        out = []
        for spec in self.specs:
            cell = lambda v: "" if v is None else str(v)
            out.append({
                "experiment": spec.name, "alpha": cell(spec.alpha), "beta": cell(spec.beta),
                "gen_mode": "" if spec.gen_mode is None else (
                    f"beam {spec.beam}" if spec.gen_mode == "beam" else "greedy"),
                "cer": self.median(spec.name, "cer"),
                "mel_mse": self.median(spec.name, "mel_mse"),
                "raw_mse": self.median(spec.name, "raw_mse"),
                "flag_acc": self.median(spec.name, "flag_acc"),
                "seeds": len(self.seeds), "status": self.status(spec.name)})
        return out

    @property
    def passed(self) -> bool:
        return bool(self.assertions) and all(ok for _, ok in self.assertions)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def to_markdown(self) -> str:
        head = ("| experiment | α | β | gen. mode | CER (%) | mel MSE | raw MSE | flag acc (%) "
                "| seeds | status |")
        lines = [head, "|" + "---|" * len(TABLE_COLUMNS)]
        for r in self.rows():
            lines.append(f"| {r['experiment']} | {r['alpha']} | {r['beta']} | {r['gen_mode']} "
                         f"| {r['cer']:.2f} | {r['mel_mse']:.4f} | {r['raw_mse']:.4f} "
                         f"| {r['flag_acc']:.2f} | {r['seeds']} | {r['status']} |")
        lines.append("")
        for desc, ok in self.assertions:
            lines.append(f"- [{'PASS' if ok else 'FAIL'}] {desc}")
        return "\n".join(lines) + "\n"


def load_corpus(cfg: RunConfig) -> dict:
    """Load and normalize every manifest named in ``cfg.data`` (stats from
    the paired set only)."""
    if "paired" not in cfg.data or "dev" not in cfg.data:
        raise ValueError("data.paired and data.dev are required")
    sets = {k: load_utterances(load_manifest(v), cfg.dsp) for k, v in cfg.data.items()}
    mel_stats, lin_stats = fit_stats(sets["paired"], "paired")
    out = {k: normalize_utterances(v, mel_stats, lin_stats) for k, v in sets.items()}
    out["_stats"] = (mel_stats, lin_stats)
    return out


def build_models(cfg: RunConfig, seed: int) -> tuple[ASRModel, TTSModel]:
    return ASRModel(cfg.asr, seed=2 * seed), TTSModel(cfg.tts, seed=2 * seed + 1)


def _outcome(trainer: ChainTrainer, seconds: float) -> RunOutcome:
    ev = trainer.best_report
    if ev is None:
        return RunOutcome(seconds=seconds, status="no dev evaluation")
    return RunOutcome(ev.cer, ev.mel_mse, ev.raw_mse, ev.flag_accuracy, seconds)


def direction_assertions(result: MatrixResult, base: ExperimentSpec) -> list:
    """Median CER strictly below and median mel MSE at most the baseline's,
    for every chain row.  NaN medians fail."""
    b_cer, b_mel = result.median(base.name, "cer"), result.median(base.name, "mel_mse")
    out = []
    for spec in result.specs:
        if spec.is_baseline:
            continue
        cer, mel = result.median(spec.name, "cer"), result.median(spec.name, "mel_mse")
        out.append((f"{spec.name}: median dev CER {cer:.2f} < baseline {b_cer:.2f}",
                    bool(cer < b_cer)))
        out.append((f"{spec.name}: median dev mel MSE {mel:.4f} <= baseline {b_mel:.4f}",
                    bool(mel <= b_mel)))
    return out


def run_matrix(cfg: RunConfig, specs=DEFAULT_SPECS, seeds=(0, 1, 2), out_dir=None,
               corpus: dict | None = None) -> MatrixResult:
    """Train every experiment for every seed and check the expected ordering.

    Rows fork from a shared paired-only warmup of ``cfg.chain.warmup_epochs``
    epochs and all run to ``cfg.chain.epochs``.  Each row is scored at its
    best dev CER epoch after the fork.  A crashed
    cell is recorded with its error instead of aborting the matrix.
    """
    specs, seeds = list(specs), list(seeds)
    base_specs = [s for s in specs if s.is_baseline]
    if len(base_specs) != 1:
        raise ValueError("exactly one baseline experiment is required")
    base = base_specs[0]
    corpus = corpus if corpus is not None else load_corpus(cfg)
    result = MatrixResult(specs, seeds)
    out = Path(out_dir) if out_dir is not None else None
    warm = cfg.chain.warmup_epochs
    for seed in seeds:
        try:
            asr, tts = build_models(cfg, seed)
            chain_cfg = type(cfg.chain)(**{**cfg.chain.__dict__, "seed": seed, "alpha": 1.0,
                                           "beta": 0.0})
            t0 = time.perf_counter()
            trainer = ChainTrainer(asr, tts, chain_cfg, corpus["paired"],
                                   corpus.get("speech", ()), corpus.get("text", ()),
                                   corpus["dev"])
            trainer.fit(warm)
            warm_seconds = time.perf_counter() - t0
        except Exception as exc:                      # noqa: BLE001 - recorded per cell
            log.exception("seed %d warmup failed", seed)
            for spec in specs:
                result.runs[(spec.name, seed)] = RunOutcome(status=f"crashed: {exc}")
            continue
        for spec in specs:
            try:
                t0 = time.perf_counter()
                if spec.is_baseline:
                    run = trainer.fork()
                else:
                    run = trainer.fork(alpha=spec.alpha, beta=spec.beta, gen_mode=spec.gen_mode,
                                       beam=spec.beam)
                # score only epochs this row trained itself
                run.reset_best()
                if out is not None:
                    run.set_output(out / spec.name / str(seed))
                run.fit()
                result.runs[(spec.name, seed)] = _outcome(run, warm_seconds
                                                          + time.perf_counter() - t0)
            except Exception as exc:                  # noqa: BLE001
                log.exception("%s seed %d failed", spec.name, seed)
                result.runs[(spec.name, seed)] = RunOutcome(status=f"crashed: {exc}")
            log.info("%s seed %d: %s", spec.name, seed, result.runs[(spec.name, seed)])
    result.assertions = direction_assertions(result, base)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.md").write_text(result.to_markdown(), encoding="utf-8")
        (out / "table.csv").write_text(result.to_csv(), encoding="utf-8")
    return result
