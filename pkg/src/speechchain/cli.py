"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.  Output directories are never overwritten without ``--force``.

Training output layout (``--out``)::

    config.json        fully resolved configuration
    mel_stats.json     normalization statistics (paired set)
    lin_stats.json
    metrics.csv        one row per epoch
    asr_best.ckpt      best-by-dev-CER parameters
    tts_best.ckpt
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .bench import BEAM_SPECS, DEFAULT_SPECS, build_models, load_corpus, run_matrix
from .chain import ChainConfigError, ChainTrainer, NumericError, evaluate
from .config import ConfigError
from .data import (DataError, Manifest, ManifestRow, fit_stats, load_manifest, load_utterances,
                   normalize_utterances, read_pair, write_manifest)
from .dsp import (DSPError, FeatureSequence, NormalizationStats, LOG_MAG, LOG_MEL, griffin_lim,
                  write_features, write_wav)
from .metrics import MetricError, corpus_cer
from .params import CheckpointError
from .text import VOCAB, TextError, decode, encode, normalize_text
from .toy import ToyConfig, make_corpus

log = logging.getLogger("speechchain")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class OutputExistsError(ConfigError):
    pass


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OutputExistsError([f"output directory {out} is not empty (use --force)"])
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _overrides(args) -> dict:
    out = {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _run_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config, _overrides(args))
    if args.out:
        cfg.out = args.out
    cfg.chain.seed = cfg.seed
    return cfg


def _load_models(cfg, ckpt_dir: Path):
    asr, tts = build_models(cfg, cfg.seed)
    asr.params.load(ckpt_dir / "asr_best.ckpt")
    tts.params.load(ckpt_dir / "tts_best.ckpt")
    mel = NormalizationStats.load(ckpt_dir / "mel_stats.json")
    lin = NormalizationStats.load(ckpt_dir / "lin_stats.json")
    return asr, tts, mel, lin


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_make_toy_corpus(args) -> int:
    out = _prepare_out(args.out, args.force)
    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    unknown = set(overrides) - set(ToyConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError([f"unknown key 'toy.{k}'" for k in sorted(unknown)])
    toy = ToyConfig(**overrides)
    errors = toy.validate()
    if errors:
        raise ConfigError(errors)
    paths = make_corpus(out, seed=args.seed or 0, config=toy)
    VOCAB.write(out / "vocab.txt")
    for split, p in paths.items():
        print(f"{split}\t{p}")
    return EXIT_OK


def cmd_extract_features(args) -> int:
    cfg = _run_config(args)
    out = _prepare_out(args.out, args.force)
    manifest = load_manifest(args.manifest)
    base = manifest.path.parent
    rows = []
    for row in manifest.rows:
        if not row.path:
            rows.append(row)
            continue
        src = Path(row.path) if Path(row.path).is_absolute() else base / row.path
        mel, lin = read_pair(src, cfg.dsp)
        write_features(out / f"{row.id}.mel.feat", mel, cfg.dsp)
        write_features(out / f"{row.id}.mag.feat", lin, cfg.dsp)
        rows.append(ManifestRow(row.id, f"{row.id}.mel.feat", row.transcript, row.speaker,
                                row.line))
    write_manifest(out / "manifest.tsv", Manifest(manifest.kind, rows))
    if manifest.kind == "paired":
        mel_stats, lin_stats = fit_stats(load_utterances(load_manifest(out / "manifest.tsv"),
                                                         cfg.dsp), manifest.path.name)
        mel_stats.save(out / "mel_stats.json")
        lin_stats.save(out / "lin_stats.json")
    print(out / "manifest.tsv")
    return EXIT_OK


def _train(args, chain: bool) -> int:
    cfg = _run_config(args)
    if not cfg.out:
        raise ConfigError(["an output directory is required (--out or 'out')"])
    if not chain:
        cfg.chain.beta = 0.0
        if cfg.chain.alpha == 0:
            raise ConfigError(["chain.alpha must be positive for supervised training"])
    out = _prepare_out(cfg.out, args.force)
    cfg.dump(out / "config.json")
    corpus = load_corpus(cfg)
    mel_stats, lin_stats = corpus.pop("_stats")
    mel_stats.save(out / "mel_stats.json")
    lin_stats.save(out / "lin_stats.json")
    asr, tts = build_models(cfg, cfg.seed)
    speech = corpus.get("speech", ()) if chain else ()
    text = corpus.get("text", ()) if chain else ()
    trainer = ChainTrainer(asr, tts, cfg.chain, corpus["paired"], speech, text, corpus["dev"],
                           out)
    result = trainer.fit()
    if result.best_report is None:
        raise NumericError("training produced no dev evaluation")
    if all(row["aborted"] for row in result.history):
        raise NumericError("every training step was aborted on non-finite values")
    print(f"best epoch {result.best_epoch}")
    print(result.best_report.summary())
    return EXIT_OK


def cmd_train_supervised(args) -> int:
    return _train(args, chain=False)


def cmd_train_chain(args) -> int:
    return _train(args, chain=True)


def cmd_transcribe(args) -> int:
    cfg = _run_config(args)
    asr, _, mel_stats, lin_stats = _load_models(cfg, Path(args.checkpoint))
    utts = normalize_utterances(load_utterances(load_manifest(args.manifest), cfg.dsp),
                                mel_stats, lin_stats)
    lines = []
    for u in utts:
        if u.mel is None:
            raise DataError(f"{u.id}: no audio to transcribe")
        toks = asr.decode(u.mel.astype(np.float64), beam=args.beam,
                          max_len=cfg.chain.decode_max_len)[0]
        lines.append(f"{u.id}\t{decode(toks)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synthesize(args) -> int:
    cfg = _run_config(args)
    if not args.out:
        raise ConfigError(["--out is required"])
    _, tts, mel_stats, lin_stats = _load_models(cfg, Path(args.checkpoint))
    if args.text:
        items = [("utt-0", normalize_text(args.text))]
    else:
        items = [(r.id, normalize_text(r.transcript)) for r in load_manifest(args.manifest).rows
                 if r.transcript]
    out = _prepare_out(args.out, args.force)
    for uid, text in items:
        res = tts.synthesize(encode(text)[None], max_frames=cfg.chain.synth_max_frames)[0]
        if res.hit_max:
            log.warning("%s: synthesis hit max_frames", uid)
        mel = mel_stats.invert(FeatureSequence(res.mel, LOG_MEL, True))
        lin = lin_stats.invert(FeatureSequence(res.linear, LOG_MAG, True))
        if not (np.all(np.isfinite(mel.frames)) and np.all(np.isfinite(lin.frames))):
            raise NumericError(f"{uid}: non-finite synthesized features")
        write_features(out / f"{uid}.mel.feat", mel, cfg.dsp)
        write_features(out / f"{uid}.mag.feat", lin, cfg.dsp)
        write_wav(out / f"{uid}.wav", griffin_lim(lin, config=cfg.dsp))
        print(out / f"{uid}.wav")
    return EXIT_OK


def _read_hyps(path) -> dict:
    hyps = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        uid, _, text = line.partition("\t")
        if uid in hyps:
            raise DataError(f"{path}:{n}: duplicate id {uid!r}")
        hyps[uid] = text
    return hyps


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.hyp:
        hyps = _read_hyps(args.hyp)
        refs = [(r.id, normalize_text(r.transcript)) for r in manifest.rows]
        missing = [uid for uid, _ in refs if uid not in hyps]
        if missing:
            raise DataError(f"no hypothesis for {len(missing)} id(s), e.g. {missing[0]!r}")
        micro, macro = corpus_cer([hyps[uid] for uid, _ in refs], [t for _, t in refs])
        print(f"utterances      {len(refs)}\nCER (%)         {micro:.2f}  (macro {macro:.2f})")
        return EXIT_OK
    if not args.checkpoint:
        raise ConfigError(["evaluate needs --hyp or --checkpoint"])
    cfg = _run_config(args)
    asr, tts, mel_stats, lin_stats = _load_models(cfg, Path(args.checkpoint))
    utts = normalize_utterances(load_utterances(manifest, cfg.dsp), mel_stats, lin_stats)
    report = evaluate(asr, tts, utts, cfg.chain.eval_batch_size, cfg.chain.decode_max_len,
                      "beam" if args.beam > 1 else "greedy", args.beam)
    print(report.summary())
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(",".join(report.columns()) + "\n" + ",".join(report.csv_row()) + "\n",
                        encoding="utf-8")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    if not args.out:
        raise ConfigError(["--out is required"])
    out = _prepare_out(args.out, args.force)
    cfg.dump(out / "config.json")
    specs = list(DEFAULT_SPECS) + (list(BEAM_SPECS) if args.beam else [])
    seeds = list(range(args.seeds)) if args.seeds else [0, 1, 2]
    result = run_matrix(cfg, specs, seeds, out)
    print(result.to_markdown())
    return EXIT_OK if result.passed else EXIT_NUMERIC


def cmd_vocab(args) -> int:
    if args.out:
        VOCAB.write(args.out)
    else:
        sys.stdout.write("\n".join(VOCAB.symbols) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speechchain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. chain.beta=1.0")
        sp.set_defaults(func=fn)
        return sp

    add("make-toy-corpus", cmd_make_toy_corpus, "generate the synthetic corpus and manifests")
    sp = add("extract-features", cmd_extract_features, "precompute feature files for a manifest")
    sp.add_argument("--manifest", required=True)
    add("train-supervised", cmd_train_supervised, "train on paired data only")
    add("train-chain", cmd_train_chain, "train with paired and unpaired data")
    sp = add("transcribe", cmd_transcribe, "decode a manifest with a trained recognizer")
    sp.add_argument("--checkpoint", required=True, help="training output directory")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--beam", type=int, default=1)
    sp = add("synthesize", cmd_synthesize, "synthesize WAV and feature files")
    sp.add_argument("--checkpoint", required=True, help="training output directory")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--text")
    group.add_argument("--manifest")
    sp = add("evaluate", cmd_evaluate, "score hypotheses or a trained model pair")
    sp.add_argument("--manifest", required=True, help="reference manifest")
    sp.add_argument("--hyp", help="hypothesis file (id<TAB>text per line)")
    sp.add_argument("--checkpoint", help="training output directory")
    sp.add_argument("--beam", type=int, default=1)
    sp = add("bench", cmd_bench, "run the direction-of-effect experiment matrix")
    sp.add_argument("--seeds", type=int, default=3, help="number of seeds (0..n-1)")
    sp.add_argument("--beam", action="store_true", help="add beam-5 chain rows")
    add("vocab", cmd_vocab, "print or write the symbol inventory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ChainConfigError) as exc:
        errors = getattr(exc, "errors", [str(exc)])
        print("configuration error:", file=sys.stderr)
        for e in errors:
            print(f"  {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TextError, DSPError, CheckpointError, MetricError, FileNotFoundError,
            ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
