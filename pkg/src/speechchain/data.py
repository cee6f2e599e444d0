"""Manifests, utterance loading and padded batches.

A manifest is a UTF-8 TSV with header ``id path transcript speaker``.
``path`` points at a ``.wav`` file or a ``.mel.feat`` file with a sibling
``.mag.feat``; relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import (DSPConfig, FeatureSequence, NormalizationStats, extract_features,
                  fit_normalization, read_features, read_wav)
from .text import encode, normalize_text

log = logging.getLogger(__name__)

HEADER = ("id", "path", "transcript", "speaker")
KINDS = ("paired", "speech-only", "text-only")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    id: str
    path: str
    transcript: str
    speaker: str
    line: int = 0


@dataclass
class Manifest:
    kind: str
    rows: list
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def ids(self) -> set:
        return {r.id for r in self.rows}


def _infer_kind(rows) -> str:
    has_audio = {bool(r.path) for r in rows}
    has_text = {bool(r.transcript) for r in rows}
    if has_audio == {True} and has_text == {False}:
        return "speech-only"
    if has_audio == {False} and has_text == {True}:
        return "text-only"
    return "paired"


def load_manifest(path, kind: str | None = None) -> Manifest:
    """Read and validate a manifest; ``kind`` is inferred when omitted."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: manifest not found")
    with path.open(encoding="utf-8", newline="") as fh:
        table = list(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE))
    if not table:
        raise DataError(f"{path}: empty manifest")
    if tuple(table[0]) != HEADER:
        raise DataError(f"{path}: header must be {' '.join(HEADER)!r}, got {table[0]!r}")
    rows, seen = [], set()
    for n, fields in enumerate(table[1:], start=2):
        if not fields or fields == [""]:
            continue
        if len(fields) != 4:
            raise DataError(f"{path}:{n}: expected 4 tab-separated fields, got {len(fields)}")
        row = ManifestRow(*(f.strip() for f in fields), line=n)
        if not row.id:
            raise DataError(f"{path}:{n}: empty id")
        if row.id in seen:
            raise DataError(f"{path}:{n}: duplicate id {row.id!r}")
        seen.add(row.id)
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: manifest has no rows")
    kind = kind or _infer_kind(rows)
    if kind not in KINDS:
        raise DataError(f"unknown manifest kind {kind!r}")
    for row in rows:
        if kind in ("paired", "speech-only") and not row.path:
            raise DataError(f"{path}:{row.line}: {kind} row {row.id!r} has no audio path")
        if kind == "paired" and not row.transcript:
            raise DataError(f"{path}:{row.line}: paired row {row.id!r} has no transcript")
        if kind == "speech-only" and row.transcript:
            raise DataError(f"{path}:{row.line}: speech-only row {row.id!r} has a transcript")
        if kind == "text-only" and not row.transcript:
            raise DataError(f"{path}:{row.line}: text-only row {row.id!r} has no transcript")
    return Manifest(kind, rows, path)


def write_manifest(path, manifest: Manifest) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE,
                       escapechar="\\")
        w.writerow(HEADER)
        for r in manifest.rows:
            w.writerow((r.id, r.path, r.transcript, r.speaker))


def check_disjoint(manifests: dict) -> None:
    """Raise if any id appears in more than one of the named manifests."""
    owner, clashes = {}, []
    for name, m in manifests.items():
        for uid in sorted(m.ids()):
            if uid in owner and owner[uid] != name:
                clashes.append(f"{uid!r} in {owner[uid]} and {name}")
            owner.setdefault(uid, name)
    if clashes:
        raise DataError("manifests overlap: " + "; ".join(clashes[:10])
                        + (f" (+{len(clashes) - 10} more)" if len(clashes) > 10 else ""))


# ---------------------------------------------------------------------------
# utterances
# ---------------------------------------------------------------------------

@dataclass
class Utterance:
    """Features are ``float32`` ``(S, D)``; ``tokens`` include both sentinels."""

    id: str
    mel: np.ndarray | None = None
    linear: np.ndarray | None = None
    tokens: np.ndarray | None = None
    text: str = ""
    speaker: int = 0

    @property
    def num_frames(self) -> int:
        return 0 if self.mel is None else int(self.mel.shape[0])

    @property
    def num_tokens(self) -> int:
        return 0 if self.tokens is None else int(self.tokens.size)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def read_pair(path: Path, dsp: DSPConfig) -> tuple[FeatureSequence, FeatureSequence]:
    """Un-normalized (log-mel, log-magnitude) for a WAV or feature path."""
    name = path.name
    if name.endswith(".wav"):
        return extract_features(read_wav(path), dsp)
    if name.endswith(".mel.feat"):
        mag = path.with_name(name[: -len(".mel.feat")] + ".mag.feat")
        if not mag.is_file():
            raise DataError(f"{path}: missing sibling {mag.name}")
        return read_features(path), read_features(mag)
    raise DataError(f"{path}: expected a .wav or .mel.feat path")


def _speaker(s: str) -> int:
    if not s:
        return 0
    try:
        return int(s)
    except ValueError:
        raise DataError(f"speaker id {s!r} is not an integer") from None


def load_utterances(manifest: Manifest, dsp: DSPConfig | None = None) -> list:
    """Read features (un-normalized) and encode transcripts."""
    dsp = dsp or DSPConfig()
    base = manifest.path.parent if manifest.path is not None else Path(".")
    out = []
    for row in manifest.rows:
        u = Utterance(row.id, speaker=_speaker(row.speaker))
        if row.path:
            p = _resolve(base, row.path)
            if not p.is_file():
                raise DataError(f"{manifest.path}:{row.line}: file not found: {p}")
            mel, lin = read_pair(p, dsp)
            if mel.normalized or lin.normalized:
                raise DataError(f"{p}: expected un-normalized features")
            u.mel = np.asarray(mel.frames, dtype=np.float32)
            u.linear = np.asarray(lin.frames, dtype=np.float32)
        if row.transcript:
            u.text = normalize_text(row.transcript)
            u.tokens = encode(u.text)
        out.append(u)
    return out


def fit_stats(utts, name: str = "") -> tuple[NormalizationStats, NormalizationStats]:
    """Mel and linear statistics over utterances that have audio."""
    with_audio = [u for u in utts if u.mel is not None]
    mel = fit_normalization((FeatureSequence(u.mel, "log-mel") for u in with_audio), name)
    lin = fit_normalization((FeatureSequence(u.linear, "log-magnitude") for u in with_audio),
                            name)
    return mel, lin


def normalize_utterances(utts, mel_stats: NormalizationStats,
                         lin_stats: NormalizationStats) -> list:
    out = []
    for u in utts:
        if u.mel is None:
            out.append(u)
            continue
        mel = ((u.mel - mel_stats.mean) / mel_stats.std).astype(np.float32)
        lin = ((u.linear - lin_stats.mean) / lin_stats.std).astype(np.float32)
        out.append(Utterance(u.id, mel, lin, u.tokens, u.text, u.speaker))
    return out


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    """Padded arrays for one batch; any side may be ``None`` when absent."""

    ids: tuple
    mel: np.ndarray | None
    linear: np.ndarray | None
    frame_lengths: np.ndarray | None
    frame_mask: np.ndarray | None
    tokens: np.ndarray | None
    token_lengths: np.ndarray | None
    token_mask: np.ndarray | None
    speakers: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def collate(utts, r: int = 1) -> Batch:
    """Pad to the batch maximum; frames are padded up to a multiple of ``r``."""
    if not utts:
        raise DataError("cannot build an empty batch")
    B = len(utts)
    mel = linear = flen = fmask = None
    if all(u.mel is not None for u in utts):
        flen = np.array([u.num_frames for u in utts], dtype=np.int64)
        S = -(-int(flen.max()) // r) * r
        mel = np.zeros((B, S, utts[0].mel.shape[1]))
        linear = np.zeros((B, S, utts[0].linear.shape[1]))
        for b, u in enumerate(utts):
            mel[b, :flen[b]] = u.mel
            linear[b, :flen[b]] = u.linear
        fmask = np.arange(S)[None, :] < flen[:, None]
    tok = tlen = tmask = None
    if all(u.tokens is not None for u in utts):
        tlen = np.array([u.num_tokens for u in utts], dtype=np.int64)
        T = int(tlen.max())
        tok = np.zeros((B, T), dtype=np.int64)
        for b, u in enumerate(utts):
            tok[b, :tlen[b]] = u.tokens
        tmask = np.arange(T)[None, :] < tlen[:, None]
    speakers = np.array([u.speaker for u in utts], dtype=np.int64)
    return Batch(tuple(u.id for u in utts), mel, linear, flen, fmask, tok, tlen, tmask, speakers)


@dataclass
class BatchPlan:
    batches: list
    skipped: int = 0

    def __iter__(self):
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def _length(u: Utterance) -> int:
    return u.num_frames if u.mel is not None else u.num_tokens


def make_batches(utts, batch_size: int, seed=None, sort_by_length: bool = True, r: int = 1,
                 max_frames: int | None = None, max_tokens: int | None = None) -> BatchPlan:
    """Bucket by length, cut into batches and shuffle the batch order.

    ``seed`` may be an int or a ``numpy`` Generator; ``None`` keeps the
    input order.  Utterances longer than ``max_frames`` / ``max_tokens``
    are skipped and counted.
    """
    if batch_size < 1:
        raise DataError("batch_size must be at least 1")
    kept, skipped = [], 0
    for u in utts:
        if (max_frames is not None and u.num_frames > max_frames) or \
                (max_tokens is not None and u.num_tokens > max_tokens):
            skipped += 1
            continue
        kept.append(u)
    if skipped:
        log.info("skipped %d over-length utterance(s)", skipped)
    rng = seed if isinstance(seed, np.random.Generator) else (
        None if seed is None else np.random.default_rng(seed))
    order = np.arange(len(kept)) if rng is None else rng.permutation(len(kept))
    if sort_by_length:
        lens = np.array([_length(kept[i]) for i in order])
        order = order[np.argsort(lens, kind="stable")]
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return BatchPlan([collate([kept[i] for i in c], r) for c in chunks], skipped)
