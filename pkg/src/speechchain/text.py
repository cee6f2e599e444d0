"""Character vocabulary and text normalization."""

from __future__ import annotations

import logging
import re
import string
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SOS, EOS, SPC = "<s>", "</s>", "<spc>"
PUNCTUATION = (",", ":", "'", "?", ".", "-")
SYMBOLS = (SOS, EOS, SPC) + tuple(string.ascii_lowercase) + PUNCTUATION

_QUOTES = str.maketrans({'"': "'", "“": "'", "”": "'", "‘": "'", "’": "'",
                         "`": "'"})
_SPACES = re.compile(r"\s+")


class TextError(ValueError):
    pass


class Vocabulary:
    """Fixed 35-symbol inventory: specials, then a-z, then punctuation."""

    def __init__(self, symbols=SYMBOLS):
        self.symbols = tuple(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.sos = self.index[SOS]
        self.eos = self.index[EOS]
        self.spc = self.index[SPC]
        self._chars = frozenset(s for s in self.symbols if len(s) == 1)

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, ch: str) -> bool:
        return ch == " " or ch in self._chars

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")


VOCAB = Vocabulary()
NUM_CLASSES = len(VOCAB)


def normalize_with_count(raw: str, vocab: Vocabulary = VOCAB) -> tuple[str, int]:
    """Return the normalized text and how many characters were dropped."""
    text = raw.lower().translate(_QUOTES)
    text = _SPACES.sub(" ", text)
    kept = [ch for ch in text if ch in vocab]
    dropped = len(text) - len(kept)
    text = _SPACES.sub(" ", "".join(kept)).strip()
    if not text:
        raise TextError(f"text is empty after normalization: {raw!r}")
    return text, dropped


def normalize_text(raw: str) -> str:
    """Lowercase, map double quotes to ``'``, drop out-of-vocabulary
    characters and collapse whitespace."""
    text, dropped = normalize_with_count(raw)
    if dropped:
        log.warning("dropped %d out-of-vocabulary character(s) from %r", dropped, raw)
    return text


def encode(text: str, vocab: Vocabulary = VOCAB) -> np.ndarray:
    """Map normalized text to ids framed by ``<s>`` and ``</s>``."""
    ids = [vocab.sos]
    for ch in text:
        if ch == " ":
            ids.append(vocab.spc)
        elif ch in vocab._chars:
            ids.append(vocab.index[ch])
        else:
            raise TextError(f"character {ch!r} is not in the vocabulary")
    ids.append(vocab.eos)
    return np.asarray(ids, dtype=np.int64)


def decode(ids, vocab: Vocabulary = VOCAB) -> str:
    """Inverse of :func:`encode`; sentinels are stripped, decoding stops at
    the first ``</s>``."""
    out = []
    for i in np.asarray(ids).tolist():
        if i == vocab.eos:
            break
        if i == vocab.sos:
            continue
        if not 0 <= i < len(vocab):
            raise TextError(f"token id {i} outside vocabulary")
        out.append(" " if i == vocab.spc else vocab.symbols[i])
    return "".join(out)
