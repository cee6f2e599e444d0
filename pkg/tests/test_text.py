import string

import numpy as np
import pytest
from hypothesis import given, strategies as st

from speechchain.text import (NUM_CLASSES, VOCAB, TextError, decode, encode,
                              normalize_text, normalize_with_count)

CHARS = string.ascii_lowercase + ",:'?.-"


def test_vocabulary_inventory():
    assert len(VOCAB) == NUM_CLASSES == 35
    assert VOCAB.symbols[:3] == ("<s>", "</s>", "<spc>")
    assert sorted(VOCAB.index.values()) == list(range(35))
    assert all(c in VOCAB for c in CHARS)


def test_vocabulary_file(tmp_path):
    VOCAB.write(tmp_path / "vocab.txt")
    assert (tmp_path / "vocab.txt").read_text().split("\n")[:-1] == list(VOCAB.symbols)


@pytest.mark.parametrize("raw,want", [
    ("Hello", "hello"),
    ('don"t', "don't"),
    ("don”t", "don't"),
    ("a  b", "a b"),
    ("  Tab\there ", "tab here"),
])
def test_normalize_examples(raw, want):
    assert normalize_text(raw) == want


def test_normalize_drops_and_counts():
    text, dropped = normalize_with_count("café #1!")
    assert text == "caf" and dropped == 4


def test_normalize_empty_is_error():
    with pytest.raises(TextError):
        normalize_text("###")


def test_encode_examples():
    s, e, spc = VOCAB.sos, VOCAB.eos, VOCAB.spc
    idx = VOCAB.index
    assert encode("hi").tolist() == [s, idx["h"], idx["i"], e]
    assert encode("a b").tolist() == [s, idx["a"], spc, idx["b"], e]


def test_encode_unknown_character():
    with pytest.raises(TextError):
        encode("hé")


def test_decode_stops_at_eos_and_rejects_bad_ids():
    ids = encode("ab").tolist() + [VOCAB.index["z"]]
    assert decode(ids) == "ab"
    with pytest.raises(TextError):
        decode([VOCAB.sos, 99])


normalized = st.text(alphabet=CHARS + " ", min_size=1, max_size=40).map(
    lambda s: " ".join(s.split())).filter(bool)


@given(normalized)
def test_roundtrip(s):
    ids = encode(s)
    assert ids[0] == VOCAB.sos and ids[-1] == VOCAB.eos
    assert np.all(ids < 35)
    assert decode(ids) == s


@given(st.text(max_size=30))
def test_normalize_is_idempotent(raw):
    try:
        once = normalize_text(raw)
    except TextError:
        return
    assert normalize_text(once) == once
    assert decode(encode(once)) == once
