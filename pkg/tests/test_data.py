import numpy as np
import pytest
from hypothesis import given, strategies as st

from speechchain import dsp
from speechchain.data import (HEADER, DataError, Manifest, ManifestRow, Utterance, check_disjoint,
                              collate, fit_stats, load_manifest, load_utterances, make_batches,
                              normalize_utterances, write_manifest)
from speechchain.text import encode


def write_tsv(path, rows, header=HEADER):
    lines = ["\t".join(header)] + ["\t".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def utt(uid, frames=None, text=None, dim=3, speaker=0):
    mel = None if frames is None else np.full((frames, dim), float(frames), dtype=np.float32)
    lin = None if frames is None else np.zeros((frames, 5), dtype=np.float32)
    return Utterance(uid, mel, lin, None if text is None else encode(text), text or "", speaker)


# -- manifests ----------------------------------------------------------------------

def test_valid_paired_manifest(tmp_path):
    p = write_tsv(tmp_path / "p.tsv", [("a", "a.wav", "hi", ""), ("b", "b.wav", "go on", "1"),
                                       ("c", "c.wav", "ten", "")])
    m = load_manifest(p)
    assert m.kind == "paired" and len(m) == 3
    assert m.rows[1].line == 3 and m.ids() == {"a", "b", "c"}


def test_kind_inference(tmp_path):
    s = write_tsv(tmp_path / "s.tsv", [("a", "a.wav", "", "")])
    t = write_tsv(tmp_path / "t.tsv", [("a", "", "hello", "")])
    assert load_manifest(s).kind == "speech-only"
    assert load_manifest(t).kind == "text-only"


@pytest.mark.parametrize("rows,needle", [
    ([("a", "a.wav", "x", ""), ("a", "b.wav", "y", "")], "duplicate id 'a'"),
    ([("a", "a.wav", "x")], "expected 4"),
    ([("", "a.wav", "x", "")], "empty id"),
])
def test_manifest_row_errors(tmp_path, rows, needle):
    with pytest.raises(DataError, match=needle):
        load_manifest(write_tsv(tmp_path / "m.tsv", rows))


def test_paired_row_without_transcript_names_line(tmp_path):
    p = write_tsv(tmp_path / "m.tsv", [("a", "a.wav", "x", ""), ("b", "b.wav", "", "")])
    with pytest.raises(DataError, match=r"m\.tsv:3: paired row 'b' has no transcript"):
        load_manifest(p, kind="paired")


def test_empty_missing_and_bad_header(tmp_path):
    (tmp_path / "e.tsv").write_text("", encoding="utf-8")
    with pytest.raises(DataError, match="empty"):
        load_manifest(tmp_path / "e.tsv")
    with pytest.raises(DataError, match="no rows"):
        load_manifest(write_tsv(tmp_path / "h.tsv", []))
    with pytest.raises(DataError, match="not found"):
        load_manifest(tmp_path / "nope.tsv")
    with pytest.raises(DataError, match="header"):
        load_manifest(write_tsv(tmp_path / "b.tsv", [("a", "b", "c", "d")], ("x", "y", "z", "w")))
    with pytest.raises(DataError, match="kind"):
        load_manifest(write_tsv(tmp_path / "k.tsv", [("a", "a.wav", "x", "")]), kind="weird")


def test_speech_only_with_transcript_rejected(tmp_path):
    p = write_tsv(tmp_path / "m.tsv", [("a", "a.wav", "x", "")])
    with pytest.raises(DataError, match="has a transcript"):
        load_manifest(p, kind="speech-only")


def test_manifest_write_roundtrip(tmp_path):
    m = Manifest("paired", [ManifestRow("a", "a.wav", "hi there", "2")])
    write_manifest(tmp_path / "m.tsv", m)
    back = load_manifest(tmp_path / "m.tsv")
    assert [(r.id, r.path, r.transcript, r.speaker) for r in back.rows] == [
        ("a", "a.wav", "hi there", "2")]


def test_check_disjoint():
    a = Manifest("paired", [ManifestRow("x", "x.wav", "t", "")])
    b = Manifest("text-only", [ManifestRow("y", "", "t", "")])
    check_disjoint({"paired": a, "text": b})
    c = Manifest("text-only", [ManifestRow("x", "", "t", "")])
    with pytest.raises(DataError, match="'x' in paired and dev"):
        check_disjoint({"paired": a, "dev": c})


# -- utterances ------------------------------------------------------------------------

def test_load_utterances_from_wav_and_features(tmp_path):
    rng = np.random.default_rng(0)
    dsp.write_wav(tmp_path / "a.wav", dsp.Waveform(rng.uniform(-0.3, 0.3, 2000)))
    mel, mag = dsp.extract_features(dsp.Waveform(rng.uniform(-0.3, 0.3, 1600)))
    dsp.write_features(tmp_path / "b.mel.feat", mel)
    dsp.write_features(tmp_path / "b.mag.feat", mag)
    p = write_tsv(tmp_path / "m.tsv", [("a", "a.wav", "Hello!", "1"),
                                       ("b", "b.mel.feat", "go", "")])
    us = load_utterances(load_manifest(p))
    assert us[0].mel.shape == (11, 40) and us[0].linear.shape == (11, 1025)
    assert us[0].text == "hello" and us[0].speaker == 1
    assert us[1].num_frames == 9 and us[1].mel.dtype == np.float32
    assert us[1].num_tokens == 4


def test_load_utterances_errors(tmp_path):
    p = write_tsv(tmp_path / "m.tsv", [("a", "gone.wav", "x", "")])
    with pytest.raises(DataError, match="file not found"):
        load_utterances(load_manifest(p))
    (tmp_path / "c.mel.feat").write_bytes(b"")
    p = write_tsv(tmp_path / "n.tsv", [("a", "c.mel.feat", "x", "")])
    with pytest.raises(DataError, match="missing sibling"):
        load_utterances(load_manifest(p))
    (tmp_path / "d.flac").write_bytes(b"")
    p = write_tsv(tmp_path / "o.tsv", [("a", "d.flac", "x", "")])
    with pytest.raises(DataError, match="expected a .wav"):
        load_utterances(load_manifest(p))
    p = write_tsv(tmp_path / "q.tsv", [("a", "", "x", "bob")])
    with pytest.raises(DataError, match="not an integer"):
        load_utterances(load_manifest(p))


def test_fit_stats_skips_text_only_and_normalizes():
    us = [utt("a", 4), utt("b", 6), utt("t", text="hi")]
    mel_stats, _ = fit_stats(us)
    assert mel_stats.frame_count == 10
    out = normalize_utterances(us, *fit_stats(us))
    z = np.concatenate([u.mel for u in out[:2]])
    assert np.all(np.abs(z.mean(axis=0)) < 1e-6)
    assert out[2] is us[2]


# -- batches ------------------------------------------------------------------------------

def test_collate_padding_and_masks():
    b = collate([utt("a", 10, "hello"), utt("b", 7, "hi")])
    assert b.mel.shape[1] == 10
    assert b.frame_mask.sum(axis=1).tolist() == [10, 7]
    assert b.token_mask.sum(axis=1).tolist() == [7, 4]
    assert np.all(b.mel[1, 7:] == 0) and np.all(b.tokens[1, 4:] == 0)
    assert collate([utt("a", 10), utt("b", 7)], r=4).mel.shape[1] == 12


def test_collate_missing_sides():
    b = collate([utt("t", text="go"), utt("u", text="on")])
    assert b.mel is None and b.frame_mask is None and b.tokens.shape == (2, 4)
    with pytest.raises(DataError):
        collate([])


@given(st.lists(st.integers(1, 30), min_size=1, max_size=8), st.integers(1, 4))
def test_mask_true_exactly_on_real_frames(lens, r):
    b = collate([utt(str(i), n) for i, n in enumerate(lens)], r=r)
    assert b.mel.shape[1] % r == 0
    for row, n in zip(b.frame_mask, lens):
        assert row[:n].all() and not row[n:].any()


def test_same_seed_same_order_and_full_coverage():
    us = [utt(str(i), int(n)) for i, n in enumerate(np.random.default_rng(1).integers(1, 50, 37))]
    a = [x.ids for x in make_batches(us, 5, seed=7)]
    b = [x.ids for x in make_batches(us, 5, seed=7)]
    c = [x.ids for x in make_batches(us, 5, seed=8)]
    assert a == b and a != c
    assert sorted(i for ids in a for i in ids) == sorted(u.id for u in us)


def test_batches_are_length_bucketed():
    us = [utt(str(i), n) for i, n in enumerate([5, 40, 6, 41, 7, 42])]
    for batch in make_batches(us, 3, seed=0):
        lens = batch.frame_lengths
        assert lens.max() - lens.min() <= 2


def test_over_length_skipped_and_counted():
    us = [utt("a", 5, "go"), utt("b", 50, "go"), utt("c", 6, "a long sentence")]
    plan = make_batches(us, 2, max_frames=10, max_tokens=8)
    assert plan.skipped == 2 and [b.ids for b in plan] == [("a",)]
    with pytest.raises(DataError):
        make_batches(us, 0)
