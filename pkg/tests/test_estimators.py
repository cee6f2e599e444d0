import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from conftest import small_asr_config, small_tts_config
from speechchain.estimators import (FeatureExtractor, FeatureNormalizer, SpeechChain,
                                    SpeechRecognizer, SpeechSynthesizer, check_sequences)

RNG = np.random.default_rng(0)
WAVES = [RNG.uniform(-0.3, 0.3, n) for n in (1600, 2400, 2000)]


def seqs(n, dim, seed=0, lo=5, hi=10):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((int(rng.integers(lo, hi)), dim)) for _ in range(n)]


def test_feature_extractor_outputs():
    fx = FeatureExtractor()
    mels = fx.fit_transform(WAVES)
    assert [m.shape for m in mels] == [(9, 40), (13, 40), (11, 40)]
    both = FeatureExtractor(output="both").transform(WAVES[:1])[0]
    assert both[0].shape[0] == both[1].shape[0] and both[1].shape[1] == 1025
    with pytest.raises(ValueError):
        FeatureExtractor(output="mfcc").fit()


def test_params_roundtrip_and_clone():
    est = SpeechRecognizer(enc_hidden=7, epochs=1)
    assert est.get_params()["enc_hidden"] == 7
    twin = clone(est.set_params(lr=0.01))
    assert twin.lr == 0.01 and not hasattr(twin, "model_")


def test_normalizer_pipeline_and_inverse():
    pipe = make_pipeline(FeatureExtractor(), FeatureNormalizer())
    z = pipe.fit_transform(WAVES)
    stacked = np.concatenate(z)
    assert np.all(np.abs(stacked.mean(axis=0)) < 1e-8)
    norm = pipe[-1]
    back = norm.inverse_transform(z)
    for a, b in zip(back, FeatureExtractor().transform(WAVES)):
        np.testing.assert_allclose(a, b, atol=1e-8)


def test_unfitted_raise():
    with pytest.raises(NotFittedError):
        FeatureNormalizer().transform(seqs(1, 3))
    with pytest.raises(NotFittedError):
        SpeechRecognizer().predict(seqs(1, 40))
    with pytest.raises(NotFittedError):
        SpeechSynthesizer().predict(["go"])


def test_check_sequences_errors():
    with pytest.raises(ValueError, match="empty"):
        check_sequences([])
    with pytest.raises(ValueError, match="differing widths"):
        check_sequences([np.zeros((2, 3)), np.zeros((2, 4))])
    with pytest.raises(ValueError):
        check_sequences([np.full((2, 3), np.nan)])
    with pytest.raises(ValueError, match="expected 5"):
        check_sequences([np.zeros((2, 3))], n_features=5)


def test_recognizer_fit_predict_score():
    X, y = seqs(4, 40), ["go", "on", "red", "ten"]
    est = SpeechRecognizer(proj_dim=8, enc_hidden=4, emb_dim=4, dec_hidden=8, att_dim=8,
                           epochs=3, batch_size=2, max_len=5).fit(X, y)
    assert len(est.loss_curve_) == 3 and est.loss_curve_[-1] < est.loss_curve_[0]
    preds = est.predict(X)
    assert len(preds) == 4 and all(isinstance(p, str) for p in preds)
    assert est.score(X, y) <= 1.0
    with pytest.raises(ValueError):
        est.predict(seqs(1, 12))
    with pytest.raises(ValueError):
        SpeechRecognizer().fit(X, y[:2])


def test_recognizer_is_deterministic():
    X, y = seqs(3, 40), ["go", "on", "sun"]
    kw = dict(proj_dim=8, enc_hidden=4, emb_dim=4, dec_hidden=8, att_dim=8, epochs=1)
    a = SpeechRecognizer(**kw).fit(X, y)
    b = SpeechRecognizer(**kw).fit(X, y)
    assert a.loss_curve_ == b.loss_curve_


def test_synthesizer_fit_predict():
    mels = seqs(3, 40, 1, 8, 13)
    lins = [np.random.default_rng(i).standard_normal((m.shape[0], 33)) for i, m in enumerate(mels)]
    est = SpeechSynthesizer(emb_dim=8, dec_hidden=8, epochs=2, batch_size=3, max_frames=12)
    est.fit(["go", "on", "ten"], list(zip(mels, lins)))
    (mel, lin), = est.predict(["go"])
    assert mel.shape[1] == 40 and lin.shape[1] == 33 and mel.shape[0] <= 12


def test_chain_estimator_supervised_and_unpaired():
    rng = np.random.default_rng(2)
    pair = lambda n: (rng.standard_normal((n, 40)), rng.standard_normal((n, 1025)))
    X = [pair(8), pair(10), pair(9)]
    y = ["go", "on", "ten"]
    kw = dict(asr=small_asr_config(), tts=small_tts_config(), epochs=1, batch_size=2)
    est = SpeechChain(**kw).fit(X, y, X_speech=[pair(8), pair(8)], y_text=["red", "sun"],
                                X_dev=X[:2], y_dev=y[:2])
    assert est.history_[0]["asr_u"] > 0
    assert len(est.predict([x[0] for x in X])) == 3
    sup = SpeechChain(**kw).fit(X, y)
    assert sup.history_[0]["asr_u"] == 0.0
