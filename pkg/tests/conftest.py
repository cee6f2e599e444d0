import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from speechchain.asr import ASRConfig, ASRModel
from speechchain.tts import TTSConfig, TTSModel

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_asr_config(**kw):
    base = dict(input_dim=4, proj_dim=4, enc_hidden=3, enc_layers=3, emb_dim=3, dec_hidden=4,
                att_dim=4, num_classes=6, score="mlp")
    base.update(kw)
    return ASRConfig(**base)


def tiny_tts_config(**kw):
    base = dict(num_classes=5, emb_dim=4, prenet=(4, 4), bank_size=2, bank_channels=2,
                enc_projections=(4, 4), highway_dim=4, n_highway=1, enc_rnn=2,
                dec_prenet=(4, 4), dec_hidden=4, reduction=2, mel_dim=4, linear_dim=8,
                post_bank_size=2, post_channels=2, post_projections=(4, 4), post_rnn=2,
                flag_bias=0.0)
    base.update(kw)
    return TTSConfig(**base)


def small_asr_config(**kw):
    base = dict(proj_dim=16, enc_hidden=8, emb_dim=8, dec_hidden=16, att_dim=16)
    base.update(kw)
    return ASRConfig(**base)


def small_tts_config(**kw):
    base = dict(emb_dim=16, prenet=(16, 16), bank_size=2, bank_channels=8,
                enc_projections=(16, 16), highway_dim=16, n_highway=1, enc_rnn=8,
                dec_prenet=(16, 16), dec_hidden=16, post_bank_size=2, post_channels=8,
                post_projections=(16, 40), post_rnn=8)
    base.update(kw)
    return TTSConfig(**base)


def jitter(params, seed=0, scale=0.3):
    """Move every parameter off its initialization so zero biases do not
    put leaky-ReLU / max-pool inputs exactly on a kink."""
    rng = np.random.default_rng(seed)
    for _, t in params.items():
        t.data = t.data + scale * rng.standard_normal(t.shape)


@pytest.fixture
def tiny_asr():
    return ASRModel(tiny_asr_config(), seed=3)


@pytest.fixture
def tiny_tts():
    return TTSModel(tiny_tts_config(), seed=4)


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE: dict = {}


@pytest.fixture
def record():
    """``record(n, ok, detail)`` stores one line for the terminal summary."""
    def _record(n, ok, detail=""):
        ACCEPTANCE[n] = (bool(ok), detail)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
