import math
import random

import numpy as np
import pytest
import torch

from speechsql.errors import ShapeMismatch
from speechsql.features import N_MELS, SpeechFeatures
from speechsql.speech_encoder import SpeechEncoder, SpeechEncoderConfig, collate_features, encode_speech


def _feats(n, seed=0):
    return SpeechFeatures(np.random.default_rng(seed).normal(size=(n, N_MELS)).astype(np.float32))


def _stride_oracle(n, cfg):
    # conv with kernel 3, padding 1, stride s: floor((n + 2 - 3) / s) + 1
    for b in range(1, cfg.n_blocks + 1):
        s = 2 if b in cfg.time_stride_blocks else 1
        n = (n + 2 - 3) // s + 1
    return n


@pytest.fixture(scope="module")
def default_encoder():
    torch.manual_seed(0)
    return SpeechEncoder(SpeechEncoderConfig()).eval()


def test_default_shape_64_frames(default_encoder):
    z = encode_speech(_feats(64), SpeechEncoderConfig(), default_encoder)
    assert tuple(z.shape) == (8, 512)


def test_single_frame(default_encoder):
    z = encode_speech(_feats(1), SpeechEncoderConfig(), default_encoder)
    assert tuple(z.shape) == (1, 512)
    assert torch.isfinite(z).all()


def test_inference_is_deterministic(default_encoder):
    f = _feats(30, seed=3)
    a = encode_speech(f, SpeechEncoderConfig(), default_encoder)
    b = encode_speech(f, SpeechEncoderConfig(), default_encoder)
    assert torch.equal(a, b)


def test_output_length_formula_matches_conv_arithmetic():
    cfg = SpeechEncoderConfig()
    rng = random.Random(0)
    lengths = list(range(1, 70)) + [rng.randint(70, 4096) for _ in range(60)] + [4096]
    for n in lengths:
        expected = math.ceil(n / 2 ** len(cfg.time_stride_blocks))
        assert cfg.out_length(n) == expected == _stride_oracle(n, cfg)


def test_actual_output_lengths_small_model():
    torch.manual_seed(0)
    cfg = SpeechEncoderConfig(n_blocks=3, channels=4, time_stride_blocks=(1, 3), d_model=8)
    enc = SpeechEncoder(cfg).eval()
    for n in (1, 2, 3, 5, 17, 64, 101):
        assert encode_speech(_feats(n), cfg, enc).shape == (cfg.out_length(n), 8)


def test_batch_invariance():
    torch.manual_seed(1)
    cfg = SpeechEncoderConfig(n_blocks=4, channels=8, time_stride_blocks=(2, 4), d_model=16)
    enc = SpeechEncoder(cfg)
    # a few training steps so running statistics are not the identity
    enc.train()
    for s in range(3):
        x, l = collate_features([_feats(20 + s, seed=s), _feats(9, seed=10 + s)])
        enc(x, l)
    enc.eval()
    batch = [_feats(n, seed=n) for n in (5, 33, 12)]
    x, l = collate_features(batch)
    z, mask = enc(x, l)
    for i, f in enumerate(batch):
        alone = encode_speech(f, cfg, enc)
        assert torch.allclose(z[i, : alone.shape[0]], alone, atol=1e-5)
        assert int(mask[i].sum()) == alone.shape[0]
        assert torch.all(z[i, alone.shape[0]:] == 0)


def test_masked_batchnorm_ignores_padding_in_training():
    torch.manual_seed(2)
    cfg = SpeechEncoderConfig(n_blocks=2, channels=4, time_stride_blocks=(2,), d_model=8)
    enc = SpeechEncoder(cfg).train()
    f = _feats(10)
    x1, l1 = collate_features([f])
    x2 = torch.cat([x1, torch.full((1, 7, N_MELS), 50.0)], dim=1)  # garbage padding
    z1, _ = enc(x1, l1)
    z2, _ = enc(x2, l1)
    assert torch.allclose(z1, z2[:, : z1.shape[1]], atol=1e-5)


def test_bad_feature_width():
    enc = SpeechEncoder(SpeechEncoderConfig(n_blocks=1, channels=2, d_model=4))
    with pytest.raises(ShapeMismatch):
        enc(torch.zeros(1, 5, 40), torch.tensor([5]))


def test_params_must_match_config():
    enc = SpeechEncoder(SpeechEncoderConfig(n_blocks=1, channels=2, d_model=4))
    with pytest.raises(ShapeMismatch):
        encode_speech(_feats(4), SpeechEncoderConfig(n_blocks=2, channels=2, d_model=4), enc)


def test_invalid_config():
    with pytest.raises(ValueError):
        SpeechEncoderConfig(n_blocks=0)
