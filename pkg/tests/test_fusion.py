import pytest
import torch

from speechsql.errors import ShapeMismatch
from speechsql.fusion import Fusion, FusionConfig, apply_linking, fuse, link_scores, sinusoidal_encoding


def _small(n_layers=2, pe=True):
    torch.manual_seed(0)
    return Fusion(FusionConfig(n_layers=n_layers, n_heads=2, d_ff=16, d_model=8, dropout=0.0,
                               use_positional_encoding=pe)).eval()


def test_orthogonal_rows_score_zero():
    z_s = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    z_a = torch.tensor([[0.0, 0.0, 3.0], [1.0, 1.0, 0.0]])
    g = link_scores(z_a, z_s)
    assert torch.all(g[0] == 0)


def test_identical_rows_score_one():
    z = torch.randn(4, 6, dtype=torch.float64)
    g = link_scores(z, z)
    assert torch.allclose(torch.diagonal(g), torch.ones(4, dtype=torch.float64), atol=1e-12)


def test_zero_row_scores_zero():
    z_a = torch.zeros(2, 3)
    z_a[1] = 1.0
    g = link_scores(z_a, torch.randn(5, 3))
    assert torch.all(g[0] == 0) and torch.isfinite(g).all()


def test_scores_bounded():
    torch.manual_seed(0)
    for _ in range(20):
        g = link_scores(torch.randn(7, 16) * 100, torch.randn(5, 16) * 1e-3)
        assert g.min() >= -1.0 and g.max() <= 1.0


def test_link_width_mismatch():
    with pytest.raises(ShapeMismatch):
        link_scores(torch.zeros(2, 3), torch.zeros(2, 4))


def test_zero_scores_identity():
    z_a = torch.randn(3, 5)
    assert torch.equal(apply_linking(z_a, torch.randn(2, 5), torch.zeros(3, 2)), z_a)


def test_single_schema_row():
    z_a, z_s = torch.randn(4, 5), torch.randn(1, 5)
    out = apply_linking(z_a, z_s, torch.ones(4, 1))
    assert torch.allclose(out, z_a + z_s)


def test_linking_dense_oracle():
    torch.manual_seed(3)
    z_a, z_s = torch.randn(6, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)
    g = link_scores(z_a, z_s)
    expected = z_a.clone()
    for i in range(6):
        for j in range(4):
            cos = float(z_a[i] @ z_s[j]) / (float(z_a[i].norm()) * float(z_s[j].norm()))
            assert abs(float(g[i, j]) - cos) < 1e-12
            expected[i] += cos * z_s[j]
    assert torch.allclose(apply_linking(z_a, z_s, g), expected, atol=1e-6)


def test_apply_linking_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        apply_linking(torch.zeros(3, 4), torch.zeros(2, 4), torch.zeros(2, 2))


def test_shapes_preserved():
    f = _small(n_layers=3)
    a, s = fuse(torch.randn(7, 8), torch.randn(3, 8), f)
    assert a.shape == (7, 8) and s.shape == (3, 8)
    assert torch.isfinite(a).all() and torch.isfinite(s).all()


def test_zero_schema_values_remove_cross_attention():
    f = _small(n_layers=1, pe=False)
    stream = f.layers[0].speech
    with torch.no_grad():
        stream.cross_attn.w_v.weight.zero_()
    z_a, z_s = torch.randn(1, 5, 8), torch.randn(1, 3, 8)
    ones_a, ones_s = torch.ones(1, 5, dtype=torch.bool), torch.ones(1, 3, dtype=torch.bool)
    out, _ = f(z_a, ones_a, z_s, ones_s)
    y = stream.ln1(z_a + stream.self_attn(z_a, z_a, z_a, ones_a))
    expected = stream.ln2(y + stream.ffn(y))
    assert torch.allclose(out, expected, atol=1e-6)
    assert torch.all(stream.cross_attn(z_a, z_s, z_s, ones_s) == 0)


def test_attention_rows_sum_to_one():
    f = _small()
    torch.manual_seed(5)
    mask_a = torch.tensor([[True] * 6, [True] * 4 + [False] * 2])
    mask_s = torch.tensor([[True] * 3, [True] * 2 + [False]])
    f(torch.randn(2, 6, 8), mask_a, torch.randn(2, 3, 8), mask_s)
    weights = f.attention_weights()
    assert len(weights) == 2 * 4
    for w in weights:
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5)


def test_padded_frames_do_not_leak():
    f = _small()
    torch.manual_seed(7)
    for pad in (1, 3, 5):
        n = 4
        z_a = torch.randn(1, n + pad, 8)
        z_a2 = z_a.clone()
        z_a2[:, n:] = torch.randn(1, pad, 8) * 10
        mask_a = torch.tensor([[True] * n + [False] * pad])
        z_s, mask_s = torch.randn(1, 3, 8), torch.ones(1, 3, dtype=torch.bool)
        a1, s1 = f(z_a, mask_a, z_s, mask_s)
        a2, s2 = f(z_a2, mask_a, z_s, mask_s)
        assert torch.allclose(a1[:, :n], a2[:, :n], atol=1e-6)
        assert torch.allclose(s1, s2, atol=1e-6)


def test_padded_batch_matches_single():
    f = _small()
    torch.manual_seed(8)
    a_short, s = torch.randn(3, 8), torch.randn(2, 8)
    alone, _ = fuse(a_short, s, f)
    batch = torch.cat([a_short, torch.zeros(2, 8)])[None]
    out, _ = f(batch, torch.tensor([[True] * 3 + [False] * 2]), s[None], torch.ones(1, 2, dtype=torch.bool))
    assert torch.allclose(out[0, :3], alone, atol=1e-6)


def test_positional_encoding_values():
    pe = sinusoidal_encoding(3, 4, torch.float64)
    assert torch.allclose(pe[0], torch.tensor([0.0, 1.0, 0.0, 1.0], dtype=torch.float64))
    assert abs(float(pe[1, 0]) - 0.8414709848078965) < 1e-12
    assert abs(float(pe[1, 3]) - 0.9999500004166653) < 1e-12  # cos(1 / 100)


def test_heads_must_divide():
    with pytest.raises(ValueError):
        FusionConfig(d_model=10, n_heads=4)


def test_width_mismatch():
    with pytest.raises(ShapeMismatch):
        fuse(torch.randn(3, 4), torch.randn(2, 4), _small())
