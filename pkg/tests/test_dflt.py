import numpy as np
import pytest

from hdkd import dflt as D
from hdkd import tensor as T
from hdkd.tensor import Tensor


@pytest.fixture
def drng():
    return np.random.default_rng(11)


SMALL = D.DfltConfig(layers=2, patch=(2, 2), embed_dim=16, heads=2, head_dim=8)


def test_token_count_full_size(drng):
    cfg = D.DfltConfig()
    emb = D.PatchEmbed(192, cfg, (28, 28), drng)
    assert emb(Tensor(np.zeros((1, 192, 28, 28)))).shape == (1, 196 + 2, 256)


def test_token_shape_small_map(drng):
    emb = D.PatchEmbed(192, D.DfltConfig(), (4, 4), drng)
    assert emb(Tensor(np.zeros((3, 192, 4, 4)))).shape == (3, 6, 256)


def test_token_count_without_distill_token():
    cfg = D.DfltConfig(distill_token=False)
    assert cfg.n_tokens(28, 28) == 197


def test_indivisible_patch_rejected():
    with pytest.raises(ValueError):
        D.DfltConfig().n_patches(7, 8)


def test_head_geometry_validated():
    with pytest.raises(ValueError):
        D.DfltConfig(embed_dim=100, heads=3, head_dim=32)
    with pytest.raises(ValueError):
        D.DfltConfig(layers=0)


def test_position_embedding_size_checked(drng):
    emb = D.PatchEmbed(8, SMALL, (4, 4), drng)
    with pytest.raises(ValueError):
        emb(Tensor(np.zeros((1, 8, 8, 8))))


def test_zero_map_tokens_are_bias_plus_position(drng):
    emb = D.PatchEmbed(8, SMALL, (4, 4), drng)
    emb.proj.bias.data[...] = drng.standard_normal(16)
    out = emb(Tensor(np.zeros((2, 8, 4, 4)))).data
    pos = emb.pos_embed.data[0]
    np.testing.assert_allclose(out[:, 0], np.broadcast_to(emb.cls_token.data[0, 0] + pos[0], (2, 16)), rtol=1e-6)
    np.testing.assert_allclose(out[:, 1], np.broadcast_to(emb.dist_token.data[0, 0] + pos[1], (2, 16)), rtol=1e-6)
    np.testing.assert_allclose(out[:, 2:], np.broadcast_to(emb.proj.bias.data + pos[2:], (2, 4, 16)), rtol=1e-6)


def test_single_token_attention_passes_values(drng):
    cfg = D.DfltConfig(layers=1, embed_dim=8, heads=2, head_dim=4)
    attn = D.MultiHeadSelfAttention(cfg, drng)
    attn.record = True
    x = Tensor(drng.standard_normal((2, 1, 8)))
    out = attn(x)
    np.testing.assert_allclose(attn.last_attention, 1.0)
    v = (x.data @ attn.qkv.weight.data.T + attn.qkv.bias.data)[..., 16:]
    expected = v @ attn.proj.weight.data.T + attn.proj.bias.data
    np.testing.assert_allclose(out.data, expected, rtol=1e-5, atol=1e-6)


def test_attention_rows_sum_to_one(drng):
    attn = D.MultiHeadSelfAttention(SMALL, drng)
    attn.record = True
    attn(Tensor(drng.standard_normal((2, 7, 16))))
    a = attn.last_attention
    assert a.shape == (2, 2, 7, 7)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    assert np.all(a >= 0)


def test_attention_permutation_equivariant(f64, drng):
    attn = D.MultiHeadSelfAttention(SMALL, drng)
    x = drng.standard_normal((1, 6, 16))
    perm = drng.permutation(6)
    out = attn(Tensor(x)).data
    out_p = attn(Tensor(x[:, perm])).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)


def test_layer_permutation_equivariant(f64, drng):
    layer = D.TransformerLayer(SMALL, drng)
    x = drng.standard_normal((2, 5, 16))
    perm = drng.permutation(5)
    np.testing.assert_allclose(layer(Tensor(x[:, perm])).data, layer(Tensor(x)).data[:, perm], atol=1e-12)


def test_cls_logits_invariant_to_patch_order_without_position(f64, drng):
    cfg = D.DfltConfig(layers=2, patch=(1, 1), embed_dim=16, heads=2, head_dim=8)
    head = D.DFLT(8, (3, 3), 4, cfg, drng)
    head.embed.pos_embed.data[...] = 0
    f = drng.standard_normal((2, 8, 3, 3))
    flat = f.reshape(2, 8, 9)[:, :, drng.permutation(9)].reshape(2, 8, 3, 3)
    a, b = head(Tensor(f)), head(Tensor(flat))
    np.testing.assert_allclose(a[0].data, b[0].data, atol=1e-10)
    np.testing.assert_allclose(a[1].data, b[1].data, atol=1e-10)


def test_mlp_zero_weights_gives_output_bias(drng):
    mlp = D.TransformerMLP(SMALL, drng)
    mlp.fc1.weight.data[...] = 0
    mlp.fc2.weight.data[...] = 0
    mlp.fc2.bias.data[...] = drng.standard_normal(16)
    out = mlp(Tensor(drng.standard_normal((2, 3, 16)))).data
    np.testing.assert_allclose(out, np.broadcast_to(mlp.fc2.bias.data, (2, 3, 16)), rtol=1e-6)


def test_heads_are_independent(f64, drng):
    """Perturbing the value slice of head 1 leaves the pre-projection output of head 0 unchanged."""
    cfg = D.DfltConfig(layers=1, embed_dim=8, heads=2, head_dim=4)
    attn = D.MultiHeadSelfAttention(cfg, drng)
    attn.proj.weight.data[...] = np.eye(8)
    attn.proj.bias.data[...] = 0
    x = Tensor(drng.standard_normal((1, 5, 8)))
    before = attn(x).data.copy()
    attn.qkv.weight.data[16 + 4:16 + 8] += drng.standard_normal((4, 8))
    after = attn(x).data
    np.testing.assert_allclose(after[..., :4], before[..., :4], atol=1e-12)
    assert not np.allclose(after[..., 4:], before[..., 4:])


def test_final_tokens_are_layer_normalized(f64, drng):
    head = D.DFLT(8, (4, 4), 3, SMALL, drng)
    f3 = Tensor(drng.standard_normal((2, 8, 4, 4)))
    tokens = head.tokens(f3).data
    x = head.embed(f3)
    for layer in head.layers:
        x = layer(x)
    v = x.data.var(-1)
    np.testing.assert_allclose(tokens.mean(-1), 0, atol=1e-10)
    np.testing.assert_allclose(tokens.var(-1), v / (v + T.NORM_EPS), rtol=1e-10)


def test_dflt_heads(drng):
    head = D.DFLT(8, (4, 4), 3, SMALL, drng)
    cls_logits, dist_logits = head(Tensor(drng.standard_normal((2, 8, 4, 4))))
    assert cls_logits.shape == dist_logits.shape == (2, 3)
    plain = D.DFLT(8, (4, 4), 3, D.DfltConfig(layers=1, embed_dim=16, heads=2, head_dim=8, distill_token=False),
                   drng)
    assert plain(Tensor(np.zeros((2, 8, 4, 4))))[1] is None


def test_attention_maps_recorded(drng):
    head = D.DFLT(8, (4, 4), 3, SMALL, drng)
    head.set_record_attention(True)
    head(Tensor(drng.standard_normal((1, 8, 4, 4))))
    maps = head.attention_maps()
    assert len(maps) == 2 and maps[0].shape == (1, 2, 6, 6)
