import numpy as np
import pytest

from ctattn import autodiff as ad
from ctattn.attention import AttentionConfig, CTMultiHeadAttention, discrete_attention
from ctattn.interp import fit
from ctattn.model import (ContiFormer, ContiFormerLayer, ModelConfig, MultiHeadAttention,
                          Transformer, build_model, config_dict, load_checkpoint,
                          save_checkpoint, temporal_encoding)


def small_config(**kw):
    base = dict(input_dim=2, d_model=8, heads=2, layers=1, step_size=0.2)
    base.update(kw)
    return ModelConfig(**base)


def test_encoding_at_zero():
    np.testing.assert_array_equal(temporal_encoding(0.0, 6), [0, 1, 0, 1, 0, 1])


def test_encoding_first_column_is_sine(rng):
    t = rng.uniform(0, 10, 20)
    np.testing.assert_array_equal(temporal_encoding(t, 8)[:, 0], np.sin(t))


def test_encoding_injective(rng):
    enc = temporal_encoding(rng.uniform(0, 5, 100), 16)
    dist = np.linalg.norm(enc[:, None] - enc[None], axis=-1)
    assert dist[~np.eye(100, dtype=bool)].min() > 0


def test_encoding_needs_even_width():
    with pytest.raises(ValueError):
        temporal_encoding(1.0, 5)


def test_ablated_attention_is_positionwise(rng):
    cfg = small_config()
    layer = ContiFormerLayer(cfg, rng)
    layer.attn.wo.data[...] = 0.0
    x = rng.normal(size=(5, 8))
    t = np.linspace(0, 1, 5)
    base = layer(ad.Tensor(x), t).data
    x[3] += 1.0
    moved = layer(ad.Tensor(x), t).data
    keep = [0, 1, 2, 4]
    np.testing.assert_allclose(moved[keep], base[keep], atol=1e-14)
    assert base.shape == (5, 8)


def test_continuous_output_matches_direct_recomputation(rng):
    cfg = small_config()
    layer = ContiFormerLayer(cfg, rng)
    x = rng.normal(size=(1, 4, 8))
    t = np.array([[0.0, 0.25, 0.6, 1.0]])
    t_star = np.array([[0.4]])
    got = layer(ad.Tensor(x), t, query_times=t_star).data
    attn = layer.attn(x, t, query_times=t_star).data
    resid = fit(t[0], x[0])(t_star[0])
    z = layer.norm1(ad.Tensor(attn + resid))
    want = layer.norm2(layer.ffn(z) + z).data
    np.testing.assert_allclose(got, want, atol=1e-8)


def test_zero_layers_returns_embedding(rng):
    model = ContiFormer(small_config(layers=0), rng)
    x = rng.normal(size=(3, 2))
    t = np.array([0.0, 0.5, 1.0])
    np.testing.assert_allclose(model(x, t).data, model.embed(x, t).data, atol=1e-15)


def test_permutation_equivariance(rng):
    model = ContiFormer(small_config(layers=2), rng)
    x = rng.normal(size=(5, 2))
    t = np.array([0.0, 0.2, 0.45, 0.7, 1.0])
    perm = rng.permutation(5)
    base = model(x, t).data
    shuffled = model(x[perm], t[perm]).data
    np.testing.assert_allclose(shuffled, base[perm], atol=1e-12)


def test_batch_rows_are_independent(rng):
    model = ContiFormer(small_config(), rng)
    x = rng.normal(size=(2, 4, 2))
    t = np.sort(rng.uniform(0, 1, (2, 4)), axis=1)
    both = model(x, t).data
    for b in range(2):
        np.testing.assert_allclose(both[b], model(x[b], t[b]).data, atol=1e-12)


def test_checkpoint_round_trip(rng, tmp_path):
    cfg = small_config(layers=2)
    model = build_model(cfg, rng)
    x = rng.normal(size=(4, 2))
    t = np.array([0.0, 0.3, 0.5, 0.9])
    before = model(x, t).data
    path = tmp_path / "ck.json"
    save_checkpoint(path, {"net": model}, {"model": config_dict(cfg)}, seed=5)
    payload = load_checkpoint(path)
    fresh = build_model(ModelConfig.from_dict(payload["config"]["model"]),
                        np.random.default_rng(99))
    fresh.load_arrays(payload["params"]["net"])
    assert payload["seed"] == 5
    np.testing.assert_allclose(fresh(x, t).data, before, atol=1e-12)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_single_token_attention_is_its_value(rng):
    mha = MultiHeadAttention(4, 2, rng)
    x = ad.Tensor(rng.normal(size=(1, 1, 4)))
    want = x.data @ mha.wv.data @ mha.wo.data
    np.testing.assert_allclose(mha(x).data, want, atol=1e-14)


def test_discrete_mha_matches_reference(rng):
    mha = MultiHeadAttention(6, 3, rng)
    x = rng.normal(size=(5, 6))
    ref = discrete_attention(x @ mha.wq.data, x @ mha.wk.data, x @ mha.wv.data, 3) @ mha.wo.data
    np.testing.assert_allclose(mha(ad.Tensor(x[None])).data[0], ref, atol=1e-12)


def test_discrete_mha_matches_zero_field_continuous(rng):
    ct = CTMultiHeadAttention(4, AttentionConfig(heads=2), rng, zero_field=True)
    mha = MultiHeadAttention(4, 2, rng)
    for name in ("wq", "wk", "wv", "wo"):
        getattr(mha, name).data[...] = getattr(ct, name).data
    # queries read only the first two features, which are the same for every row
    ct.wq.data[2:] = 0.0
    mha.wq.data[2:] = 0.0
    x = rng.normal(size=(5, 4))
    x[:, :2] = rng.normal(size=2)
    cont = ct(x, np.sort(rng.uniform(0, 1, 5))).data
    disc = mha(ad.Tensor(x[None])).data[0]
    np.testing.assert_allclose(cont, disc, atol=1e-8)


@pytest.mark.parametrize("kind", ["transformer", "contiformer"])
def test_causal_models_ignore_the_future(rng, kind):
    model = build_model(small_config(kind=kind, causal=True, layers=2), rng)
    x = rng.normal(size=(5, 2))
    t = np.array([0.0, 0.2, 0.45, 0.7, 1.0])
    base = model(x, t).data
    x[3:] += 2.0
    moved = model(x, t).data
    np.testing.assert_allclose(moved[:3], base[:3], atol=1e-12)


def test_transformer_mask_token(rng):
    model = Transformer(small_config(kind="transformer", mask_token=True), rng)
    x = rng.normal(size=(4, 2))
    t = np.linspace(0, 1, 4)
    observed = np.array([True, False, True, False])
    base = model(x, t, observed=observed).data
    x[1] += 10.0
    np.testing.assert_allclose(model(x, t, observed=observed).data, base, atol=1e-14)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=6, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(kind="rnn")
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.0)


def test_dropout_only_in_training(rng):
    model = ContiFormer(small_config(dropout=0.5), rng)
    x = rng.normal(size=(3, 2))
    t = np.array([0.0, 0.5, 1.0])
    a = model(x, t, rng=np.random.default_rng(0)).data
    b = model(x, t, rng=np.random.default_rng(1)).data
    assert not np.allclose(a, b)
    model.eval()
    np.testing.assert_array_equal(model(x, t, rng=np.random.default_rng(0)).data,
                                  model(x, t, rng=np.random.default_rng(1)).data)
