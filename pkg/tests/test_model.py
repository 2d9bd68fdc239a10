import numpy as np
import pytest

from dlrrec import autodiff as ad
from dlrrec.dataio import EncodedData
from dlrrec.model import (DLRM, ChannelConfig, CheckpointError, ModelConfig, init_params, load_checkpoint,
                          param_shapes, save_checkpoint)

from conftest import fd_grad, rel_err


def small_cfg(**kw):
    base = dict(dense_dim=3, vocab=6, sparse_len=3, d_int=4, dense_hidden=[5], top_hidden=[6],
                channels=[ChannelConfig("user-summary", 7, [5]), ChannelConfig("item-summary", 7, [5]),
                          ChannelConfig("item-image", 5, [])])
    base.update(kw)
    return ModelConfig(**base)


def batch(rng, n=3, cfg=None, n_users=4, n_items=4):
    cfg = cfg or small_cfg()
    sparse = rng.integers(0, cfg.vocab, size=(n, cfg.sparse_len))
    return EncodedData([f"u{i}" for i in range(n_users)], [f"i{i}" for i in range(n_items)],
                       rng.integers(0, n_users, n), rng.integers(0, n_items, n),
                       rng.uniform(-1, 1, (n, cfg.dense_dim)), sparse, rng.integers(0, 2, n))


def tables(rng, cfg, n_users=4, n_items=4):
    out = {}
    for ch in cfg.channels:
        out[ch.name] = rng.normal(size=(n_users if ch.side == "user" else n_items, ch.d_raw))
    return out


def test_init_deterministic_and_ranges():
    cfg = ModelConfig()
    a, b = init_params(cfg), init_params(cfg)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    for name, arr in a.items():
        if name.endswith(".bias"):
            assert not arr.any()
        elif name == "sparse.embedding":
            assert np.abs(arr).max() <= 1 / np.sqrt(cfg.d_int)
        else:
            assert np.abs(arr).max() <= np.sqrt(6 / sum(arr.shape))


def test_default_projection_is_384_to_32(rng):
    cfg = ModelConfig()
    assert param_shapes(cfg)["proj.user-summary.0.weight"] == (384, 64)
    out = DLRM(cfg).project("user-summary", rng.normal(size=384))
    assert out.shape == (1, 32)


def test_zero_projection_gives_zero(rng):
    cfg = ModelConfig()
    m = DLRM(cfg, {k: np.zeros_like(v) for k, v in init_params(cfg).items()})
    out = m.project("item-summary", rng.normal(size=(2, 384)))
    np.testing.assert_array_equal(out.value, np.zeros((2, 32)))


def test_identity_projection_copies_prefix(rng):
    cfg = ModelConfig(channels=[ChannelConfig("user-summary", 384, []), ChannelConfig("item-summary"),
                                ChannelConfig("item-image")])
    params = init_params(cfg)
    params["proj.user-summary.0.weight"] = np.eye(384, 32)
    x = rng.normal(size=384)
    np.testing.assert_array_equal(DLRM(cfg, params).project("user-summary", x).value[0], x[:32])


def test_project_dim_mismatch():
    with pytest.raises(ad.ShapeError):
        DLRM(ModelConfig()).project("user-summary", np.zeros(383))


def test_pool_sparse_pad_convention():
    cfg = ModelConfig()
    m = DLRM(cfg)
    emb = m.params["sparse.embedding"]
    np.testing.assert_array_equal(m.pool_sparse([[3, 179, 179]]).value[0], emb[3])
    np.testing.assert_array_equal(m.pool_sparse([[179] * 11]).value[0], np.zeros(32))
    np.testing.assert_allclose(m.pool_sparse([[2, 2, 179]]).value[0], emb[2], rtol=0, atol=1e-15)
    with pytest.raises(IndexError):
        m.pool_sparse([[180, 179]])


def test_all_zero_params_give_half(rng):
    cfg = small_cfg()
    m = DLRM(cfg, {k: np.zeros_like(v) for k, v in init_params(cfg).items()})
    out = m.forward(batch(rng, cfg=cfg), tables(rng, cfg))
    np.testing.assert_array_equal(out.logits.value, 0.0)
    np.testing.assert_array_equal(out.probabilities, 0.5)


def test_interaction_dot_of_equal_unit_vectors():
    # two pathways both equal to e1 -> their dot is 1
    e1 = np.eye(4)[:1]
    assert ad.sum(ad.mul(e1, e1), axis=1).value[0] == 1.0


def test_top_input_width_per_mask():
    assert small_cfg(mask="text+image").top_input_dim == 4 + 10
    assert small_cfg(mask="text").top_input_dim == 4 + 6
    assert small_cfg(mask="image").top_input_dim == 4 + 3
    with pytest.raises(ValueError):
        small_cfg(mask="audio")


def test_logit_gradient_matches_fd_one_record(rng):
    cfg = small_cfg()
    m = DLRM(cfg)
    b, t = batch(rng, n=1, cfg=cfg), tables(rng, cfg)
    grads = m.grads_by_name(ad.backward(ad.sum(m.forward(b, t).logits)))
    for name, arr in m.params.items():
        num = fd_grad(lambda: m.forward(b, t).logits.value[0], arr)
        assert rel_err(grads.get(name, np.zeros_like(arr)), num) < 1e-4, name


@pytest.mark.parametrize("seed", range(5))
def test_every_parameter_reachable(seed):
    rng = np.random.default_rng(seed)
    cfg = small_cfg(seed=seed)
    m = DLRM(cfg)
    b, t = batch(rng, n=8, cfg=cfg), tables(rng, cfg)
    logits = m.forward(b, t).logits
    loss = ad.mean(ad.softplus(ad.mul(logits, 1.0 - 2.0 * b.labels)))
    grads = m.grads_by_name(ad.backward(loss))
    assert set(grads) == set(m.params)
    for name, g in grads.items():
        assert np.any(g != 0), name


def test_masked_channel_has_no_influence(rng):
    cfg = small_cfg(mask="text")
    m = DLRM(cfg)
    b, t = batch(rng, cfg=cfg), tables(rng, cfg)
    before = m.forward(b, t).logits.value
    t["item-image"] = rng.normal(size=t["item-image"].shape) * 100
    assert m.forward(b, t).logits.value.tobytes() == before.tobytes()


def test_eval_forward_deterministic_and_probabilities_open_interval(rng):
    cfg = small_cfg()
    m = DLRM(cfg)
    b, t = batch(rng, n=5, cfg=cfg), tables(rng, cfg)
    p1, p2 = m.forward(b, t).probabilities, m.forward(b, t).probabilities
    assert p1.tobytes() == p2.tobytes()
    assert np.all((p1 > 0) & (p1 < 1))


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = small_cfg()
    m = DLRM(cfg)
    save_checkpoint(m.params, tmp_path / "c.ckpt")
    m2 = DLRM(cfg, load_checkpoint(tmp_path / "c.ckpt", cfg))
    b, t = batch(rng, cfg=cfg), tables(rng, cfg)
    np.testing.assert_allclose(m2.forward(b, t).logits.value, m.forward(b, t).logits.value, rtol=0, atol=1e-15)
    assert all(m.params[k].tobytes() == m2.params[k].tobytes() for k in m.params)


def test_checkpoint_mismatched_config(tmp_path):
    save_checkpoint(DLRM(small_cfg()).params, tmp_path / "c.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.ckpt", small_cfg(d_int=5))


def test_checkpoint_of_zeros(tmp_path):
    import json
    params = {k: np.zeros_like(v) for k, v in init_params(small_cfg()).items()}
    save_checkpoint(params, tmp_path / "c.ckpt")
    obj = json.loads((tmp_path / "c.ckpt").read_text())
    assert all(v == 0 for e in obj.values() for v in e["values"])
