import math

import numpy as np
import pytest

from semcomp import data as D
from semcomp import tensor as T
from semcomp.encoders import EncoderOutput, ModelConfig, VLModel, assemble_input, vision_global
from semcomp.nn import Linear, MultiHeadAttention
from semcomp.trainer import extend_temporal, load_into_model

VOCAB = D.Vocabulary()


def small(**kw):
    base = dict(dim=16, heads=2, vision_layers=2, text_layers=1, fusion_layers=2, fusion_hidden=32, mlp_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


def model64(**kw):
    with T.float64():
        return VLModel(small(**kw))


def pixels(n=2, frames=1, seed=0):
    return np.random.default_rng(seed).random((n, frames, 3, 32, 32))


def texts(seeds=(0, 1)):
    samples = [D.generate_scene_pair(s, VOCAB)[1] for s in seeds]
    batch = D.PairBatch([D.generate_scene_pair(s, VOCAB)[0] for s in seeds], samples, list(range(len(seeds))))
    return batch.token_ids(), batch.valid_mask()


def test_config_validation():
    with pytest.raises(ValueError, match="heads"):
        ModelConfig(dim=10, heads=4)
    with pytest.raises(ValueError, match="patch"):
        ModelConfig(image_size=30)


def test_output_shapes():
    m = model64(frames=4)
    assert m.vision(pixels(2, 4)).tokens.shape == (2, 4, 17, 16)
    ids, valid = texts()
    assert m.text(ids, valid).tokens.shape == (2, ids.shape[1], 16)


def test_assemble_input_zero_embeddings():
    with T.float64():
        rng = np.random.default_rng(0)
        sp, tp, cls = (T.Tensor(rng.standard_normal(s)) for s in ((5, 3), (2, 3), (3,)))
        x = assemble_input(T.Tensor(np.zeros((1, 2, 4, 3))), sp, tp, cls).data[0]
    assert x.shape == (2, 5, 3)
    for i in range(2):
        assert np.allclose(x[i, 1:], tp.data[i] + sp.data[1:])
        assert np.allclose(x[i, 0], cls.data + tp.data[i] + sp.data[0])
    # equal patch embeddings: frames differ by exactly the temporal difference
    assert np.allclose(x[0, 3] - x[1, 3], tp.data[0] - tp.data[1])
    with pytest.raises(T.DimensionError):
        assemble_input(T.Tensor(np.zeros((1, 2, 4, 3))), sp, tp[:1], cls)


def test_image_equals_single_frame_video_bitwise():
    img_model = VLModel(small(frames=1))
    vid_model = VLModel(small(frames=4, init_seed=9))
    params = {n: p.data for n, p in img_model.named_parameters()}
    load_into_model(vid_model, extend_temporal(params, 4))
    x = pixels(3, 1)
    a = img_model.vision(x).tokens.data
    b = vid_model.vision(x).tokens.data
    assert np.array_equal(a, b)


def test_frame_permutation_equivariance():
    m = model64(frames=4)
    x = pixels(2, 4, seed=3)
    perm = np.array([2, 0, 3, 1])
    out = m.vision(x).tokens.data
    m.vision.temporal_pos.data = m.vision.temporal_pos.data[perm]
    out_p = m.vision(x[:, perm]).tokens.data
    assert np.max(np.abs(out_p - out[:, perm])) <= 1e-6


def test_spatial_attention_stays_within_frame():
    m = model64(frames=2)
    for blk in m.vision.blocks:
        blk.bypass_temporal = True
    x = pixels(1, 2, seed=4)
    y = x.copy()
    y[:, 1] = 0.0
    a, b = m.vision(x).tokens.data, m.vision(y).tokens.data
    assert np.allclose(a[:, 0], b[:, 0], atol=0, rtol=0)
    assert not np.allclose(a[:, 1], b[:, 1])


def test_single_frame_temporal_reduces_to_own_frame():
    m = model64(frames=1)
    assert m.vision(pixels(2, 1)).tokens.shape == (2, 1, 17, 16)


def test_sequential_order_differs_but_keeps_shape():
    a = model64(frames=2)
    b = model64(frames=2, visual_block_order="sequential")
    x = pixels(1, 2)
    ta, tb = a.vision(x).tokens.data, b.vision(x).tokens.data
    assert ta.shape == tb.shape and not np.allclose(ta, tb)


def test_text_padding_invariance():
    m = model64()
    s = D.generate_scene_pair(5, VOCAB)[1]
    k = s.valid_len
    short = m.text(s.ids[None, :k], np.ones((1, k), bool)).tokens.data
    pad_valid = (np.arange(50) < k)[None]
    long = m.text(s.ids[None], pad_valid).tokens.data
    assert np.max(np.abs(short[0] - long[0, :k])) <= 1e-6


def test_pad_keys_get_zero_attention_and_rows_sum_to_one():
    m = model64(frames=2)
    ids, valid = texts((0, 1, 2))
    fo = m.fusion(m.vision(pixels(3, 2)), m.text(ids, valid), valid)
    assert len(fo.attention) == 2
    for att in fo.attention:
        v2t, t2v = att["v2t"], att["t2v"]
        assert v2t.shape == (3, 2, 34, ids.shape[1]) and t2v.shape == (3, 2, ids.shape[1], 34)
        assert np.allclose(v2t.sum(-1), 1, atol=1e-5) and np.allclose(t2v.sum(-1), 1, atol=1e-5)
        assert np.all(v2t[~np.broadcast_to(valid[:, None, None, :], v2t.shape)] == 0)


def test_attention_hand_rolled_oracle():
    rng = np.random.default_rng(0)
    with T.float64():
        mha = MultiHeadAttention(rng, 4, 1, "fusion")
        q_in = T.Tensor(rng.standard_normal((1, 2, 4)))
        kv_in = T.Tensor(rng.standard_normal((1, 2, 4)))
        out, probs = mha(q_in, kv_in)
    W = {n: getattr(mha, n).weight.data for n in "qkvo"}
    B = {n: getattr(mha, n).bias.data for n in "qkvo"}
    q = q_in.data[0] @ W["q"] + B["q"]
    k = kv_in.data[0] @ W["k"] + B["k"]
    v = kv_in.data[0] @ W["v"] + B["v"]
    s = q @ k.T / 2.0
    p = np.exp(s - s.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    ref = (p @ v) @ W["o"] + B["o"]
    assert np.allclose(out.data[0], ref, atol=1e-6)
    assert np.allclose(probs[0, 0], p, atol=1e-6)


def test_singleton_text_cross_attention_is_value_projection():
    rng = np.random.default_rng(1)
    with T.float64():
        mha = MultiHeadAttention(rng, 8, 2, "fusion")
        vis = T.Tensor(rng.standard_normal((1, 5, 8)))
        txt = T.Tensor(rng.standard_normal((1, 3, 8)))
        valid = np.array([[True, False, False]])
        out, _ = mha(vis, txt, valid)
        expect = mha.o(mha.v(txt[:, 0:1])).data
    assert np.allclose(out.data, np.broadcast_to(expect, out.shape), atol=1e-12)


def test_global_extraction_modes():
    a = model64(frames=1)
    b = model64(frames=1, vision_global_mode="mean_pooling")
    ids, valid = texts()
    x = pixels()
    fa = a.fusion(a.vision(x), a.text(ids, valid), valid)
    fb = b.fusion(b.vision(x), b.text(ids, valid), valid)
    assert np.array_equal(fa.vision_tokens.data, fb.vision_tokens.data)
    assert np.array_equal(fa.vision_global.data, fa.vision_tokens.data[:, 0, 0])
    assert np.allclose(fb.vision_global.data, fb.vision_tokens.data.reshape(2, 17, 16).mean(1))


def test_vision_global_mean_of_frame_cls():
    tok = T.Tensor(np.random.default_rng(2).standard_normal((2, 3, 5, 4)))
    assert np.allclose(vision_global(tok).data, tok.data[:, :, 0].mean(1))


def test_identity_projection_head():
    rng = np.random.default_rng(0)
    with T.float64():
        head = Linear(rng, 6, 6, "head")
        head.weight.data = np.eye(6)
        x = T.Tensor(rng.standard_normal((3, 6)))
        assert np.array_equal(head(x).data, x.data)


def test_cl_gradient_reaches_projection_heads():
    from semcomp import objectives as O

    m = model64()
    ids, valid = texts()
    v = m.vision_proj(m.uni_global(m.vision(pixels())))
    t = m.text_proj(m.uni_global(m.text(ids, valid)))
    loss, _, _ = O.contrastive_loss_cl(v, t, m.cl_temperature())
    T.backward(loss)
    assert np.abs(m.vision_proj.weight.grad).sum() > 0 and np.abs(m.text_proj.weight.grad).sum() > 0
    assert m.log_tau.grad is not None


def test_temperature_clamped():
    m = model64()
    m.log_tau.data = np.array(5.0)
    assert m.cl_temperature().item() == 1.0
    m.log_tau.data = np.array(-9.0)
    assert math.isclose(m.cl_temperature().item(), 0.01)


def test_geometry_mismatch():
    m = model64(frames=1)
    with pytest.raises(ValueError):
        m.vision(pixels(1, 2))
    with pytest.raises(ValueError):
        m.vision(np.zeros((1, 1, 3, 16, 16)))
