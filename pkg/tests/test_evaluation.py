import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcomp import data as D
from semcomp import evaluation as E
from semcomp import tensor as T
from semcomp.encoders import ModelConfig, VLModel

VOCAB = D.Vocabulary()


def brute_force(sims_row, cand_ids, k, scores):
    """Sort every candidate by (stage-1 sim desc, id), re-sort the first k by (score desc, id)."""
    stage1 = sorted(range(len(cand_ids)), key=lambda i: (-sims_row[i], cand_ids[i]))
    top = sorted(stage1[:k], key=lambda i: (-scores[i], cand_ids[i]))
    return [cand_ids[i] for i in top + stage1[k:]]


def toy_corpus(rng, n):
    sims = rng.integers(-3, 4, n).astype(float) / 3  # coarse values force ties
    scores = rng.integers(0, 4, n).astype(float) / 3
    ids = rng.permutation(100)[:n]
    return sims, ids, scores


def test_two_stage_matches_brute_force_on_random_corpora():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        sims, ids, scores = toy_corpus(rng, n)
        k = int(rng.integers(1, n + 1))
        ranked, _ = E.two_stage_rank(sims, ids, k, lambda pos: scores[pos])
        assert ranked.tolist() == brute_force(sims, ids, k, scores)


def test_hand_set_corpus_of_eight():
    ids = np.arange(8)
    sims = np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2])
    scores = np.array([0.1, 0.9, 0.5, 0.5, 0.99, 0.0, 0.0, 0.0])
    ranked, sc = E.two_stage_rank(sims, ids, 4, lambda pos: scores[pos])
    assert ranked.tolist() == [1, 2, 3, 0, 4, 5, 6, 7]
    assert sc == {0: 0.1, 1: 0.9, 2: 0.5, 3: 0.5}


def test_k_extremes():
    rng = np.random.default_rng(1)
    sims, ids, scores = rng.random(6), np.arange(6), rng.random(6)
    full, _ = E.two_stage_rank(sims, ids, 6, lambda pos: scores[pos])
    assert full.tolist() == np.argsort(-scores, kind="stable").tolist()
    one, _ = E.two_stage_rank(sims, ids, 1, lambda pos: scores[pos])
    assert one[0] == ids[np.argmax(sims)]
    with pytest.raises(ValueError):
        E.two_stage_rank(sims, ids, 7, lambda pos: scores[pos])
    with pytest.raises(ValueError):
        E.two_stage_rank(np.zeros(0), np.zeros(0, int), 1, lambda pos: pos)


def test_full_rerank_ignores_stage1_scores():
    rng = np.random.default_rng(2)
    ids, scores = np.arange(7), rng.random(7)
    a, _ = E.two_stage_rank(rng.random(7), ids, 7, lambda pos: scores[pos])
    b, _ = E.two_stage_rank(rng.random(7), ids, 7, lambda pos: scores[pos])
    assert np.array_equal(a, b)


def result(rankings, qids=None):
    qids = np.arange(len(rankings)) if qids is None else np.asarray(qids)
    return E.RetrievalResult("t2v", qids, [np.asarray(r) for r in rankings], np.zeros((1, 1)), [])


def test_recall_cases():
    n = 5
    gt = {i: [i] for i in range(n)}
    assert E.recall_at_k(result([[i] + [j for j in range(n) if j != i] for i in range(n)]), gt, 1) == 1.0
    rev = [[j for j in reversed(range(n)) if j != i] + [i] for i in range(n)]
    assert E.recall_at_k(result(rev), gt, 1) == 0.0
    with pytest.raises(KeyError):
        E.recall_at_k(result([[0, 1]], qids=[9]), gt, 1)
    with pytest.raises(KeyError):
        E.recall_at_k(result([[0, 1]]), {0: [7]}, 1)


def test_recall_five_captions_per_image():
    # image queries 0 and 1; image q owns captions 5q .. 5q+4
    gt = {0: [0, 1, 2, 3, 4], 1: [5, 6, 7, 8, 9]}
    rankings = [[7, 8, 3, 0, 1, 2, 4, 5, 6, 9], [0, 1, 2, 3, 4, 9, 5, 6, 7, 8]]
    r = result(rankings)
    assert E.recall_at_k(r, gt, 1) == 0.0
    assert E.recall_at_k(r, gt, 3) == 0.5
    assert E.recall_at_k(r, gt, 6) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10**6))
def test_recall_monotone_in_k(n, seed):
    rng = np.random.default_rng(seed)
    r = result([rng.permutation(n) for _ in range(n)])
    gt = {i: [i] for i in range(n)}
    vals = [E.recall_at_k(r, gt, k) for k in range(1, n + 1)]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert all(a <= b for a, b in itertools.pairwise(vals)) and vals[-1] == 1.0


def small_model(frames=1, seed=0):
    cfg = ModelConfig(dim=16, heads=2, vision_layers=1, text_layers=1, fusion_layers=2, fusion_hidden=32,
                      mlp_ratio=2, frames=frames, init_seed=seed)
    return VLModel(cfg)


def test_encode_corpus_batch_invariance_and_norms():
    m = small_model()
    entries = D.make_manifest(9, 3)
    ds = D.PairDataset(entries + [D.ManifestEntry(99, entries[0].seed, "image")], VOCAB, 1)
    a = E.encode_corpus(ds, m, batch_size=1)
    b = E.encode_corpus(ds, m, batch_size=8)
    for x, y in ((a.vision_index, b.vision_index), (a.text_index, b.text_index)):
        assert np.max(np.abs(x.vectors - y.vectors)) <= 1e-6
        assert np.allclose(np.linalg.norm(x.vectors, axis=1), 1.0, atol=1e-5)
    assert np.array_equal(a.vision_index.vectors[0], a.vision_index.vectors[-1])
    assert np.array_equal(a.text_index.vectors[0], a.text_index.vectors[-1])


def test_encode_corpus_geometry_mismatch():
    ds = D.PairDataset(D.make_manifest(3, 0, "video"), VOCAB, 4)
    with pytest.raises(E.GeometryError):
        E.encode_corpus(ds, small_model(frames=1))


def test_model_retrieval_end_to_end():
    m = small_model()
    ds = D.PairDataset(D.make_manifest(10, 4), VOCAB, 1)
    corpus = E.encode_corpus(ds, m)
    for direction in E.DIRECTIONS:
        res = E.two_stage_retrieval(corpus, m, direction, k=4)
        for row in res.rankings:
            assert sorted(row.tolist()) == sorted(corpus.ids.tolist())
        assert all(0 <= v <= 1 for v in res.recall.values())
        line = res.metrics_line()
        assert line.startswith(f"dir={direction} r1=") and line.endswith("n=10")


def test_vtm_probabilities_batch_invariant():
    m = small_model()
    ds = D.PairDataset(D.make_manifest(6, 5), VOCAB, 1)
    corpus = E.encode_corpus(ds, m)
    vis, txt = np.array([0, 1, 2, 3, 4, 5]), np.array([5, 4, 3, 2, 1, 0])
    a = E.vtm_probabilities(m, corpus, vis, txt, chunk=6)
    b = np.concatenate([E.vtm_probabilities(m, corpus, vis[i : i + 1], txt[i : i + 1]) for i in range(6)])
    assert np.allclose(a, b, atol=1e-6)


def test_heatmap_grid_and_uniform_attention():
    frames, n = 2, 16
    uniform = np.full((3, frames * (n + 1)), 1.0 / (frames * (n + 1)))
    grid = E.heatmap_grid(uniform, frames, n)
    assert grid.shape == (2, 4, 4)
    assert (E.normalize_heatmap(grid) == 128).all()
    with pytest.raises(E.GeometryError):
        E.heatmap_grid(np.ones((2, 2 * 13)), 2, 12)


def test_heatmap_pooling_dominates_each_head():
    rng = np.random.default_rng(3)
    att = rng.random((4, 2 * 17))
    att /= att.sum(1, keepdims=True)
    pooled = E.heatmap_grid(att, 2, 16)
    for h in range(4):
        assert (E.heatmap_grid(att[h : h + 1], 2, 16) <= pooled).all()


def test_heatmap_normalization_range():
    g = np.random.default_rng(4).random((2, 4, 4))
    img = E.normalize_heatmap(g)
    assert img.min() == 0 and img.max() == 255


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(5).integers(0, 256, (4, 7)).astype(np.uint8)
    E.write_pgm(tmp_path / "x.pgm", img, ["layer=1", "pooling=max"])
    back, comments = E.read_pgm(tmp_path / "x.pgm")
    assert np.array_equal(back, img) and comments == ["layer=1", "pooling=max"]


def test_export_attention_heatmap(tmp_path):
    m = small_model(frames=4)
    vis, txt = D.generate_video_pair(1, VOCAB)
    paths = E.export_attention_heatmap(E.HeatmapSpec(7, 2), m, (vis, txt), tmp_path)
    assert [p.name for p in paths] == [f"7_2_{f}.pgm" for f in range(4)]
    for p in paths:
        img, comments = E.read_pgm(p)
        assert img.shape == (4, 4) and len(comments) == 2
        assert "layer=1" in comments[0] and "max over 2 heads" in comments[0]
    with pytest.raises(IndexError):
        E.export_attention_heatmap(E.HeatmapSpec(7, txt.valid_len), m, (vis, txt), tmp_path)


def test_heatmap_rows_sum_to_one():
    m = small_model(frames=4)
    vis, txt = D.generate_video_pair(2, VOCAB)
    row = E.attention_row(m, vis, txt, E.HeatmapSpec(0, 0))
    assert np.allclose(row.sum(-1), 1.0, atol=1e-5)


def test_forced_uniform_attention_exports_mid_gray(tmp_path):
    m = small_model(frames=1)
    # zero query/key weights make every score equal, hence uniform attention
    for layer in m.fusion.layers:
        for part in ("q", "k"):
            lin = getattr(layer.t_cross, part)
            lin.weight.data[:] = 0
            lin.bias.data[:] = 0
    vis, txt = D.generate_scene_pair(3, VOCAB)
    with T.no_grad():
        paths = E.export_attention_heatmap(E.HeatmapSpec(0, 0), m, (vis, txt), tmp_path)
    img, _ = E.read_pgm(paths[0])
    assert (img == 128).all()
