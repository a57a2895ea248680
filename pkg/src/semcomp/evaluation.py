"""Zero-shot retrieval with top-k re-ranking, recall@K, and cross-attention heatmaps."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .encoders import EncoderOutput, VLModel

DIRECTIONS = ("t2v", "v2t")


class GeometryError(ValueError):
    pass


@dataclass
class EmbeddingIndex:
    ids: np.ndarray
    vectors: np.ndarray  # (n, proj_dim), unit rows

    def __post_init__(self):
        if len(self.ids) != len(self.vectors):
            raise ValueError(f"{len(self.ids)} ids for {len(self.vectors)} vectors")


@dataclass
class EncodedCorpus:
    """Uni-modal token outputs kept around so the top-k can be re-fused."""

    ids: np.ndarray
    vision_tokens: np.ndarray  # (n, M, N+1, D)
    text_tokens: np.ndarray  # (n, K, D), K = longest caption in the corpus
    valid: np.ndarray  # (n, K)
    vision_index: EmbeddingIndex
    text_index: EmbeddingIndex


@dataclass
class RetrievalResult:
    direction: str
    query_ids: np.ndarray
    rankings: list  # per query, candidate ids best first
    stage1: np.ndarray  # (queries, candidates) cosine similarities
    vtm_scores: list  # per query, {candidate id: matching probability}
    recall: dict = field(default_factory=dict)

    def metrics_line(self):
        r = self.recall
        return f"dir={self.direction} r1={r[1]:.4f} r5={r[5]:.4f} r10={r[10]:.4f} n={len(self.query_ids)}"


def _unit(x):
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def _check_geometry(dataset: D.PairDataset, model: VLModel):
    if len(dataset) == 0:
        raise GeometryError("empty corpus")
    frames = dataset.batch([0]).vision[0].frames
    cfg = model.cfg
    if frames.shape[-1] != cfg.image_size or frames.shape[-2] != cfg.image_size:
        raise GeometryError(f"corpus frames are {frames.shape[-2:]}, model expects {cfg.image_size}px")
    if frames.shape[0] > model.vision.temporal_pos.shape[0]:
        raise GeometryError(f"corpus has {frames.shape[0]} frames, model has {model.vision.temporal_pos.shape[0]} slots")


def encode_corpus(dataset: D.PairDataset, model: VLModel, batch_size=16) -> EncodedCorpus:
    """Run both uni-modal encoders over every pair without recording gradients."""
    _check_geometry(dataset, model)
    n = len(dataset)
    full = dataset.batch(range(n))
    k = full.token_ids().shape[1]
    vtok, ttok, vvec, tvec = [], [], [], []
    with T.no_grad():
        for lo in range(0, n, batch_size):
            b = dataset.batch(range(lo, min(n, lo + batch_size)))
            ids = np.stack([t.ids[:k] for t in b.text])
            valid = np.arange(k)[None, :] < np.array([t.valid_len for t in b.text])[:, None]
            vo = model.vision(b.pixels())
            to = model.text(ids, valid)
            vtok.append(vo.tokens.data)
            ttok.append(to.tokens.data)
            vvec.append(model.vision_proj(model.uni_global(vo)).data)
            tvec.append(model.text_proj(model.uni_global(to)).data)
    ids = np.array(full.pair_ids)
    return EncodedCorpus(
        ids,
        np.concatenate(vtok),
        np.concatenate(ttok),
        full.valid_mask(),
        EmbeddingIndex(ids, _unit(np.concatenate(vvec).astype(np.float64))),
        EmbeddingIndex(ids.copy(), _unit(np.concatenate(tvec).astype(np.float64))),
    )


def stage1_order(sims_row, cand_ids):
    """Candidate positions by descending similarity, lower id first on ties."""
    return np.lexsort((cand_ids, -sims_row))


def two_stage_rank(sims_row, cand_ids, k, score_fn):
    """Rank one query: re-score the stage-1 top-k, then append the rest in stage-1 order.

    ``score_fn(positions)`` returns matching probabilities for those candidate positions.
    Returns (ranked candidate ids, {id: score} for the re-scored ones).
    """
    cand_ids = np.asarray(cand_ids)
    if len(cand_ids) == 0:
        raise ValueError("empty candidate set")
    if not 1 <= k <= len(cand_ids):
        raise ValueError(f"k={k} outside [1, {len(cand_ids)}]")
    order = stage1_order(np.asarray(sims_row), cand_ids)
    top = order[:k]
    scores = np.asarray(score_fn(top), dtype=np.float64)
    top = top[np.lexsort((cand_ids[top], -scores))]
    ranked = np.concatenate([top, order[k:]])
    return cand_ids[ranked], {int(cand_ids[p]): float(s) for p, s in zip(order[:k], scores)}


def vtm_probabilities(model: VLModel, corpus: EncodedCorpus, vis_pos, txt_pos, chunk=64):
    """Matching probability for each (vision row, text row) pair of the corpus."""
    vis_pos, txt_pos = np.asarray(vis_pos), np.asarray(txt_pos)
    out = []
    with T.no_grad():
        for lo in range(0, len(vis_pos), chunk):
            vp, tp = vis_pos[lo : lo + chunk], txt_pos[lo : lo + chunk]
            valid = corpus.valid[tp]
            kk = int(valid.sum(axis=1).max())
            fo = model.fusion(
                EncoderOutput(T.Tensor(corpus.vision_tokens[vp])),
                EncoderOutput(T.Tensor(corpus.text_tokens[tp][:, :kk])),
                valid[:, :kk],
            )
            logits = model.vtm_head(T.concat([fo.vision_global, fo.text_global], axis=-1)).data.astype(np.float64)
            logits = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            out.append(p[:, 1] / p.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def recall_at_k(result: RetrievalResult, ground_truth: dict, k: int) -> float:
    """Fraction of queries with any ground-truth id ranked within the top ``k``."""
    hits = 0
    for q, ranking in zip(result.query_ids, result.rankings):
        q = int(q)
        if q not in ground_truth:
            raise KeyError(f"no ground truth for query {q}")
        gt = set(ground_truth[q])
        if not gt:
            raise ValueError(f"query {q} has an empty ground-truth set")
        unknown = gt - set(int(c) for c in ranking)
        if unknown:
            raise KeyError(f"ground-truth ids {sorted(unknown)} are not candidates")
        hits += bool(gt & set(int(c) for c in ranking[:k]))
    return hits / len(result.query_ids)


def two_stage_retrieval(corpus: EncodedCorpus, model: VLModel, direction="t2v", k=8) -> RetrievalResult:
    """Retrieve within the corpus; the pair with the same id is the ground truth."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    ids = corpus.ids
    q_idx, c_idx = (corpus.text_index, corpus.vision_index) if direction == "t2v" else (
        corpus.vision_index,
        corpus.text_index,
    )
    sims = q_idx.vectors @ c_idx.vectors.T
    rankings, scores = [], []
    for qi in range(len(ids)):
        if direction == "t2v":
            fn = lambda pos, qi=qi: vtm_probabilities(model, corpus, pos, np.full(len(pos), qi))
        else:
            fn = lambda pos, qi=qi: vtm_probabilities(model, corpus, np.full(len(pos), qi), pos)
        ranked, sc = two_stage_rank(sims[qi], ids, k, fn)
        rankings.append(ranked)
        scores.append(sc)
    res = RetrievalResult(direction, ids.copy(), rankings, sims, scores)
    gt = {int(i): [int(i)] for i in ids}
    res.recall = {r: recall_at_k(res, gt, min(r, len(ids))) for r in (1, 5, 10)}
    return res


def stage1_recall(corpus: EncodedCorpus, direction="t2v", k=1) -> float:
    """Recall@k of the cosine ranking alone (no re-ranking)."""
    q, c = (corpus.text_index, corpus.vision_index) if direction == "t2v" else (corpus.vision_index, corpus.text_index)
    sims = q.vectors @ c.vectors.T
    hits = 0
    for i in range(len(corpus.ids)):
        top = corpus.ids[stage1_order(sims[i], c.ids)[:k]]
        hits += int(corpus.ids[i] in top)
    return hits / len(corpus.ids)


# ---------------------------------------------------------------------------
# heatmaps


@dataclass
class HeatmapSpec:
    pair_id: int
    token: int = 0  # 0 is the text [CLS]
    layer: int = -1


def heatmap_grid(att_row: np.ndarray, frames: int, num_patches: int) -> np.ndarray:
    """(H, M*(N+1)) attention of one text query -> (M, g, g) max over heads, frame [CLS] dropped."""
    g = int(round(np.sqrt(num_patches)))
    if g * g != num_patches:
        raise GeometryError(f"{num_patches} patches do not form a square grid")
    h, lv = att_row.shape
    if lv != frames * (num_patches + 1):
        raise GeometryError(f"attention row has {lv} keys, expected {frames * (num_patches + 1)}")
    pooled = att_row.max(axis=0).reshape(frames, num_patches + 1)[:, 1:]
    return pooled.reshape(frames, g, g)


def normalize_heatmap(grid: np.ndarray) -> np.ndarray:
    """Min-max to 0..255 jointly over all frames; a constant map is mid-gray."""
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(grid.shape, 128, np.uint8)
    return np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray, comments=()):
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    h, w = pixels.shape
    head = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n255\n"
    Path(path).write_bytes(head.encode("ascii") + pixels.tobytes())


def read_pgm(path):
    """Returns (pixels, comments)."""
    raw = Path(path).read_bytes()
    pos, fields_, comments = 0, [], []
    while len(fields_) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            fields_.extend(line.split())
    if fields_[0] != "P5" or fields_[3] != "255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields_[1]), int(fields_[2])
    pixels = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).copy(), comments


def attention_row(model: VLModel, vision: D.VisionSample, text: D.TextSample, spec: HeatmapSpec):
    """Text-to-vision cross-attention of one query token, (H, M*(N+1))."""
    if not 0 <= spec.token < text.valid_len:
        raise IndexError(f"token {spec.token} outside the {text.valid_len} valid positions")
    ids = text.ids[None, : text.valid_len]
    valid = np.ones_like(ids, dtype=bool)
    with T.no_grad():
        vo = model.vision(vision.frames[None])
        to = model.text(ids, valid)
        fo = model.fusion(vo, to, valid)
    maps = fo.attention
    if not -len(maps) <= spec.layer < len(maps):
        raise IndexError(f"layer {spec.layer} outside {len(maps)} fusion layers")
    return maps[spec.layer]["t2v"][0, :, spec.token, :]


def export_attention_heatmap(spec: HeatmapSpec, model: VLModel, pair, out_dir) -> list:
    """Write one PGM per frame, ``<pair>_<token>_<frame>.pgm``; returns the paths."""
    vision, text = pair
    row = attention_row(model, vision, text, spec)
    frames = vision.frames.shape[0]
    grid = heatmap_grid(row, frames, model.cfg.num_patches)
    img = normalize_heatmap(grid)
    layer = spec.layer % len(model.fusion.layers)
    comments = (
        f"layer={layer} pooling=max over {row.shape[0]} heads, frame [CLS] key column dropped",
        "normalization=min-max over all frames to 0..255, constant map = 128",
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in range(frames):
        p = out / f"{spec.pair_id}_{spec.token}_{f}.pgm"
        write_pgm(p, img[f], comments)
        paths.append(p)
    return paths
