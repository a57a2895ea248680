"""Synthetic paired vision/caption data, tokenization, patching and masking plans.

Scenes are small colored shapes on a black canvas. Every caption is an exact
description of its scene, so retrieval signal exists even at toy scale, and
every sample is regenerated from an integer seed instead of being stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLS, PAD, MASK = "[CLS]", "[PAD]", "[MASK]"
RESERVED = (CLS, PAD, MASK)

COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}
SHAPES = ("circle", "square", "triangle")
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0), "still": (0, 0)}
ORDINALS = ("one", "two", "three", "four", "five", "six", "seven", "eight")
WORDS = (
    ("a", "and", "in", "row", "column", "moving")
    + tuple(COLORS)
    + SHAPES
    + tuple(DIRECTIONS)
    + ORDINALS
)

MAX_TEXT_LEN = 50
# object-count weights; multi-object scenes dominate so scenes rarely repeat
COUNT_WEIGHTS = (0.03, 0.17, 0.80)


class VocabularyError(KeyError):
    pass


class ConfigurationError(ValueError):
    pass


class MaskPlanError(ValueError):
    pass


class Vocabulary:
    """Bijective token <-> id table. Reserved tokens take ids 0, 1, 2."""

    def __init__(self, size=64):
        tokens = list(RESERVED) + list(WORDS)
        if size < len(tokens):
            raise ConfigurationError(f"vocabulary size {size} < {len(tokens)} required tokens")
        tokens += [f"[unused{i}]" for i in range(size - len(tokens))]
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        self.word_ids = np.array([self.ids[w] for w in WORDS])

    def __len__(self):
        return len(self.tokens)

    @property
    def cls_id(self):
        return self.ids[CLS]

    @property
    def pad_id(self):
        return self.ids[PAD]

    @property
    def mask_id(self):
        return self.ids[MASK]

    def encode(self, word):
        try:
            return self.ids[word]
        except KeyError:
            raise VocabularyError(f"word {word!r} is not in the vocabulary") from None

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def write(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def read(cls, path):
        tokens = Path(path).read_text().splitlines()
        vocab = cls(len(tokens))
        if vocab.tokens != tokens:
            raise ConfigurationError(f"{path}: token table does not match this build")
        return vocab


@dataclass
class SceneObject:
    color: str
    shape: str
    cell: tuple[int, int]
    motion: str = "still"


@dataclass
class VisionSample:
    frames: np.ndarray  # (M, 3, H, W) in [0, 1]
    scene_spec: list[SceneObject]

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1 or self.frames.shape[1] != 3:
            raise ConfigurationError(f"frames must be M x 3 x H x W, got {self.frames.shape}")


@dataclass
class TextSample:
    ids: np.ndarray  # (MAX_TEXT_LEN,) int64
    valid_len: int


@dataclass
class PairBatch:
    vision: list[VisionSample]
    text: list[TextSample]
    pair_ids: list[int]
    vtm_labels: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.vision) == len(self.text) == len(self.pair_ids)):
            raise ConfigurationError("vision, text and pair ids must have equal lengths")
        if len(set(self.pair_ids)) != len(self.pair_ids):
            raise ConfigurationError("pair ids must be unique within a batch")

    def __len__(self):
        return len(self.pair_ids)

    def pixels(self):
        return np.stack([v.frames for v in self.vision])

    def token_ids(self):
        """(B, K) ids trimmed to the longest valid length in the batch."""
        k = max(t.valid_len for t in self.text)
        return np.stack([t.ids[:k] for t in self.text])

    def valid_mask(self):
        ids = self.token_ids()
        lens = np.array([t.valid_len for t in self.text])
        return np.arange(ids.shape[1])[None, :] < lens[:, None]


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    if shape == "square":
        return np.ones((size, size), bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= c * c
    if shape == "triangle":
        # apex at top, base at bottom
        return np.abs(xx - c) <= yy / 2
    raise ValueError(shape)


def _paint(canvas, obj_color, shape, top, left, size):
    mask = _shape_mask(shape, size)
    rgb = np.array(COLORS[obj_color])[:, None, None]
    region = canvas[:, top : top + size, left : left + size]
    region[:] = np.where(mask[None], rgb, region)


def render_scene(objects, image_size=32, grid=4):
    cell = image_size // grid
    size = cell - 2
    img = np.zeros((3, image_size, image_size))
    for o in objects:
        r, c = o.cell
        _paint(img, o.color, o.shape, r * cell + 1, c * cell + 1, size)
    return img


def scene_caption(objects):
    parts = [
        f"a {o.color} {o.shape} in row {ORDINALS[o.cell[0]]} column {ORDINALS[o.cell[1]]}"
        for o in sorted(objects, key=lambda o: o.cell)
    ]
    return " and ".join(parts)


def parse_scene_caption(caption):
    """Inverse of :func:`scene_caption`."""
    objects = []
    if not caption:
        return objects
    for part in caption.split(" and "):
        w = part.split()
        objects.append(
            SceneObject(w[1], w[2], (ORDINALS.index(w[5]), ORDINALS.index(w[7])))
        )
    return objects


def generate_scene_pair(seed, vocab=None, image_size=32, grid=4):
    """One still image with 1-3 shapes in distinct grid cells, plus its caption."""
    vocab = vocab or Vocabulary()
    rng = np.random.default_rng([0x5CE7E, seed])
    count = int(rng.choice(3, p=COUNT_WEIGHTS)) + 1
    cells = rng.choice(grid * grid, size=count, replace=False)
    objects = sorted(
        (
            SceneObject(
                str(rng.choice(list(COLORS))),
                str(rng.choice(SHAPES)),
                (int(k) // grid, int(k) % grid),
            )
            for k in cells
        ),
        key=lambda o: o.cell,
    )
    frames = render_scene(objects, image_size, grid)[None]
    return VisionSample(frames, objects), tokenize(scene_caption(objects), vocab)


def video_caption(obj):
    return f"a {obj.color} {obj.shape} moving {obj.motion}"


def generate_video_pair(seed, vocab=None, frames=4, image_size=32, step=4, static=False):
    """One shape translating ``step`` pixels per frame, plus its caption."""
    vocab = vocab or Vocabulary()
    rng = np.random.default_rng([0x71DE0, seed])
    color = str(rng.choice(list(COLORS)))
    shape = str(rng.choice(SHAPES))
    motion = "still" if static else str(rng.choice(list(DIRECTIONS)))
    dy, dx = DIRECTIONS[motion]
    size = image_size // 4 - 2
    travel = step * (frames - 1)
    lo_y = travel if dy < 0 else 0
    hi_y = image_size - size - (travel if dy > 0 else 0)
    lo_x = travel if dx < 0 else 0
    hi_x = image_size - size - (travel if dx > 0 else 0)
    top = int(rng.integers(lo_y, hi_y + 1))
    left = int(rng.integers(lo_x, hi_x + 1))
    out = np.zeros((frames, 3, image_size, image_size))
    for f in range(frames):
        _paint(out[f], color, shape, top + dy * step * f, left + dx * step * f, size)
    obj = SceneObject(color, shape, (top, left), motion)
    return VisionSample(out, [obj]), tokenize(video_caption(obj), vocab)


def motion_direction(frames, threshold=0.5):
    """Direction word of the painted object's centroid drift from first to last frame."""

    def centroid(f):
        mass = f.sum(axis=0) > 0
        ys, xs = np.nonzero(mass)
        return ys.mean(), xs.mean()

    (y0, x0), (y1, x1) = centroid(frames[0]), centroid(frames[-1])
    dy, dx = y1 - y0, x1 - x0
    if max(abs(dy), abs(dx)) < threshold:
        return "still"
    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "down" if dy > 0 else "up"


# ---------------------------------------------------------------------------
# text and patches


def tokenize(caption: str, vocab: Vocabulary, max_len=MAX_TEXT_LEN) -> TextSample:
    ids = [vocab.cls_id] + [vocab.encode(w) for w in caption.split()]
    ids = ids[:max_len]
    out = np.full(max_len, vocab.pad_id, dtype=np.int64)
    out[: len(ids)] = ids
    return TextSample(out, len(ids))


def detokenize(sample: TextSample, vocab: Vocabulary) -> str:
    return " ".join(vocab.decode(sample.ids[1 : sample.valid_len]))


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(..., M, 3, H, W) -> (..., M, N, 3*P*P), patches in raster order."""
    *lead, c, h, w = frames.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = frames.reshape(*lead, c, gh, patch, gw, patch)
    nd = len(lead)
    x = x.transpose(*range(nd), nd + 1, nd + 3, nd, nd + 2, nd + 4)
    return x.reshape(*lead, gh * gw, c * patch * patch)


def unpatchify(patches: np.ndarray, patch: int, h: int, w: int) -> np.ndarray:
    *lead, n, _ = patches.shape
    gh, gw = h // patch, w // patch
    nd = len(lead)
    x = patches.reshape(*lead, gh, gw, 3, patch, patch)
    x = x.transpose(*range(nd), nd + 2, nd, nd + 3, nd + 1, nd + 4)
    return x.reshape(*lead, 3, h, w)


# ---------------------------------------------------------------------------
# masking

MASK_TOKEN, RANDOM_TOKEN, KEEP = 0, 1, 2
KIND_NAMES = ("mask_token", "random_token", "keep")


@dataclass
class MaskPlan:
    modality: str
    positions: np.ndarray  # sorted sequence indices
    kinds: np.ndarray  # one of MASK_TOKEN / RANDOM_TOKEN / KEEP per position
    seed: int
    random_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self):
        return len(self.positions)


def mask_count(eligible: int, ratio: float) -> int:
    """round(ratio * eligible), clamped to [1, eligible - 1] for a nonzero ratio."""
    if ratio <= 0:
        return 0
    n = int(np.floor(ratio * eligible + 0.5))
    return min(max(n, 1), max(eligible - 1, 1))


def plan_completion_mask(eligible_count, ratio, seed, modality="vision") -> MaskPlan:
    """Positions (0-based over eligible tokens) to replace with the learnable mask token."""
    if not 0 <= ratio < 1:
        raise MaskPlanError(f"mask ratio must lie in [0, 1), got {ratio}")
    if ratio > 0 and eligible_count < 2:
        raise MaskPlanError(f"need at least 2 eligible tokens to mask, got {eligible_count}")
    n = mask_count(eligible_count, ratio)
    rng = np.random.default_rng(seed)
    pos = np.sort(rng.choice(eligible_count, size=n, replace=False)) if n else np.zeros(0, np.int64)
    return MaskPlan(modality, pos.astype(np.int64), np.zeros(n, np.int64), seed)


def vision_sequence_positions(plan: MaskPlan, num_patches: int) -> np.ndarray:
    """Map eligible-patch indices to indices in the M x (N+1) sequence (frame [CLS] skipped)."""
    frame, j = np.divmod(plan.positions, num_patches)
    return frame * (num_patches + 1) + 1 + j


def plan_vision_completion(frames, num_patches, ratio, seed) -> MaskPlan:
    plan = plan_completion_mask(frames * num_patches, ratio, seed, "vision")
    plan.positions = vision_sequence_positions(plan, num_patches)
    return plan


def plan_text_completion(sample: TextSample, ratio, seed) -> MaskPlan:
    plan = plan_completion_mask(sample.valid_len - 1, ratio, seed, "text")
    plan.positions = plan.positions + 1
    return plan


def plan_mlm_mask(sample: TextSample, seed, vocab: Vocabulary | None = None, ratio=0.15) -> MaskPlan:
    """15% of the non-[CLS] valid tokens; each becomes [MASK] / a random word / itself at 80/10/10."""
    eligible = sample.valid_len - 1
    if eligible < 1:
        raise MaskPlanError("text has no maskable token")
    vocab = vocab or Vocabulary()
    rng = np.random.default_rng(seed)
    n = mask_count(eligible, ratio)
    pos = np.sort(rng.choice(eligible, size=n, replace=False)) + 1
    u = rng.random(n)
    kinds = np.where(u < 0.8, MASK_TOKEN, np.where(u < 0.9, RANDOM_TOKEN, KEEP))
    random_ids = rng.choice(vocab.word_ids, size=n)
    return MaskPlan("text", pos.astype(np.int64), kinds.astype(np.int64), seed, random_ids)


def apply_mlm(ids: np.ndarray, plan: MaskPlan, vocab: Vocabulary) -> np.ndarray:
    out = np.array(ids, copy=True)
    if len(plan) and (plan.positions.max() >= len(out) or plan.positions.min() < 1):
        raise IndexError(f"mask position out of range for sequence of {len(out)}")
    for p, k, r in zip(plan.positions, plan.kinds, plan.random_ids):
        if k == MASK_TOKEN:
            out[p] = vocab.mask_id
        elif k == RANDOM_TOKEN:
            out[p] = r
    return out


def position_mask(plans, length) -> np.ndarray:
    """(B, length) boolean array, True at each plan's positions."""
    out = np.zeros((len(plans), length), dtype=bool)
    for b, plan in enumerate(plans):
        if len(plan) and plan.positions.max() >= length:
            raise IndexError(f"mask position {plan.positions.max()} out of range for {length}")
        out[b, plan.positions] = True
    return out


def apply_mask(tokens, plan: MaskPlan, mask_embedding):
    """Replace rows of ``tokens`` (L x D tensor) at the plan's positions with ``mask_embedding``."""
    from . import tensor as T

    keep = np.ones((tokens.shape[0], 1), dtype=tokens.dtype)
    if len(plan):
        if plan.positions.max() >= tokens.shape[0]:
            raise IndexError(f"mask position out of range for {tokens.shape[0]} tokens")
        keep[plan.positions] = 0
    return T.add(T.mul(tokens, keep), T.mul(T.reshape(mask_embedding, (1, -1)), 1 - keep))


# ---------------------------------------------------------------------------
# manifests and datasets


@dataclass
class ManifestEntry:
    pair_id: int
    seed: int
    modality: str


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(f"{e.pair_id}\t{e.seed}\t{e.modality}\n")


def read_manifest(path):
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("image", "video"):
            raise ConfigurationError(f"{path}:{lineno}: malformed manifest line {line!r}")
        entries.append(ManifestEntry(int(parts[0]), int(parts[1]), parts[2]))
    return entries


def make_manifest(n, seed, modality="image", start_id=0):
    rng = np.random.default_rng([0x3A41F, seed])
    seeds = rng.choice(2**31, size=n, replace=False)
    return [ManifestEntry(start_id + i, int(s), modality) for i, s in enumerate(seeds)]


def held_out_manifest(train_entries, n, seed, vocab=None, start_id=0, image_size=32):
    """``n`` image entries whose captions never occur among ``train_entries``."""
    vocab = vocab or Vocabulary()
    caption = lambda e: tuple(render_entry(e, vocab, 1, image_size)[1].ids)
    seen = {caption(e) for e in train_entries}
    fresh = [e for e in make_manifest(4 * n, seed) if caption(e) not in seen][:n]
    if len(fresh) < n:
        raise ConfigurationError(f"could not draw {n} held-out scenes distinct from training")
    return [ManifestEntry(start_id + i, e.seed, e.modality) for i, e in enumerate(fresh)]


def render_entry(entry: ManifestEntry, vocab, frames=4, image_size=32):
    if entry.modality == "image":
        return generate_scene_pair(entry.seed, vocab, image_size)
    return generate_video_pair(entry.seed, vocab, frames, image_size)


class PairDataset:
    """Manifest-backed corpus; samples are rendered once and cached."""

    def __init__(self, entries, vocab=None, frames=4, image_size=32):
        self.entries = list(entries)
        self.vocab = vocab or Vocabulary()
        self._cache = [render_entry(e, self.vocab, frames, image_size) for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def batch(self, indices) -> PairBatch:
        vis = [self._cache[i][0] for i in indices]
        txt = [self._cache[i][1] for i in indices]
        return PairBatch(vis, txt, [self.entries[i].pair_id for i in indices])
