"""Pre-training losses: contrastive, matching, masked language modeling, and the
global / local completion losses together with their l2 and cosine variants."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

COMPLETION_TAU = 0.03
COSINE_CLAMP = 1e-7
LOSS_NAMES = ("cl", "vtm", "mlm", "mgsc", "mltc")
VARIANTS = ("infonce", "l2", "cosine")


@dataclass
class LossReport:
    cl: float = 0.0
    vtm: float = 0.0
    mlm: float = 0.0
    mgsc: float = 0.0
    mltc: float = 0.0
    terms: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.cl + self.vtm + self.mlm + self.mgsc + self.mltc

    def as_dict(self):
        return {**{k: getattr(self, k) for k in LOSS_NAMES}, "total": self.total}

    def format(self, step, lr):
        vals = " ".join(f"{k}={v:.6f}" for k, v in self.as_dict().items())
        return f"step={step} {vals} lr={lr:.6g}"


@dataclass
class CompletionFeatures:
    """Recovered / complete features. Complete ones are detached by the losses."""

    image_re: Tensor | None = None
    text_re: Tensor | None = None
    image_co: Tensor | None = None
    text_co: Tensor | None = None
    image_re_tok: Tensor | None = None
    text_re_tok: Tensor | None = None
    image_co_tok: Tensor | None = None
    text_co_tok: Tensor | None = None


def _tau_value(tau):
    if isinstance(tau, Tensor):
        if np.any(tau.data <= 0):
            raise ValueError(f"temperature must be positive, got {tau.data}")
        return tau
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return tau


def similarity_matrix(queries: Tensor, targets: Tensor) -> Tensor:
    """Cosine similarity between every query row and every target row."""
    return T.matmul(T.normalize(queries), T.normalize(targets).T)


def info_nce(queries: Tensor, targets: Tensor, tau) -> Tensor:
    """Row i of ``targets`` is the positive for row i of ``queries``; other rows are negatives."""
    tau = _tau_value(tau)
    n = queries.shape[0]
    if n < 1 or targets.shape[0] != n:
        raise ValueError(f"info_nce needs matching nonempty batches, got {queries.shape} / {targets.shape}")
    sims = similarity_matrix(queries, targets)
    logits = sims / tau
    return T.cross_entropy_logits(logits, np.arange(n))


def contrastive_loss_cl(v_proj: Tensor, t_proj: Tensor, tau):
    """Symmetric vision-text InfoNCE; returns (loss, v2t, t2v)."""
    if v_proj.shape[0] == 0:
        raise ValueError("empty batch")
    v2t = info_nce(v_proj, t_proj, tau)
    t2v = info_nce(t_proj, v_proj, tau)
    return v2t + t2v, v2t, t2v


def vtm_loss(pos_logits: Tensor, neg_logits: Tensor) -> Tensor:
    """Two-way cross-entropy, label 1 for matched pairs and 0 for swapped ones."""
    if pos_logits.shape[0] < 1 or neg_logits.shape[0] < 1:
        raise ValueError("vtm_loss needs at least one positive and one negative")
    logits = T.concat([pos_logits, neg_logits], axis=0)
    labels = np.concatenate([np.ones(pos_logits.shape[0], np.int64), np.zeros(neg_logits.shape[0], np.int64)])
    return T.cross_entropy_logits(logits, labels)


def vtm_logits(head, v_global: Tensor, t_global: Tensor) -> Tensor:
    return head(T.concat([v_global, t_global], axis=-1))


def derangement(n, rng):
    """Permutation with no fixed point: shift by a random nonzero offset."""
    if n < 2:
        raise ValueError("in-batch negatives need a batch of at least 2")
    shift = int(rng.integers(1, n))
    return (np.arange(n) + shift) % n


def mlm_loss(masked_logits: Tensor | None, original_ids) -> Tensor:
    """Mean cross-entropy over the gathered masked positions; zero when nothing was masked."""
    if masked_logits is None or len(original_ids) == 0:
        return T.tensor(0.0)
    return T.cross_entropy_logits(masked_logits, original_ids)


def _target(x: Tensor, detach: bool) -> Tensor:
    return T.detach(x) if detach else x


def _nce_or_zero(re, co, tau, what):
    if re is None or re.shape[0] == 0:
        log.warning("%s: empty feature pool, term is 0", what)
        return T.tensor(0.0)
    if re.shape[0] == 1:
        log.warning("%s: singleton pool, InfoNCE is 0", what)
    return info_nce(re, co, tau)


def mgsc_loss(cf: CompletionFeatures, tau=COMPLETION_TAU, detach=True):
    """Returns (loss, nce_vision, nce_language) over the global features."""
    nce_v = _nce_or_zero(cf.image_re, _target(cf.image_co, detach), tau, "mgsc vision")
    nce_l = _nce_or_zero(cf.text_re, _target(cf.text_co, detach), tau, "mgsc text")
    return nce_v + nce_l, nce_v, nce_l


def mltc_loss(cf: CompletionFeatures, tau=COMPLETION_TAU, detach=True):
    """Returns (loss, nce_vision_tokens, nce_text_tokens) over pooled masked-token features."""
    nce_v = _nce_or_zero(cf.image_re_tok, _opt_target(cf.image_co_tok, detach), tau, "mltc vision")
    nce_l = _nce_or_zero(cf.text_re_tok, _opt_target(cf.text_co_tok, detach), tau, "mltc text")
    return nce_v + nce_l, nce_v, nce_l


def _opt_target(x, detach):
    return None if x is None else _target(x, detach)


def l2_pair_loss(re: Tensor, co: Tensor, detach=True) -> Tensor:
    """Mean squared euclidean distance between matched rows."""
    if re is None or re.shape[0] == 0:
        return T.tensor(0.0)
    diff = re - _target(co, detach)
    return T.mean(T.sum_(T.square(diff), axis=-1))


def cosine_pair_loss(re: Tensor, co: Tensor, detach=True) -> Tensor:
    """Mean of -log(0.5 (s + 1)) with the inner term clamped at 1e-7."""
    if re is None or re.shape[0] == 0:
        return T.tensor(0.0)
    s = T.cosine_similarity(re, _target(co, detach))
    inner = T.maximum_scalar((s + 1.0) * 0.5, COSINE_CLAMP)
    return T.mean(-T.log(inner))


def l2_completion_loss(cf: CompletionFeatures, detach=True):
    """(global variant, token variant), each summed over the two modalities."""
    g = l2_pair_loss(cf.image_re, cf.image_co, detach) + l2_pair_loss(cf.text_re, cf.text_co, detach)
    t = l2_pair_loss(cf.image_re_tok, cf.image_co_tok, detach) + l2_pair_loss(cf.text_re_tok, cf.text_co_tok, detach)
    return g, t


def cosine_completion_loss(cf: CompletionFeatures, detach=True):
    g = cosine_pair_loss(cf.image_re, cf.image_co, detach) + cosine_pair_loss(cf.text_re, cf.text_co, detach)
    t = cosine_pair_loss(cf.image_re_tok, cf.image_co_tok, detach) + cosine_pair_loss(
        cf.text_re_tok, cf.text_co_tok, detach
    )
    return g, t


def global_completion(cf, variant="infonce", tau=COMPLETION_TAU, detach=True) -> Tensor:
    if variant == "infonce":
        return mgsc_loss(cf, tau, detach)[0]
    if variant == "l2":
        return l2_pair_loss(cf.image_re, cf.image_co, detach) + l2_pair_loss(cf.text_re, cf.text_co, detach)
    if variant == "cosine":
        return cosine_pair_loss(cf.image_re, cf.image_co, detach) + cosine_pair_loss(cf.text_re, cf.text_co, detach)
    raise ValueError(f"unknown completion loss {variant!r}")


def local_completion(cf, variant="infonce", tau=COMPLETION_TAU, detach=True) -> Tensor:
    if variant == "infonce":
        return mltc_loss(cf, tau, detach)[0]
    if variant == "l2":
        return l2_pair_loss(cf.image_re_tok, cf.image_co_tok, detach) + l2_pair_loss(
            cf.text_re_tok, cf.text_co_tok, detach
        )
    if variant == "cosine":
        return cosine_pair_loss(cf.image_re_tok, cf.image_co_tok, detach) + cosine_pair_loss(
            cf.text_re_tok, cf.text_co_tok, detach
        )
    raise ValueError(f"unknown completion loss {variant!r}")


def total_loss(components: dict) -> Tensor:
    """Unweighted sum of the enabled task losses (missing ones count as 0)."""
    total = None
    for name in LOSS_NAMES:
        c = components.get(name)
        if c is None:
            continue
        total = c if total is None else total + c
    return total if total is not None else T.tensor(0.0)
