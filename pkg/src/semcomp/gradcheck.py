"""Central finite-difference checks of every primitive and loss, in 64-bit mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as D
from . import objectives as O
from . import tensor as T
from .config import Config
from .encoders import VLModel

OP_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self):
        return self.max_rel_err <= self.tol

    def line(self):
        return f"op={self.name} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} {'ok' if self.ok else 'FAIL'}"


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(1.0, np.abs(n))


def check_function(name, fn, inputs, rng, h=1e-6, max_coords=24, tol=OP_TOL) -> CheckResult:
    """Compare autodiff and central differences of ``sum(fn(*inputs) * w)`` for a random ``w``.

    Only float inputs are differentiated; at most ``max_coords`` coordinates each.
    """
    with T.float64():
        arrays = [np.array(x, dtype=np.float64) if np.asarray(x).dtype.kind == "f" else x for x in inputs]
        diff = [i for i, x in enumerate(arrays) if isinstance(x, np.ndarray) and x.dtype == np.float64]
        out0 = fn(*[T.Tensor(x) if i in diff else x for i, x in enumerate(arrays)])
        w = rng.standard_normal(out0.shape)

        def scalar(arrs, grad=False):
            ts = [T.Tensor(x, requires_grad=grad) if i in diff else x for i, x in enumerate(arrs)]
            out = fn(*ts)
            loss = T.sum_(out * T.Tensor(w)) if out.ndim else out * float(w)
            return loss, ts

        loss, ts = scalar(arrays, grad=True)
        T.backward(loss)
        worst = 0.0
        for i in diff:
            g = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
            flat = arrays[i].reshape(-1)
            coords = rng.permutation(flat.size)[:max_coords]
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                up = scalar(arrays)[0].item()
                flat[c] = orig - h
                dn = scalar(arrays)[0].item()
                flat[c] = orig
                num = (up - dn) / (2 * h)
                worst = max(worst, float(rel_err(g.reshape(-1)[c], num)))
    return CheckResult(name, worst, tol)


def _cases(rng):
    """(name, fn, inputs) for every primitive and loss, on randomized small shapes."""
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    b, n, d = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(3, 8))
    mask = rng.random((b, n, n)) < 0.7
    mask[..., 0] = True
    ids = rng.integers(0, 7, size=(b, n))
    labels = rng.integers(0, d, size=b)
    idx = rng.integers(0, b, size=5)
    # clip/maximum inputs kept away from their kinks
    away = rng.choice([-1.0, 1.0], (b, d)) * rng.uniform(0.1, 0.9, (b, d))
    cf = lambda a, c, e, f: O.CompletionFeatures(image_re=a, image_co=c, text_re=e, text_co=f)
    ct = lambda a, c, e, f: O.CompletionFeatures(image_re_tok=a, image_co_tok=c, text_re_tok=e, text_co_tok=f)
    return [
        ("add", lambda x, y: x + y, [r(b, d), r(d)]),
        ("neg", lambda x: -x, [r(b, d)]),
        ("mul", lambda x, y: x * y, [r(b, 1, d), r(n, d)]),
        ("reciprocal", lambda x: T.reciprocal(x), [pos(b, d)]),
        ("exp", T.exp, [r(b, d)]),
        ("log", T.log, [pos(b, d)]),
        ("sqrt", T.sqrt, [pos(b, d)]),
        ("square", T.square, [r(b, d)]),
        ("clip", lambda x: T.clip(x, -0.5, 0.5), [away]),
        ("maximum_scalar", lambda x: T.maximum_scalar(x, 0.0), [away]),
        ("gelu", T.gelu, [r(b, n, d)]),
        ("reshape", lambda x: T.reshape(x, (n, b * d)), [r(b, n, d)]),
        ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [r(b, n, d)]),
        ("getitem", lambda x: x[idx, 1:], [r(b, n, d)]),
        ("concat", lambda x, y: T.concat([x, y], axis=1), [r(b, n, d), r(b, 2, d)]),
        ("stack", lambda x, y: T.stack([x, y], axis=1), [r(b, d), r(b, d)]),
        ("sum", lambda x: T.sum_(x, axis=1), [r(b, n, d)]),
        ("mean", lambda x: T.mean(x, axis=(0, 2)), [r(b, n, d)]),
        ("mean_pool", lambda x: T.mean_pool(x, 1), [r(b, n, d)]),
        ("logsumexp", lambda x: T.logsumexp(x, -1), [r(b, n, d)]),
        ("matmul", T.matmul, [r(b, n, d), r(d, n)]),
        ("matmul_batched", T.matmul, [r(b, n, d), r(b, d, n)]),
        ("softmax_masked", lambda x: T.softmax_masked(x, mask), [r(b, n, n)]),
        ("log_softmax", T.log_softmax, [r(b, d)]),
        ("layer_norm", T.layer_norm, [r(b, n, d), 1 + 0.1 * r(d), 0.1 * r(d)]),
        ("embedding_lookup", lambda t: T.embedding_lookup(t, ids), [r(7, d)]),
        ("cross_entropy", lambda x: T.cross_entropy_logits(x, labels), [r(b, d)]),
        ("normalize", T.normalize, [r(b, d)]),
        ("cosine_similarity", T.cosine_similarity, [r(b, d), r(b, d)]),
        ("info_nce", lambda q, t: O.info_nce(q, t, 0.07), [r(b, d), r(b, d)]),
        ("cl_loss", lambda v, t, tau: O.contrastive_loss_cl(v, t, T.exp(tau))[0], [r(b, d), r(b, d), np.array(np.log(0.07))]),
        ("vtm_loss", O.vtm_loss, [r(b, 2), r(b, 2)]),
        ("mlm_loss", lambda x: O.mlm_loss(x, labels), [r(b, d)]),
        ("mgsc_loss", lambda a, c, e, f: O.mgsc_loss(cf(a, c, e, f), 0.03, detach=False)[0], [r(b, d) for _ in range(4)]),
        ("mltc_loss", lambda a, c, e, f: O.mltc_loss(ct(a, c, e, f), 0.03, detach=False)[0], [r(n, d) for _ in range(4)]),
        ("l2_completion", lambda a, c: O.l2_pair_loss(a, c, detach=False), [r(b, d), r(b, d)]),
        ("cosine_completion", lambda a, c: O.cosine_pair_loss(a, c, detach=False), [r(b, d), r(b, d)]),
    ]


def primitive_suite(seed=0):
    rng = np.random.default_rng([seed, 0x6C])
    return [check_function(name, fn, inputs, rng) for name, fn, inputs in _cases(rng)]


def tiny_config(**over):
    # stop-gradient targets are not the derivative of the loss, so the check runs without them
    base = {
        "loss.detach_targets": False,
        "model.dim": 16, "model.heads": 2, "model.vision_layers": 1, "model.text_layers": 1,
        "model.fusion_layers": 1, "model.fusion_hidden": 32, "model.mlp_ratio": 2,
        "model.image_size": 16, "model.proj_dim": 8,
    }
    base.update(over)
    return Config(base)


def model_check(seed=0, samples=20, cfg=None, h=1e-6) -> CheckResult:
    """Full summed pre-training loss against central differences on sampled parameter entries."""
    from .trainer import forward_step, step_rng

    cfg = cfg or tiny_config(**{"model.init_seed": seed})
    vocab = D.Vocabulary(cfg["model.vocab_size"])
    with T.float64():
        model = VLModel(cfg.model_config())
        pairs = [D.generate_scene_pair(seed * 2 + i, vocab, cfg["model.image_size"]) for i in range(2)]
        batch = D.PairBatch([p[0] for p in pairs], [p[1] for p in pairs], [0, 1])

        def loss():
            return forward_step(model, batch, cfg, step_rng(seed, 0), vocab).total

        model.zero_grad()
        T.backward(loss())
        named = list(model.named_parameters())
        rng = np.random.default_rng([seed, 0xE2E])
        worst = 0.0
        # draw parameters uniformly so small tensors (tokens, heads) are covered too
        for _ in range(samples):
            _, p = named[int(rng.integers(len(named)))]
            flat = p.data.reshape(-1)
            c = int(rng.integers(flat.size))
            g = p.grad.reshape(-1)[c] if p.grad is not None else 0.0
            orig = flat[c]
            flat[c] = orig + h
            up = loss().item()
            flat[c] = orig - h
            dn = loss().item()
            flat[c] = orig
            worst = max(worst, float(rel_err(g, (up - dn) / (2 * h))))
    return CheckResult("total_loss_end_to_end", worst, MODEL_TOL)


def run_suite(seed=0):
    return primitive_suite(seed) + [model_check(seed)]
