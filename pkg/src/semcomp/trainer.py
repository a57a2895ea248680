"""Step orchestration, AdamW with a warmup/linear-decay schedule, checkpoints and
the image-then-video curriculum."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import objectives as O
from . import tensor as T
from .config import Config, ConfigError, config_from_text
from .encoders import EncoderOutput, VLModel
from .objectives import CompletionFeatures, LossReport

GROUP_MULT = {"uni_modal": 1.0, "head": 1.0}


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# pass plan


@dataclass(frozen=True)
class FusionPass:
    name: str
    vision: str  # complete | mgsc | mltc | shuffled
    text: str  # complete | mgsc | mlm
    consumers: tuple


ALL_PASSES = (
    FusionPass("P1", "mgsc", "complete", ("mgsc", "mltc")),
    FusionPass("P2", "complete", "mgsc", ("mgsc", "mltc")),
    FusionPass("P3", "mltc", "complete", ("mltc",)),
    FusionPass("VTM+", "complete", "complete", ("vtm",)),
    FusionPass("VTM-", "shuffled", "complete", ("vtm",)),
    FusionPass("MLM", "complete", "mlm", ("mlm",)),
)


@dataclass
class StepPlan:
    fusion: list
    vision_encodes: list  # variants fed through the vision encoder
    text_encodes: list


def plan_step_forwards(cfg: Config, batch_size=None) -> StepPlan:
    """Fusion passes and uni-modal encodes needed by the enabled tasks."""
    on = {t: cfg[f"task.{t}"] for t in O.LOSS_NAMES}
    bs = cfg["train.batch_size"] if batch_size is None else batch_size
    if bs < 2 and (on["vtm"] or on["cl"] or on["mgsc"] or on["mltc"]):
        raise ConfigError("train.batch_size: contrastive, matching and completion tasks need a batch of at least 2")
    wanted = set()
    if on["mgsc"]:
        wanted |= {"P1", "P2"}
    if on["mltc"]:
        wanted |= {"P1", "P2", "P3"}
    if on["vtm"]:
        wanted |= {"VTM+", "VTM-"}
    if on["mlm"]:
        wanted.add("MLM")
    passes = [p for p in ALL_PASSES if p.name in wanted]
    vis, txt = [], []
    if on["cl"]:
        vis.append("complete")
        txt.append("complete")
    for p in passes:
        v = "complete" if p.vision == "shuffled" else p.vision
        if v not in vis:
            vis.append(v)
        if p.text not in txt:
            txt.append(p.text)
    return StepPlan(passes, vis, txt)


# ---------------------------------------------------------------------------
# masks for one step


def _seeds(rng, n):
    return [int(s) for s in rng.integers(0, 2**62, size=n)]


@dataclass
class StepMasks:
    vision: dict = field(default_factory=dict)  # variant -> list[MaskPlan]
    text: dict = field(default_factory=dict)
    negatives: np.ndarray | None = None


def draw_masks(batch: D.PairBatch, plan: StepPlan, cfg: Config, rng, vocab) -> StepMasks:
    b = len(batch)
    m = batch.vision[0].frames.shape[0]
    n = (cfg["model.image_size"] // cfg["model.patch"]) ** 2
    out = StepMasks()
    ratios = {"mgsc": cfg["mgsc.image"], "mltc": cfg["mltc.image"]}
    for variant in ("mgsc", "mltc"):
        seeds = _seeds(rng, b)
        if variant in plan.vision_encodes:
            out.vision[variant] = [D.plan_vision_completion(m, n, ratios[variant], s) for s in seeds]
    seeds = _seeds(rng, b)
    if "mgsc" in plan.text_encodes:
        out.text["mgsc"] = [D.plan_text_completion(t, cfg["mgsc.text"], s) for t, s in zip(batch.text, seeds)]
    seeds = _seeds(rng, b)
    if "mlm" in plan.text_encodes:
        out.text["mlm"] = [D.plan_mlm_mask(t, s, vocab, cfg["mlm.ratio"]) for t, s in zip(batch.text, seeds)]
    if any(p.vision == "shuffled" for p in plan.fusion):
        out.negatives = O.derangement(b, rng)
    else:
        rng.integers(1, 2)  # keep the stream aligned whether or not VTM runs
    return out


# ---------------------------------------------------------------------------
# forward over one batch


@dataclass
class StepOutputs:
    total: T.Tensor
    report: LossReport
    components: dict
    completion: CompletionFeatures
    fusion: dict


def _split(x: T.Tensor, k: int, b: int):
    return x[k * b : (k + 1) * b]


def _gather(tokens: T.Tensor, plans):
    """Rows of (B, L, D) tokens at every plan position, pooled across the batch."""
    bidx = np.concatenate([np.full(len(p), i) for i, p in enumerate(plans)]).astype(np.int64)
    pos = np.concatenate([p.positions for p in plans]).astype(np.int64)
    if len(pos) == 0:
        return None, bidx, pos
    return tokens[bidx, pos], bidx, pos


def forward_step(model: VLModel, batch: D.PairBatch, cfg: Config, rng, vocab=None) -> StepOutputs:
    vocab = vocab or D.Vocabulary(cfg["model.vocab_size"])
    plan = plan_step_forwards(cfg, len(batch))
    masks = draw_masks(batch, plan, cfg, rng, vocab)
    b = len(batch)
    pixels = batch.pixels()
    m = pixels.shape[1]
    n = model.cfg.num_patches
    ids = batch.token_ids()
    valid = batch.valid_mask()
    k = ids.shape[1]

    # uni-modal encodes, batched along the leading axis
    vis_out = {}
    if plan.vision_encodes:
        patch_masks = []
        for v in plan.vision_encodes:
            if v == "complete":
                patch_masks.append(np.zeros((b, m * (n + 1)), bool))
            else:
                patch_masks.append(D.position_mask(masks.vision[v], m * (n + 1)))
        pm = np.concatenate(patch_masks).reshape(-1, m, n + 1)[:, :, 1:]
        enc = model.vision(np.concatenate([pixels] * len(plan.vision_encodes)), pm)
        for i, v in enumerate(plan.vision_encodes):
            vis_out[v] = EncoderOutput(_split(enc.tokens, i, b))
    txt_out = {}
    if plan.text_encodes:
        id_rows, tok_masks = [], []
        for v in plan.text_encodes:
            if v == "mlm":
                id_rows.append(np.stack([D.apply_mlm(r, p, vocab) for r, p in zip(ids, masks.text["mlm"])]))
            else:
                id_rows.append(ids)
            if v == "mgsc":
                tok_masks.append(D.position_mask(masks.text["mgsc"], k))
            else:
                tok_masks.append(np.zeros((b, k), bool))
        nv = len(plan.text_encodes)
        enc = model.text(np.concatenate(id_rows), np.concatenate([valid] * nv), np.concatenate(tok_masks))
        for i, v in enumerate(plan.text_encodes):
            txt_out[v] = EncoderOutput(_split(enc.tokens, i, b))

    comps = {}
    terms = {}
    on = {t: cfg[f"task.{t}"] for t in O.LOSS_NAMES}
    if on["cl"]:
        vp = model.vision_proj(model.uni_global(vis_out["complete"]))
        tp = model.text_proj(model.uni_global(txt_out["complete"]))
        comps["cl"], v2t, t2v = O.contrastive_loss_cl(vp, tp, model.cl_temperature())
        terms.update(nce_v2t=v2t.item(), nce_t2v=t2v.item())

    fused = {}
    if plan.fusion:
        vparts, tparts = [], []
        for p in plan.fusion:
            if p.vision == "shuffled":
                vparts.append(vis_out["complete"].tokens[masks.negatives])
            else:
                vparts.append(vis_out[p.vision].tokens)
            tparts.append(txt_out[p.text].tokens)
        nf = len(plan.fusion)
        out = model.fusion(
            EncoderOutput(T.concat(vparts, axis=0)),
            EncoderOutput(T.concat(tparts, axis=0)),
            np.concatenate([valid] * nf),
        )
        for i, p in enumerate(plan.fusion):
            fused[p.name] = dict(
                vision_tokens=_split(out.vision_tokens, i, b),
                text_tokens=_split(out.text_tokens, i, b),
                vision_global=_split(out.vision_global, i, b),
                text_global=_split(out.text_global, i, b),
            )

    if on["vtm"]:
        pos = O.vtm_logits(model.vtm_head, fused["VTM+"]["vision_global"], fused["VTM+"]["text_global"])
        neg = O.vtm_logits(model.vtm_head, fused["VTM-"]["vision_global"], fused["VTM-"]["text_global"])
        comps["vtm"] = O.vtm_loss(pos, neg)

    if on["mlm"]:
        plans = masks.text["mlm"]
        feats, bidx, posn = _gather(fused["MLM"]["text_tokens"], plans)
        logits = model.mlm_head(feats) if feats is not None else None
        comps["mlm"] = O.mlm_loss(logits, ids[bidx, posn])

    cf = CompletionFeatures()
    if "P1" in fused:
        cf.image_re = fused["P1"]["vision_global"]
        cf.text_co = fused["P1"]["text_global"]
        cf.image_co = fused["P2"]["vision_global"]
        cf.text_re = fused["P2"]["text_global"]
    detach = cfg["loss.detach_targets"]
    tau = cfg["tau.completion"]
    if on["mgsc"]:
        if cfg["loss.completion_global"] == "infonce":
            comps["mgsc"], nv_, nl_ = O.mgsc_loss(cf, tau, detach)
            terms.update(nce_v=nv_.item(), nce_l=nl_.item())
        else:
            comps["mgsc"] = O.global_completion(cf, cfg["loss.completion_global"], tau, detach)
    if on["mltc"]:
        seq = m * (n + 1)
        p3v = fused["P3"]["vision_tokens"].reshape(b, seq, -1)
        p2v = fused["P2"]["vision_tokens"].reshape(b, seq, -1)
        cf.image_re_tok, _, _ = _gather(p3v, masks.vision["mltc"])
        cf.image_co_tok, _, _ = _gather(p2v, masks.vision["mltc"])
        cf.text_re_tok, _, _ = _gather(fused["P2"]["text_tokens"], masks.text["mgsc"])
        cf.text_co_tok, _, _ = _gather(fused["P1"]["text_tokens"], masks.text["mgsc"])
        comps["mltc"] = O.local_completion(cf, cfg["loss.completion_local"], tau, detach)

    total = O.total_loss(comps)
    report = LossReport(**{k: float(v.data) for k, v in comps.items()}, terms=terms)
    return StepOutputs(total, report, comps, cf, fused)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class Schedule:
    total_steps: int
    peak: float
    warmup_frac: float = 0.1
    fusion_mult: float = 5.0


def lr_at(step, sched: Schedule, group="uni_modal") -> float:
    """Linear warmup from 0 to peak over the first warmup_frac of steps, then linear decay to 0."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    warm = sched.warmup_frac * sched.total_steps
    if warm > 0 and step < warm:
        base = sched.peak * step / warm
    elif sched.total_steps == warm:
        base = sched.peak
    else:
        base = sched.peak * (sched.total_steps - step) / (sched.total_steps - warm)
    mult = sched.fusion_mult if group == "fusion" else GROUP_MULT[group]
    return base * mult


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def init(self, named_params):
        for name, p in named_params:
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))


def adamw_update(param, grad, m, v, step, rate, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """In-place AdamW with bias correction; ``step`` is the 1-based update count."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLoss("non-finite gradient")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / (1 - beta1**step)
    vhat = v / (1 - beta2**step)
    if weight_decay:
        param *= 1 - rate * weight_decay
    param -= rate * mhat / (np.sqrt(vhat) + eps)
    return param


def decays(name, p):
    return p.data.ndim >= 2


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


# ---------------------------------------------------------------------------
# trainer


def step_rng(seed, step):
    return np.random.default_rng([seed, 0x57E9, step])


def batch_indices(seed, step, n_items, batch_size):
    """Epoch-wise shuffling; a pure function of (seed, step)."""
    per_epoch = max(n_items // batch_size, 1)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 0xE90C, epoch]).permutation(n_items)
    if n_items < batch_size:
        raise ConfigError(f"train.batch_size={batch_size} exceeds the {n_items} available pairs")
    return perm[k * batch_size : (k + 1) * batch_size]


class Trainer:
    def __init__(self, cfg: Config, seed: int, dataset: D.PairDataset | None = None, model=None, stage=1):
        self.cfg = cfg
        self.seed = int(seed)
        self.dataset = dataset
        if model is None:
            model = VLModel(cfg.model_config())
            model.log_tau.data[...] = math.log(cfg["tau.cl_init"])
        self.model = model
        self.stage = stage
        self.step = 0
        self.vocab = dataset.vocab if dataset is not None else D.Vocabulary(cfg["model.vocab_size"])
        self.opt = OptimizerState(cfg["optim.beta1"], cfg["optim.beta2"], cfg["optim.eps"], cfg["optim.weight_decay"])
        self.opt.init(self.model.named_parameters())
        self.schedule = Schedule(cfg["train.steps"], cfg["optim.lr"], cfg["schedule.warmup_frac"], cfg["optim.fusion_lr_mult"])

    def next_batch(self) -> D.PairBatch:
        idx = batch_indices(self.seed, self.step, len(self.dataset), self.cfg["train.batch_size"])
        return self.dataset.batch(idx)

    def training_step(self, batch=None) -> LossReport:
        batch = batch if batch is not None else self.next_batch()
        model = self.model
        model.zero_grad()
        out = forward_step(model, batch, self.cfg, step_rng(self.seed, self.step), self.vocab)
        for name, val in out.report.as_dict().items():
            if not math.isfinite(val):
                raise NonFiniteLoss(f"loss term {name} is {val} at step {self.step + 1}")
        T.backward(out.total)
        named = list(model.named_parameters())
        clip_grad_norm([p for _, p in named], self.cfg["optim.grad_clip"])
        self.step += 1
        self.opt.step = self.step
        sched_step = min(self.step, self.schedule.total_steps)
        for name, p in named:
            if p.grad is None:
                continue
            rate = lr_at(sched_step, self.schedule, p.group)
            adamw_update(
                p.data, p.grad, self.opt.m[name], self.opt.v[name], self.step, rate,
                self.opt.beta1, self.opt.beta2, self.opt.eps,
                self.opt.weight_decay if decays(name, p) else 0.0,
            )
        self.last_lr = lr_at(sched_step, self.schedule, "uni_modal")
        return out.report

    def run(self, steps, log=None):
        reports = []
        for _ in range(steps):
            r = self.training_step()
            reports.append(r)
            if log is not None:
                log(r.format(self.step, self.last_lr))
        return reports

    # persistence ---------------------------------------------------------

    def checkpoint(self) -> "Checkpoint":
        params = {n: p.data.copy() for n, p in self.model.named_parameters()}
        opt = {}
        for n in params:
            opt[f"m.{n}"] = self.opt.m[n].copy()
            opt[f"v.{n}"] = self.opt.v[n].copy()
        return Checkpoint(self.cfg.text(), params, opt, (self.seed, self.step), self.step, self.stage)

    def save(self, path):
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", dataset=None, cfg=None):
        cfg = cfg or config_from_text(ckpt.config_text)
        tr = cls(cfg, ckpt.rng_state[0], dataset, stage=ckpt.stage)
        load_into_model(tr.model, ckpt.params)
        for n in tr.opt.m:
            tr.opt.m[n] = ckpt.optimizer[f"m.{n}"].copy()
            tr.opt.v[n] = ckpt.optimizer[f"v.{n}"].copy()
        tr.step = ckpt.step
        tr.opt.step = ckpt.step
        return tr


# ---------------------------------------------------------------------------
# checkpoint format

MAGIC = b"GLSC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    config_text: str
    params: dict
    optimizer: dict
    rng_state: tuple  # (seed, counter)
    step: int
    stage: int
    version: int = VERSION


def _write_tensors(buf: bytearray, tensors: dict):
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = 0 if arr.dtype == np.float32 else 1
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        nb = name.encode()
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<BB", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += payload
        buf += struct.pack("<I", zlib.crc32(payload))


def encode_checkpoint(ck: Checkpoint) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", ck.version)
    cfg = ck.config_text.encode()
    buf += struct.pack("<I", len(cfg)) + cfg
    _write_tensors(buf, ck.params)
    _write_tensors(buf, ck.optimizer)
    buf += struct.pack("<QQ", *ck.rng_state)
    buf += struct.pack("<QB", ck.step, ck.stage)
    return bytes(buf)


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (ln,) = self.unpack("<I")
            name = self.take(ln).decode()
            code, rank = self.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
            shape = self.unpack(f"<{rank}Q")
            dt = _DTYPES[code]
            payload = self.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
            (crc,) = self.unpack("<I")
            if zlib.crc32(payload) != crc:
                raise CheckpointError(f"tensor {name}: checksum mismatch")
            out[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        return out


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (ln,) = r.unpack("<I")
    cfg = r.take(ln).decode()
    params = r.tensors()
    opt = r.tensors()
    rng_state = r.unpack("<QQ")
    step, stage = r.unpack("<QB")
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(cfg, params, opt, tuple(rng_state), step, stage, version)


def save_checkpoint(path, ck: Checkpoint):
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_into_model(model: VLModel, params: dict):
    """Copy named arrays into the model; mismatched names or shapes are all reported at once."""
    own = dict(model.named_parameters())
    problems = []
    for name in sorted(set(own) | set(params)):
        if name not in params:
            problems.append(f"{name}: missing from checkpoint")
        elif name not in own:
            problems.append(f"{name}: not a model parameter")
        elif own[name].shape != params[name].shape:
            problems.append(f"{name}: checkpoint {params[name].shape} vs model {own[name].shape}")
    if problems:
        raise CheckpointError("checkpoint does not fit the model:\n  " + "\n  ".join(problems))
    for name, p in own.items():
        p.data = params[name].astype(p.dtype, copy=True)


def model_from_checkpoint(ck: Checkpoint) -> VLModel:
    cfg = config_from_text(ck.config_text)
    model = VLModel(cfg.model_config())
    load_into_model(model, ck.params)
    return model


# ---------------------------------------------------------------------------
# curriculum


def extend_temporal(params: dict, frames: int) -> dict:
    """Grow the temporal embedding table to ``frames`` rows.

    New rows repeat row 0, so every frame starts with the same temporal offset
    and a video of identical frames encodes exactly like the single image.
    """
    out = dict(params)
    key = "vision.temporal_pos"
    table = params[key]
    if table.shape[0] < frames:
        extra = np.repeat(table[:1], frames - table.shape[0], axis=0)
        out[key] = np.concatenate([table, extra])
    else:
        out[key] = table[:frames].copy()
    return out


def stage2_config(cfg: Config) -> Config:
    return cfg.with_values(
        {
            "model.frames": cfg["curriculum.frames"],
            "task.mltc": cfg["curriculum.stage2_mltc"] and cfg["task.mltc"],
            "train.steps": cfg["curriculum.stage2_steps"],
            "optim.lr": cfg["curriculum.stage2_lr"],
        }
    )


def start_stage2(cfg: Config, seed, dataset, stage1: Checkpoint | None) -> Trainer:
    cfg2 = stage2_config(cfg)
    tr = Trainer(cfg2, seed, dataset, stage=2)
    if stage1 is None:
        if not cfg["curriculum.skip_stage1"]:
            raise CheckpointError("stage 2 needs a stage-1 checkpoint (or curriculum.skip_stage1 = true)")
        return tr
    load_into_model(tr.model, extend_temporal(stage1.params, cfg2["model.frames"]))
    return tr


def run_curriculum(stage1_entries, stage2_entries, cfg: Config, seed, out_dir=None, log=None) -> Checkpoint:
    """Image-text training, then video-text training initialized from it."""
    ck1 = None
    if not cfg["curriculum.skip_stage1"]:
        ds1 = D.PairDataset(stage1_entries, D.Vocabulary(cfg["model.vocab_size"]), 1, cfg["model.image_size"])
        tr1 = Trainer(cfg, seed, ds1, stage=1)
        tr1.run(cfg["train.steps"], log)
        ck1 = tr1.checkpoint()
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "stage1.ckpt", ck1)
    ds2 = D.PairDataset(stage2_entries, D.Vocabulary(cfg["model.vocab_size"]), cfg["curriculum.frames"], cfg["model.image_size"])
    tr2 = start_stage2(cfg, seed, ds2, ck1)
    tr2.run(tr2.cfg["train.steps"], log)
    ck2 = tr2.checkpoint()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "stage2.ckpt", ck2)
    return ck2
