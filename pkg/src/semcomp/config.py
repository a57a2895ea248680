"""Flat ``key = value`` configuration with typed, documented defaults.

Precedence is defaults, then the config file, then command-line overrides.
The merged config renders back to text (:meth:`Config.text`), which is echoed
into logs and stored verbatim in checkpoints.
"""

from __future__ import annotations

from pathlib import Path

from .encoders import ModelConfig


class ConfigError(ValueError):
    pass


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key: (default, parser, description)
SCHEMA = {
    "model.dim": (64, int, "token width D"),
    "model.heads": (4, int, "attention heads"),
    "model.vision_layers": (2, int, "VisualBlocks in the vision encoder"),
    "model.text_layers": (2, int, "text encoder layers"),
    "model.fusion_layers": (2, int, "dual-stream fusion layers"),
    "model.mlp_ratio": (4, int, "feed-forward expansion in the uni-modal encoders"),
    "model.fusion_hidden": (256, int, "feed-forward width in the fusion encoder"),
    "model.frames": (1, int, "frames M per visual sample (1 = images)"),
    "model.image_size": (32, int, "frame height and width H = W"),
    "model.patch": (8, int, "patch size P"),
    "model.max_text_len": (50, int, "maximum text length K including [CLS]"),
    "model.vocab_size": (64, int, "vocabulary size"),
    "model.proj_dim": (64, int, "contrastive projection width"),
    "model.vision_global_mode": ("frame_cls", str, "frame_cls | mean_pooling"),
    "model.visual_block_order": ("parallel", str, "parallel | sequential temporal/spatial attention"),
    "model.init_seed": (0, int, "parameter initialization seed"),
    "task.cl": (True, _bool, "enable contrastive loss"),
    "task.vtm": (True, _bool, "enable vision-text matching"),
    "task.mlm": (True, _bool, "enable masked language modeling"),
    "task.mgsc": (True, _bool, "enable masked global semantic completion"),
    "task.mltc": (True, _bool, "enable masked local token completion"),
    "mgsc.image": (0.8, float, "image mask ratio of the global completion pass"),
    "mgsc.text": (0.4, float, "text mask ratio of the completion passes"),
    "mltc.image": (0.3, float, "image mask ratio of the local completion pass"),
    "mlm.ratio": (0.15, float, "masked language modeling selection ratio"),
    "loss.completion_global": ("infonce", str, "infonce | l2 | cosine"),
    "loss.completion_local": ("infonce", str, "infonce | l2 | cosine"),
    "loss.detach_targets": (True, _bool, "stop gradients through completion targets"),
    "tau.completion": (0.03, float, "fixed temperature of the completion losses"),
    "tau.cl_init": (0.07, float, "initial learnable contrastive temperature"),
    "optim.lr": (1e-3, float, "peak learning rate of the uni-modal encoders"),
    "optim.fusion_lr_mult": (5.0, float, "fusion encoder learning-rate multiplier"),
    "optim.weight_decay": (0.01, float, "decoupled weight decay"),
    "optim.beta1": (0.9, float, "AdamW beta1"),
    "optim.beta2": (0.999, float, "AdamW beta2"),
    "optim.eps": (1e-8, float, "AdamW epsilon"),
    "optim.grad_clip": (1.0, float, "global gradient-norm clip, 0 disables"),
    "schedule.warmup_frac": (0.1, float, "fraction of steps spent warming up"),
    "train.steps": (2000, int, "optimizer steps"),
    "train.batch_size": (16, int, "pairs per batch"),
    "data.train_pairs": (512, int, "training pairs generated by gen-data"),
    "data.test_pairs": (64, int, "held-out pairs generated by gen-data"),
    "data.video_pairs": (256, int, "video pairs generated by gen-data"),
    "curriculum.frames": (4, int, "frames per video in stage 2"),
    "curriculum.stage2_steps": (500, int, "stage-2 optimizer steps"),
    "curriculum.stage2_lr": (5e-4, float, "stage-2 peak learning rate"),
    "curriculum.stage2_mltc": (False, _bool, "keep local token completion in stage 2"),
    "curriculum.skip_stage1": (False, _bool, "start stage 2 from random initialization"),
    "eval.k": (8, int, "candidates re-ranked by the matching head"),
}

_RATIOS = ("mgsc.image", "mgsc.text", "mltc.image", "mlm.ratio", "schedule.warmup_frac")
_CHOICES = {
    "loss.completion_global": ("infonce", "l2", "cosine"),
    "loss.completion_local": ("infonce", "l2", "cosine"),
    "model.vision_global_mode": ("frame_cls", "mean_pooling"),
    "model.visual_block_order": ("parallel", "sequential"),
}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


class Config:
    def __init__(self, values=None):
        self.values = {k: d for k, (d, _, _) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    def set(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][1]
        try:
            self.values[key] = parser(raw.strip() if isinstance(raw, str) else raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: malformed value {raw!r} ({exc})") from None

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **updates) -> "Config":
        vals = dict(self.values)
        for k, v in updates.items():
            vals[k.replace("__", ".")] = v
        return Config(vals)

    def with_values(self, updates: dict) -> "Config":
        vals = dict(self.values)
        vals.update(updates)
        return Config(vals)

    def validate(self):
        for k in _RATIOS:
            if not 0.0 <= self.values[k] < 1.0:
                raise ConfigError(f"{k}: value {self.values[k]} outside [0, 1)")
        for k, allowed in _CHOICES.items():
            if self.values[k] not in allowed:
                raise ConfigError(f"{k}: {self.values[k]!r} not one of {allowed}")
        for k in ("tau.completion", "tau.cl_init", "optim.lr", "optim.fusion_lr_mult"):
            if self.values[k] <= 0:
                raise ConfigError(f"{k}: must be positive")
        for k in ("train.steps", "train.batch_size", "eval.k"):
            if self.values[k] < 1:
                raise ConfigError(f"{k}: must be >= 1")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self) -> ModelConfig:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("model.")}
        return ModelConfig(**kw)

    def text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))

    def __eq__(self, other):
        return isinstance(other, Config) and self.values == other.values


def parse_lines(text, source="<config>"):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {k!r}")
        out[k] = v
    return out


def parse_config(path=None, overrides=()) -> Config:
    """Defaults <- file <- ``key=value`` overrides."""
    values = {}
    if path is not None:
        values.update(parse_lines(Path(path).read_text(), str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = v
    return Config(values)


def config_from_text(text) -> Config:
    return Config(parse_lines(text))
