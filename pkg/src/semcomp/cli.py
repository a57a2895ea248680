"""Command-line entry point: gen-data, pretrain, eval-retrieval, export-attn, gradcheck.

Exit status is 0 on success, 1 for invalid input (bad flags, config, manifest
or checkpoint geometry) and 2 when a run fails after starting.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as D
from . import evaluation as E
from . import gradcheck as G
from . import trainer as TR
from .config import ConfigError, parse_config

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _out(line):
    print(line, flush=True)


def _load_config(args):
    cfg = parse_config(args.config, args.set or ())
    for line in cfg.text().splitlines():
        _out(f"config {line}")
    return cfg


def cmd_gen_data(args):
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_test = cfg["data.train_pairs"], cfg["data.test_pairs"]
    vocab = D.Vocabulary(cfg["model.vocab_size"])
    train = D.make_manifest(n_train, args.seed)
    D.write_manifest(out / "train.tsv", train)
    test = D.held_out_manifest(train, n_test, args.seed + 1, vocab, n_train, cfg["model.image_size"])
    D.write_manifest(out / "test.tsv", test)
    D.write_manifest(out / "video.tsv", D.make_manifest(cfg["data.video_pairs"], args.seed + 2, "video", n_train + n_test))
    vocab.write(out / "vocab.txt")
    _out(f"wrote {out}/train.tsv {out}/test.tsv {out}/video.tsv {out}/vocab.txt")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.with_values({"train.steps": args.steps})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest is None and args.video_manifest is None:
        raise ConfigError("pretrain needs --manifest and/or --video-manifest")
    image_entries = D.read_manifest(args.manifest) if args.manifest else None
    video_entries = D.read_manifest(args.video_manifest) if args.video_manifest else None
    init = TR.load_checkpoint(args.init) if args.init else None
    vocab = D.Vocabulary(cfg["model.vocab_size"])

    ck1 = init
    if image_entries is not None:
        ds = D.PairDataset(image_entries, vocab, 1, cfg["model.image_size"])
        tr = TR.Trainer(cfg, args.seed, ds, stage=1)
        if init is not None:
            TR.load_into_model(tr.model, init.params)
        tr.run(cfg["train.steps"], _out)
        ck1 = tr.checkpoint()
        TR.save_checkpoint(out / "stage1.ckpt", ck1)
        _out(f"checkpoint {out / 'stage1.ckpt'}")
    if video_entries is not None:
        ds = D.PairDataset(video_entries, vocab, cfg["curriculum.frames"], cfg["model.image_size"])
        tr = TR.start_stage2(cfg, args.seed, ds, ck1)
        tr.run(tr.cfg["train.steps"], _out)
        TR.save_checkpoint(out / "stage2.ckpt", tr.checkpoint())
        _out(f"checkpoint {out / 'stage2.ckpt'}")
    return EXIT_OK


def _dataset_for(ck, manifest):
    from .config import config_from_text

    cfg = config_from_text(ck.config_text)
    entries = D.read_manifest(manifest)
    frames = ck.params["vision.temporal_pos"].shape[0]
    return cfg, D.PairDataset(entries, D.Vocabulary(cfg["model.vocab_size"]), frames, cfg["model.image_size"])


def cmd_eval(args):
    ck = TR.load_checkpoint(args.checkpoint)
    cfg, ds = _dataset_for(ck, args.manifest)
    model = TR.model_from_checkpoint(ck)
    k = min(args.k or cfg["eval.k"], len(ds))
    corpus = E.encode_corpus(ds, model)
    for direction in E.DIRECTIONS:
        _out(E.two_stage_retrieval(corpus, model, direction, k).metrics_line())
    return EXIT_OK


def cmd_export_attn(args):
    ck = TR.load_checkpoint(args.checkpoint)
    _, ds = _dataset_for(ck, args.manifest)
    model = TR.model_from_checkpoint(ck)
    where = {e.pair_id: i for i, e in enumerate(ds.entries)}
    if args.pair not in where:
        raise ConfigError(f"pair {args.pair} is not in {args.manifest}")
    b = ds.batch([where[args.pair]])
    spec = E.HeatmapSpec(args.pair, args.token, args.layer)
    try:
        paths = E.export_attention_heatmap(spec, model, (b.vision[0], b.text[0]), args.out)
    except IndexError as exc:
        raise ConfigError(str(exc)) from None
    for p in paths:
        _out(f"wrote {p}")
    return EXIT_OK


def cmd_gradcheck(args):
    ok = True
    for r in G.run_suite(args.seed):
        _out(r.line())
        ok &= r.ok
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser():
    p = _Parser(prog="semcomp", description="Desk-scale vision-language pre-training with semantic completion.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")

    g = sub.add_parser("gen-data", help="write train/test/video manifests and the vocabulary")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    with_config(g)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("pretrain", help="image-text stage, then video-text stage if a video manifest is given")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--steps", type=int, help="overrides train.steps")
    t.add_argument("--out", required=True)
    t.add_argument("--manifest", help="image-text manifest (stage 1)")
    t.add_argument("--video-manifest", help="video-text manifest (stage 2)")
    t.add_argument("--init", help="checkpoint to start from")
    with_config(t)
    t.set_defaults(fn=cmd_pretrain)

    e = sub.add_parser("eval-retrieval", help="two-stage retrieval within a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--k", type=int, help="re-ranked candidates (default eval.k)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("export-attn", help="text-to-vision cross-attention heatmaps as PGM")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--manifest", required=True)
    a.add_argument("--pair", type=int, required=True)
    a.add_argument("--token", type=int, default=0, help="text position, 0 = [CLS]")
    a.add_argument("--layer", type=int, default=-1)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_export_attn)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    c.add_argument("--seed", type=int, required=True)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    if getattr(args, "fn", None) is None:
        print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_INVALID
    try:
        return args.fn(args)
    except (ConfigError, D.ConfigurationError, D.VocabularyError, E.GeometryError, TR.CheckpointError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any failure after validation is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run_command())
