"""The desk-scale learnability protocol: train on synthetic scenes, retrieve held-out pairs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import evaluation as E
from . import tensor as T
from .config import Config
from .trainer import Trainer, forward_step

PROBE_SIZE = 16


@dataclass
class RunSummary:
    seed: int
    recall: dict  # direction -> {1, 5, 10} two-stage recall
    stage1_r1: dict  # direction -> cosine-only R@1
    probe: dict = field(default_factory=dict)  # step -> MGSC loss on the frozen probe batch
    seconds: float = 0.0
    log: list = field(default_factory=list)


def corpora(seed, cfg: Config, vocab=None):
    vocab = vocab or D.Vocabulary(cfg["model.vocab_size"])
    n_train, n_test = cfg["data.train_pairs"], cfg["data.test_pairs"]
    train = D.PairDataset(D.make_manifest(n_train, seed), vocab, 1, cfg["model.image_size"])
    held = D.held_out_manifest(train.entries, n_test, seed + 1, vocab, n_train, cfg["model.image_size"])
    test = D.PairDataset(held, vocab, 1, cfg["model.image_size"])
    return train, test


def probe_mgsc(trainer: Trainer, batch, seed) -> float:
    """MGSC loss on a fixed batch with fixed masks; the model is not updated."""
    cfg = trainer.cfg.with_values({"task.mgsc": True})
    with T.no_grad():
        out = forward_step(trainer.model, batch, cfg, np.random.default_rng([seed, 0x9B0BE]), trainer.vocab)
    return out.report.mgsc


def learnability_run(seed, cfg: Config | None = None, probe_steps=(100, 2000), log=None) -> RunSummary:
    cfg = cfg or Config()
    t0 = time.perf_counter()
    train, test = corpora(seed, cfg)
    tr = Trainer(cfg, seed, train)
    probe_batch = train.batch(range(PROBE_SIZE))
    summary = RunSummary(seed, {}, {})
    for _ in range(cfg["train.steps"]):
        r = tr.training_step()
        line = r.format(tr.step, tr.last_lr)
        summary.log.append(line)
        if log is not None:
            log(line)
        if tr.step in probe_steps:
            summary.probe[tr.step] = probe_mgsc(tr, probe_batch, seed)
    corpus = E.encode_corpus(test, tr.model)
    k = min(cfg["eval.k"], len(test))
    for direction in E.DIRECTIONS:
        res = E.two_stage_retrieval(corpus, tr.model, direction, k)
        summary.recall[direction] = res.recall
        summary.stage1_r1[direction] = E.stage1_recall(corpus, direction, 1)
    summary.seconds = time.perf_counter() - t0
    return summary
