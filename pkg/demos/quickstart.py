# Quickstart: synthetic scenes, a short pre-training run, held-out retrieval.
#
#   python demos/quickstart.py --steps 300
#
# The default 2000-step run takes roughly ten minutes on one core.

import argparse

from semcomp import evaluation as E
from semcomp import protocol as P
from semcomp.config import Config

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=300)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

cfg = Config({"train.steps": args.steps})
train, test = P.corpora(args.seed, cfg)

# a pair is a rendered scene plus its caption
first = train.batch([0])
vision, text = first.vision[0], first.text[0]
print("frames", vision.frames.shape, "caption ids", text.ids[: text.valid_len])


def every_50th(line):
    # step=<n> is the first field of each log line
    if int(line.split()[0][5:]) % 50 == 0:
        print(line)


summary = P.learnability_run(args.seed, cfg, probe_steps=(min(100, args.steps), args.steps), log=every_50th)

for d in E.DIRECTIONS:
    r = summary.recall[d]
    print(f"{d}: two-stage R@1={r[1]:.3f} R@5={r[5]:.3f} R@10={r[10]:.3f}  cosine-only R@1={summary.stage1_r1[d]:.3f}")
print("chance R@1 =", round(1 / len(test), 4))
print("MGSC probe loss by step:", {k: round(v, 3) for k, v in summary.probe.items()})
print(f"{summary.seconds:.0f}s")
