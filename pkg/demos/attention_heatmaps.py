# Train briefly on moving-object videos, then look at where caption words attend.
#
#   python demos/attention_heatmaps.py --out heatmaps/
#
# Each frame gives one 4x4 PGM: the patch grid of a 32px frame, brightest
# where the chosen text token puts the most cross-attention.

import argparse
from pathlib import Path

import numpy as np

from semcomp import data as D
from semcomp import evaluation as E
from semcomp import tensor as T
from semcomp import trainer as TR
from semcomp.config import Config

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="heatmaps")
ap.add_argument("--steps", type=int, default=200)
args = ap.parse_args()

cfg = Config({"train.steps": args.steps, "curriculum.stage2_steps": args.steps})
vocab = D.Vocabulary()
ck = TR.run_curriculum(D.make_manifest(256, 0), D.make_manifest(128, 1, "video"), cfg, 0,
                           log=lambda line: None)
model = TR.model_from_checkpoint(ck)

vision, text = D.generate_video_pair(7, vocab)
words = ["[CLS]"] + D.detokenize(text, vocab).split()
print("caption:", " ".join(words[1:]))

out = Path(args.out)
for token in range(text.valid_len):
    with T.no_grad():
        paths = E.export_attention_heatmap(E.HeatmapSpec(7, token), model, (vision, text), out)
    grid = np.stack([E.read_pgm(p)[0] for p in paths])
    peak = [int(i) for i in np.unravel_index(grid.argmax(), grid.shape)]
    print(f"token {token:2d} {words[token]:>10s}: brightest at frame {peak[0]} cell {tuple(peak[1:])}")

# a text-mode glance at the last token's first frame
for row in grid[0]:
    print(" ".join(" .:-=+*#%@"[int(v) * 10 // 256] for v in row))
