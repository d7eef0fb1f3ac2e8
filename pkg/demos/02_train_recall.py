"""
Training on associative recall
==============================

Runs the recall recipe from ``configs/recall_a5.txt``: a short copy warm-up
(repeat a random token run) followed by recall batches with extra
"? key value" drills. Writes metrics and checkpoints to ``runs/demo_recall``.

The full recipe takes roughly 20 minutes on one core. Set STEPS lower for a
quick look at the loss curve.
"""

import time
from pathlib import Path

import numpy as np

from lm2 import Vocab, evaluate, generate, load_config
from lm2.training import make_samples, seed_streams, train

STEPS = None   # e.g. 1500 for a quick look

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "recall_a5.txt")
if STEPS is not None:
    cfg = cfg.replace(steps=STEPS)
out = Path("runs/demo_recall")
out.mkdir(parents=True, exist_ok=True)

t0 = time.time()


def report(rec):
    if rec["step"] % 250 == 0:
        phase = "copy" if rec["step"] <= cfg.induction_steps else "recall"
        print(f"step {rec['step']:5d}  {phase:6s} loss {rec['loss']:.3f}  {time.time() - t0:6.0f}s")


run = train(cfg, on_step=report, out_dir=out,
            on_eval=lambda e: print(f"           validation exact match {e['exact_match']:.3f}"))

#%%
# Score on held-out samples the run never saw.
_, eval_rng = seed_streams(cfg.seed)
held_out = make_samples(cfg, eval_rng, 200)
print("held-out exact match:", evaluate(run["model"], held_out, "exact_match").value)

vocab = Vocab.default()
s = held_out[0]
model = run["model"]
pred = generate(model, model.new_state(), [vocab.id(t) for t in s.tokens()], 1)
print("question:", " ".join(s.question), " truth:", s.answer[0], " model:", vocab.tokens[pred[0]])
