"""
Looking inside the memory bank
==============================

Cross-attention heatmaps before and after a few decoding steps, a slot
relevance ranking over probe prompts, and the per-slot change of the bank.
All of it runs on copies of the state, so inspection never changes outputs.
"""

from pathlib import Path

import numpy as np

from lm2 import LM2, Vocab, generate, load_checkpoint
from lm2.config import load_config
from lm2.inspection import export_heatmap, heatmap_l1, memory_delta, rank_slots
from lm2.training import make_samples, seed_streams

vocab = Vocab.default()
ckpt = Path("runs/demo_recall/final.ckpt")
if ckpt.is_file():
    model, _, _ = load_checkpoint(ckpt)
    print("using trained checkpoint", ckpt)
else:
    cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "recall_a5.txt")
    model = LM2(cfg.model_config())
    print("no checkpoint found; using a freshly initialised model")

# A needle (k7 v42) between two stretches of filler, then the question.
filler = " ".join(f"f{i % 64}" for i in range(40))
prompt = f"{filler} k7 v42 {filler} ? k7"
ids = [vocab.id(t) for t in prompt.split()]

out = Path("runs/demo_inspect")
out.mkdir(parents=True, exist_ok=True)
state = model.new_state()
before_bank = state.clone()
before = export_heatmap(model, state, prompt, block=0, path=out / "heatmap_before.tsv")
answer = generate(model, state, ids, 8)
after = export_heatmap(model, state, prompt, block=0, path=out / "heatmap_after.tsv")
print("decoded:", " ".join(vocab.tokens[i] for i in answer))
print(f"heatmap L1 shift after 8 decode steps: {heatmap_l1(before, after):.4f}")

needle = prompt.split().index("v42")
print("slots the needle token attends to most:", np.argsort(-after.A[needle])[:5].tolist())

#%%
cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "recall_a5.txt")
_, eval_rng = seed_streams(cfg.seed)
probes = make_samples(cfg.replace(filler_len=32), eval_rng, 16)
ranking = rank_slots(model, probes, top_m=3)
ranking.write(out / "slots.jsonl")
for r in ranking.top:
    print(f"slot {r.slot:2d} relevance {r.relevance:.4f}  top tokens {r.top_tokens}")

delta = memory_delta(before_bank, state)
print("most rewritten slots:", delta.top_changed)
