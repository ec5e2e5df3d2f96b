"""
Prompt leakage with and without contrastive training
====================================================

Trains a pitch-free base model, a frozen transcriber, and three fine-tuned
arms on the entangled world, then decodes held-out singers and compares how
closely each output's pitch follows the prompt it was given (paired) versus
another prompt of the same singer (unpaired).

Usage: python demos/03_leakage_study.py [seed] [finetune_steps]
The defaults (500 steps) take about four minutes on one core.
"""

import sys
import time

import torch

from melctl.pipeline import ExperimentConfig, run_study

torch.set_num_threads(1)
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ExperimentConfig()
if len(sys.argv) > 2:
    cfg = ExperimentConfig(finetune_steps=int(sys.argv[2]))
t0 = time.time()
results = run_study(cfg, seed)

print(f"{'arm':<14}{'pitch acc':>10}{'paired':>9}{'unpaired':>10}{'gap':>8}{'p':>8}")
for arm, r in results.items():
    rep = r.leakage
    print(f"{arm:<14}{r.scores.pitch_accuracy:>10.3f}{rep.paired['pitch_mean']:>9.2f}"
          f"{rep.unpaired['pitch_mean']:>10.2f}{rep.gap():>8.2f}{rep.p_values['pitch_mean']:>8.3f}")

# A positive gap means outputs sit closer to their own prompt than to an
# unrelated one: the prompt's register leaked into the output.
print("\nfull arm, all statistics:")
print(results["full"].leakage.to_text())
print(f"done in {time.time() - t0:.0f} s")
