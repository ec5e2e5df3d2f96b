"""
Contrastive and transcription losses
====================================

Small hand-made inputs for each training objective, followed by a
finite-difference check of its gradient.
"""

import numpy as np
import torch

from melctl.fdcheck import check_gradient
from melctl.losses import build_soft_labels, dur_loss, fcl_loss, mask_loss, scl_loss, seg_loss
from melctl.tokens import REST

rng = np.random.default_rng(0)

# Sequence level: row i of each view is the positive of row i of the other.
g = torch.eye(3, dtype=torch.float64)
print("aligned views:", round(scl_loss(g, g.clone(), tau=0.5).item(), 4))
print("shuffled views:", round(scl_loss(g, g[[1, 2, 0]], tau=0.5).item(), 4))

# Frame level targets: 1 for same pitch and lyric, alpha for same pitch only,
# -1 (ignored) wherever either frame is silent.
labels = build_soft_labels([60, 60, 62, REST], [60, 62, 62, 60], [1, 2, 2, 3], alpha=0.5)
print(labels)
f = torch.tensor(rng.standard_normal((4, 8)))
print("frame loss:", round(fcl_loss(f, f + 0.1, labels).item(), 4))

# Transcriber auxiliaries on a softmax output
probs = torch.tensor(rng.standard_normal((6, 130))).softmax(-1)
frames = [60, 60, 60, 62, 62, REST]
print("segment:", round(seg_loss(probs, frames, delta=0.5).item(), 4))
print("duration:", round(dur_loss(probs, [60, 62, REST], [3, 2, 1]).item(), 4))

# Masked token prediction only scores the masked frames
logits = torch.tensor(rng.standard_normal((6, 2, 16)))
targets = rng.integers(0, 16, size=(6, 2))
print("mask CE:", round(mask_loss(logits, targets, np.array([1, 0, 1, 0, 0, 1], bool)).item(), 4))

# Autograd against central differences at float64
z = torch.tensor(rng.standard_normal((6, 130)))
print("segment gradient error:", check_gradient(lambda x: seg_loss(x.softmax(-1), frames, 0.5), [z]))
