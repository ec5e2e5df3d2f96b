"""Differentiable training objectives.

All losses take torch tensors and return a scalar tensor; gradients come from
autograd. Label-matrix construction is plain numpy.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .tokens import PAD, REST, allocate_frames


@dataclass(frozen=True)
class LossWeights:
    scl: float = 0.5
    fcl: float = 1.0
    cl: float = 0.1
    seg: float = 0.5
    dur: float = 0.3
    svt: float = 0.2
    mask: float = 1.0
    tau: float = 0.07
    alpha: float = 0.5
    delta: float = 0.5
    perturb_fraction: float = 0.5
    offset_bound: int = 6
    normalize_scl: bool = True

    def __post_init__(self):
        for name in ("scl", "fcl", "cl", "seg", "dur", "svt", "mask"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if not 0 < self.delta <= math.sqrt(2):
            raise ValueError("delta must be in (0, sqrt(2)]")
        if not 0 <= self.perturb_fraction <= 1 or self.offset_bound < 0:
            raise ValueError("perturb_fraction must be in [0, 1] and offset_bound >= 0")

    def replace(self, **kw) -> "LossWeights":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown LossWeights keys: {sorted(extra)}")
        return cls(**d)


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1)
    zero = (norms == 0).nonzero()
    if len(zero):
        idx = tuple(int(i) for i in zero[0])
        raise ValueError(f"{what} has a zero-norm row at index {idx if len(idx) > 1 else idx[0]}")
    return x / norms.unsqueeze(-1)


def scl_loss(g_a: torch.Tensor, g_b: torch.Tensor, tau: float, normalize: bool = True) -> torch.Tensor:
    """Symmetric InfoNCE over index-aligned pooled embeddings ``(K, d)``.

    Row i of ``g_a`` and row i of ``g_b`` form the positive pair; every other
    row in the batch is a negative. The two directional means are averaged.
    """
    if g_a.shape != g_b.shape or g_a.dim() != 2:
        raise ValueError(f"expected two (K, d) tensors, got {tuple(g_a.shape)} and {tuple(g_b.shape)}")
    K = g_a.shape[0]
    if K < 2:
        raise ValueError("sequence-level contrastive loss needs K >= 2")
    if normalize:
        g_a = _unit_rows(g_a, "g_a")
        g_b = _unit_rows(g_b, "g_b")
    sim = g_a @ g_b.T / tau
    target = torch.arange(K, device=sim.device)
    return 0.5 * (F.cross_entropy(sim, target) + F.cross_entropy(sim.T, target))


def build_soft_labels(reg_a, reg_b, semantic, alpha: float) -> np.ndarray:
    """Frame-pair targets: 1 (pitch and semantic match), alpha (pitch only), 0, or -1 (silence/padding)."""
    a = np.asarray(reg_a, dtype=np.int64)
    b = np.asarray(reg_b, dtype=np.int64)
    s = np.asarray(semantic, dtype=np.int64)
    if not (a.shape == b.shape == s.shape) or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape}, {b.shape}, {s.shape}")
    same_pitch = a[:, None] == b[None, :]
    same_sem = s[:, None] == s[None, :]
    Y = np.where(same_pitch, np.where(same_sem, 1.0, alpha), 0.0)
    silent_a = (a == REST) | (a == PAD)
    silent_b = (b == REST) | (b == PAD)
    Y[silent_a, :] = -1.0
    Y[:, silent_b] = -1.0
    return Y


def fcl_loss(f_a: torch.Tensor, f_b: torch.Tensor, Y) -> torch.Tensor:
    """Masked regression of the cosine-similarity matrix onto soft labels.

    Works on one sample ``(L, d)`` with ``Y (L, L)`` or a batch ``(K, L, d)``
    with ``Y (K, L, L)``; the batch form averages the per-sample sums over K.
    """
    Y = torch.as_tensor(Y, dtype=f_a.dtype, device=f_a.device)
    if f_a.shape != f_b.shape:
        raise ValueError(f"f_a {tuple(f_a.shape)} and f_b {tuple(f_b.shape)} differ")
    if Y.shape != f_a.shape[:-2] + (f_a.shape[-2], f_b.shape[-2]):
        raise ValueError(f"label matrix {tuple(Y.shape)} does not match embeddings {tuple(f_a.shape)}")
    valid = Y >= 0
    # frames whose whole row/column is masked never enter the loss; skip their norm check
    row_used = valid.any(dim=-1)
    col_used = valid.any(dim=-2)
    if (f_a.norm(dim=-1)[row_used] == 0).any() or (f_b.norm(dim=-1)[col_used] == 0).any():
        raise ValueError("zero-norm frame vector in frame-level contrastive loss")
    ua = f_a / f_a.norm(dim=-1, keepdim=True).clamp_min(1e-30)
    ub = f_b / f_b.norm(dim=-1, keepdim=True).clamp_min(1e-30)
    S = ua @ ub.transpose(-1, -2)
    per = torch.where(valid, (S - Y) ** 2, torch.zeros_like(S)).sum(dim=(-1, -2))
    return per.mean() if per.dim() else per


def combined_cl(scl, fcl, weights: LossWeights):
    return weights.scl * scl + weights.fcl * fcl


def ce_loss(logits: torch.Tensor, targets, ignore_index: int = PAD) -> torch.Tensor:
    """Mean cross-entropy over non-PAD frames; logits ``(..., L, C)``."""
    t = torch.as_tensor(np.asarray(targets), dtype=torch.long, device=logits.device)
    flat_t = t.reshape(-1)
    if (flat_t == ignore_index).all():
        raise ValueError("every target frame is PAD")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), flat_t, ignore_index=ignore_index)


def _check_distribution(probs: torch.Tensor):
    tol = 1e-6 if probs.dtype == torch.float64 else 1e-4
    err = (probs.sum(dim=-1) - 1).abs()
    if (err > tol).any() or (probs < 0).any():
        raise ValueError("probability rows must be non-negative and sum to 1")


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(dim=-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def seg_loss(probs: torch.Tensor, targets, delta: float, check: bool = True) -> torch.Tensor:
    """Segment transition loss for one sequence ``probs (L, C)``.

    Within a ground-truth pitch run consecutive distributions are pulled
    together; across a run boundary their L2 distance is pushed past ``delta``.
    Transitions touching PAD frames are skipped.
    """
    t = torch.as_tensor(np.asarray(targets), dtype=torch.long, device=probs.device)
    if probs.dim() != 2 or t.shape != probs.shape[:1]:
        raise ValueError(f"probs {tuple(probs.shape)} and targets {tuple(t.shape)} disagree")
    if probs.shape[0] < 2:
        raise ValueError("segment transition loss needs L >= 2")
    if check:
        _check_distribution(probs)
    diff = probs[1:] - probs[:-1]
    boundary = t[1:] != t[:-1]
    keep = (t[1:] != PAD) & (t[:-1] != PAD)
    within = (diff * diff).sum(dim=-1)
    hinge = torch.clamp(delta - _safe_norm(diff), min=0.0) ** 2
    per = torch.where(boundary, hinge, within)
    return torch.where(keep, per, torch.zeros_like(per)).sum()


def dur_loss(probs: torch.Tensor, pitch, dur, L: int | None = None) -> torch.Tensor:
    """Soft duration loss for one sequence.

    Each note gets ``floor(m_i * L / D)`` consecutive frames starting where the
    previous allocation ended; the probability mass of the note's pitch over
    its frames is compared with that count. Leftover frames are unsupervised.
    """
    if L is None:
        L = probs.shape[0]
    p = np.asarray(pitch, dtype=np.int64)
    a = allocate_frames(dur, L)
    if p.size != a.size:
        raise ValueError("pitch and dur lengths disagree")
    total = int(a.sum())
    assert total <= L <= probs.shape[0], "allocation exceeds frame count"
    seg_id = np.repeat(np.arange(p.size), a)
    frames = np.arange(total)
    cls = p[seg_id]
    mass = probs.new_zeros(p.size)
    if total:
        picked = probs[torch.as_tensor(frames), torch.as_tensor(cls)]
        mass = mass.index_add(0, torch.as_tensor(seg_id), picked)
    return ((mass - torch.as_tensor(a, dtype=probs.dtype)) ** 2).sum()


def svt_total(ce, seg, dur, weights: LossWeights):
    return ce + weights.seg * seg + weights.dur * dur


def svt_objective(logits: torch.Tensor, targets, notes: Sequence[tuple], weights: LossWeights):
    """Batched SVT objective.

    ``logits (B, L, C)``; ``targets (B, L)`` regulated pitch with PAD beyond each
    sample's length; ``notes[b] = (pitch, dur, L_b)``. Segment and duration
    terms are per-sequence sums averaged over the batch. Returns
    ``(total, ce, seg, dur)``.
    """
    t = torch.as_tensor(np.asarray(targets), dtype=torch.long, device=logits.device)
    ce = ce_loss(logits, t)
    if weights.seg == 0 and weights.dur == 0:
        zero = logits.new_zeros(())
        return ce, ce, zero, zero
    probs = logits.softmax(dim=-1)
    segs, durs = [], []
    for b, (pitch, dur, Lb) in enumerate(notes):
        pb = probs[b, :Lb]
        segs.append(seg_loss(pb, t[b, :Lb], weights.delta, check=False) if Lb >= 2 else pb.new_zeros(()))
        durs.append(dur_loss(pb, pitch, dur, Lb))
    seg = torch.stack(segs).mean()
    du = torch.stack(durs).mean()
    return svt_total(ce, seg, du, weights), ce, seg, du


def mask_loss(logits: torch.Tensor, targets, mask) -> torch.Tensor:
    """Cross-entropy on masked frames only, averaged over frames and codebooks.

    ``logits (..., L, N, V)``, ``targets (..., L, N)``, ``mask (..., L)`` bool.
    """
    t = torch.as_tensor(np.asarray(targets), dtype=torch.long, device=logits.device)
    m = torch.as_tensor(np.asarray(mask), dtype=torch.bool, device=logits.device)
    if t.shape != logits.shape[:-1] or m.shape != t.shape[:-1]:
        raise ValueError(
            f"shape mismatch: logits {tuple(logits.shape)}, targets {tuple(t.shape)}, mask {tuple(m.shape)}"
        )
    if not m.any():
        raise ValueError("mask selects no frames")
    sel = logits[m]  # (M, N, V)
    return F.cross_entropy(sel.reshape(-1, sel.shape[-1]), t[m].reshape(-1))
