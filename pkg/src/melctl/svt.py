"""Training and inference for the frame-level pitch transcriber (SVT)."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .corpus import TokenSample
from .losses import LossWeights, svt_objective
from .net import SVTModel, TransformerConfig, load_state, read_manifest, save_checkpoint, state_hash
from .tokens import PAD

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "ce", "seg", "dur", "total", "heldout_acc")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SvtCheckpoint:
    model: SVTModel
    config: TransformerConfig
    meta: dict = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)

    @property
    def hash(self) -> str:
        return state_hash(self.model)


def corpus_hash(samples: Sequence[TokenSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        for arr in (s.semantic, s.pitch, s.dur, s.regulated, s.acoustic):
            h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        h.update(f"{s.singer_id},{s.group_id};".encode())
    return h.hexdigest()


def collate_grids(samples: Sequence[TokenSample], pad_code: int):
    """Stack variable-length samples into padded tensors.

    Returns ``grids (B, L, N)``, ``targets (B, L)`` (PAD-filled) and the
    per-sample ``(pitch, dur, L)`` note tuples the auxiliary losses need.
    """
    Lmax = max(s.L for s in samples)
    N = samples[0].acoustic.shape[1]
    grids = np.full((len(samples), Lmax, N), pad_code, dtype=np.int64)
    targets = np.full((len(samples), Lmax), PAD, dtype=np.int64)
    notes = []
    for b, s in enumerate(samples):
        if s.acoustic.shape[1] != N:
            raise ValueError("samples disagree on codebook count")
        grids[b, : s.L] = s.acoustic
        targets[b, : s.L] = s.regulated
        notes.append((s.pitch, s.dur, s.L))
    return torch.from_numpy(grids), torch.from_numpy(targets), notes


def frame_accuracy(model: SVTModel, samples: Sequence[TokenSample], batch_size: int = 64) -> float:
    hit = total = 0
    for pred, s in zip(transcribe_many(model, [s.acoustic for s in samples], batch_size), samples):
        ok = s.regulated != PAD
        hit += int((pred[ok] == s.regulated[ok]).sum())
        total += int(ok.sum())
    return hit / max(total, 1)


def train_svt(
    samples: Sequence[TokenSample],
    config: TransformerConfig,
    weights: LossWeights = LossWeights(),
    epochs: int = 30,
    seed: int = 0,
    heldout: Sequence[TokenSample] | None = None,
    batch_size: int = 32,
    lr: float = 1e-3,
    weight_decay: float = 0.01,
    log_path=None,
) -> SvtCheckpoint:
    """Fit the transcriber on ``samples`` with CE + segment + duration losses."""
    if not samples:
        raise ValueError("empty training corpus")
    N = samples[0].acoustic.shape[1]
    if any(s.acoustic.shape[1] != N for s in samples) or N != config.n_codebooks:
        raise ValueError(f"corpus codebook count does not match config ({config.n_codebooks})")
    torch.manual_seed(seed)
    model = SVTModel(config)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    rows = []
    step = 0
    pad_code = config.v_aco + 1
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(len(samples))
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), batch_size):
            batch = [samples[i] for i in order[start : start + batch_size]]
            grids, targets, notes = collate_grids(batch, pad_code)
            total, ce, seg, du = svt_objective(model(grids), targets, notes, weights)
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite SVT loss at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            sums += [ce.item(), seg.item(), du.item(), total.item()]
            n_batches += 1
        model.eval()
        acc = frame_accuracy(model, heldout) if heldout else float("nan")
        ce, seg, du, total = sums / n_batches
        rows.append({"epoch": epoch, "ce": ce, "seg": seg, "dur": du, "total": total, "heldout_acc": acc})
        log.info("svt epoch %d: total %.4f ce %.4f heldout_acc %.4f", epoch, total, ce, acc)
    model.eval()
    meta = {
        "kind": "svt",
        "config": config.to_dict(),
        "seed": seed,
        "step": step,
        "epochs": epochs,
        "corpus_sha256": corpus_hash(samples),
        "weights": weights.to_dict(),
        "final": rows[-1] if rows else {},
    }
    ckpt = SvtCheckpoint(model, config, meta, rows)
    if log_path is not None:
        write_log(rows, log_path, LOG_COLUMNS)
    return ckpt


def write_log(rows: list[dict], path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k in columns})


@torch.no_grad()
def transcribe(ckpt: SvtCheckpoint | SVTModel, grid):
    """Argmax pitch per frame plus the per-frame distribution ``(L, C)``."""
    model = ckpt.model if isinstance(ckpt, SvtCheckpoint) else ckpt
    g = torch.as_tensor(np.asarray(grid), dtype=torch.long)
    if g.dim() != 2 or g.shape[1] != model.cfg.n_codebooks:
        raise ValueError(f"grid must be (L, {model.cfg.n_codebooks}), got {tuple(g.shape)}")
    model.eval()
    probs = model(g).softmax(dim=-1)
    return probs.argmax(dim=-1).numpy(), probs.numpy()


@torch.no_grad()
def transcribe_many(model: SVTModel, grids: Sequence[np.ndarray], batch_size: int = 64) -> list[np.ndarray]:
    model.eval()
    out = []
    pad_code = model.cfg.v_aco + 1
    for start in range(0, len(grids), batch_size):
        chunk = grids[start : start + batch_size]
        Lmax = max(len(g) for g in chunk)
        x = np.full((len(chunk), Lmax, model.cfg.n_codebooks), pad_code, dtype=np.int64)
        for b, g in enumerate(chunk):
            x[b, : len(g)] = g
        pred = model(torch.from_numpy(x)).argmax(dim=-1).numpy()
        out.extend(pred[b, : len(g)] for b, g in enumerate(chunk))
    return out


def save_svt(ckpt: SvtCheckpoint, out_dir) -> str:
    return save_checkpoint(ckpt.model, out_dir, ckpt.meta)


def load_svt(ckpt_dir) -> SvtCheckpoint:
    manifest = read_manifest(ckpt_dir)
    cfg = TransformerConfig.from_dict(manifest["config"])
    model = SVTModel(cfg)
    load_state(model, ckpt_dir)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return SvtCheckpoint(model, cfg, {k: v for k, v in manifest.items() if k != "params"})
