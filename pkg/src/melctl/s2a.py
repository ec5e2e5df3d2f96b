"""Acoustic-token model: base pretraining, contrastive + transcriber-guided
fine-tuning with adapters, and iterative parallel decoding."""

from __future__ import annotations

import copy
import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import TokenSample
from .losses import LossWeights, build_soft_labels, fcl_loss, mask_loss, scl_loss, svt_objective
from .net import (
    CheckpointError,
    LoraConfig,
    S2AModel,
    SVTModel,
    TransformerConfig,
    count_params,
    inject_lora,
    load_state,
    read_manifest,
    save_checkpoint,
    state_hash,
)
from .svt import TrainingDiverged
from .tokens import PAD, perturb_pitch, regulate, regulate_pitch

STRATEGIES = ("lora", "pitch-only", "prefix", "full")
ABLATIONS = ("full", "no_cl", "no_scl", "no_fcl", "no_svt", "no_cl+no_svt")
LOG_COLUMNS = ("step", "L_mask", "L_SCL", "L_FCL", "L_SVT", "total")


@dataclass(frozen=True)
class BatchPlan:
    """``K`` samples per step; the first ``K_g`` form one sequence-level group."""

    K: int = 32
    K_g: int = 8

    def __post_init__(self):
        if self.K_g < 2:
            raise ValueError(f"K_g must be >= 2, got {self.K_g}")
        if self.K - self.K_g < 1:
            raise ValueError(f"need at least one frame-level sample, got K={self.K}, K_g={self.K_g}")

    @property
    def K_f(self) -> int:
        return self.K - self.K_g


@dataclass(frozen=True)
class DecodeConfig:
    steps: int = 8
    schedule: str = "cosine"
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.schedule not in ("cosine", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.temperature >= 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


def ablate(weights: LossWeights, name: str) -> LossWeights:
    """Zero the loss weights an ablation removes."""
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    if name == "full":
        return weights
    updates = {}
    for part in name.split("+"):
        updates[{"no_cl": "cl", "no_scl": "scl", "no_fcl": "fcl", "no_svt": "svt"}[part]] = 0.0
    return replace(weights, **updates)


# prompts


def prompt_length_range(L: int) -> tuple[int, int]:
    """Half-open ``[lo, hi)`` prompt-length range for a target of ``L`` frames."""
    if L < 2:
        raise ValueError(f"prompt needs L >= 2, got {L}")
    lo = max(1, min(L // 4, 5))
    return lo, max(L // 2, lo + 1)


def cut_segment(grid: np.ndarray, n: int, rng) -> np.ndarray:
    n = min(n, grid.shape[0])
    start = int(rng.integers(0, grid.shape[0] - n + 1))
    return grid[start : start + n]


class PromptSampler:
    """Draws prompt segments from other utterances of a target's singer."""

    def __init__(self, pool: Sequence[TokenSample]):
        self.pool = list(pool)
        self.by_singer: dict[int, list[int]] = defaultdict(list)
        for i, u in enumerate(self.pool):
            self.by_singer[u.singer_id].append(i)

    def candidates(self, singer: int, group_id: int, exclude=()) -> list[int]:
        return [i for i in self.by_singer.get(singer, []) if self.pool[i].group_id != group_id and i not in exclude]

    def draw(self, target_L: int, singer: int, group_id: int, rng, exclude=()) -> tuple[np.ndarray, int]:
        cands = self.candidates(singer, group_id, exclude)
        if not cands:
            raise ValueError(f"no further utterance available for singer {singer}")
        src = cands[int(rng.integers(len(cands)))]
        lo, hi = prompt_length_range(target_L)
        return cut_segment(self.pool[src].acoustic, int(rng.integers(lo, hi)), rng), src


def prompt_gen(sample: TokenSample, seed: int, pool: Sequence[TokenSample] | None = None, exclude=()) -> np.ndarray:
    """Prompt for ``sample``: from another utterance of its singer if ``pool`` is given,
    otherwise a segment of ``sample`` itself."""
    rng = np.random.default_rng(seed)
    if pool is None:
        lo, hi = prompt_length_range(sample.L)
        return cut_segment(sample.acoustic, int(rng.integers(lo, hi)), rng)
    return PromptSampler(pool).draw(sample.L, sample.singer_id, sample.group_id, rng, exclude)[0]


def stack_prompts(prompts: Sequence[np.ndarray], pad_code: int) -> np.ndarray:
    n = max(p.shape[0] for p in prompts)
    out = np.full((len(prompts), n, prompts[0].shape[1]), pad_code, dtype=np.int64)
    for b, p in enumerate(prompts):
        out[b, : p.shape[0]] = p
    return out


# batches


def random_mask(L: int, rng) -> np.ndarray:
    """Cosine-distributed mask ratio; at least one frame masked."""
    ratio = math.cos(math.pi / 2 * float(rng.random()))
    n = min(L, max(1, math.ceil(ratio * L)))
    m = np.zeros(L, dtype=bool)
    m[rng.choice(L, size=n, replace=False)] = True
    return m


@dataclass
class Batch:
    """Arrays for one step. ``group`` marks sequence-level rows; B' rows reuse
    ``masked``/``semantic`` with ``regulated_b`` and ``prompt_b``."""

    semantic: np.ndarray
    regulated: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    masked: np.ndarray
    prompt: np.ndarray
    notes: list
    group: np.ndarray
    regulated_b: np.ndarray | None = None
    prompt_b: np.ndarray | None = None
    prompt_src: list = field(default_factory=list)
    prompt_src_b: list = field(default_factory=list)


def check_batch(batch: Batch):
    """Sequence-level rows share content and regulated pitch and use different prompts in A and B'."""
    g = np.flatnonzero(batch.group)
    if g.size == 0:
        return
    if g.size < 2:
        raise AssertionError("sequence-level group needs at least 2 rows")
    if not (batch.semantic[g] == batch.semantic[g[0]]).all():
        raise AssertionError("sequence-level rows do not share semantic tokens")
    if batch.regulated_b is None or batch.prompt_b is None:
        raise AssertionError("sequence-level rows need a B' view")
    if not (batch.regulated_b[g] == batch.regulated[g]).all():
        raise AssertionError("sequence-level positives must keep regulated pitch")
    for i in g:
        if batch.prompt_src[i] == batch.prompt_src_b[i]:
            raise AssertionError(f"row {i}: prompts A and B' come from the same utterance")


def pad_rows(rows: Sequence[np.ndarray], fill: int) -> np.ndarray:
    n = max(r.shape[0] for r in rows)
    out = np.full((len(rows), n) + rows[0].shape[1:], fill, dtype=np.int64)
    for b, r in enumerate(rows):
        out[b, : r.shape[0]] = r
    return out


class BatchBuilder:
    """Assembles two-view batches (A and B') from a training pool."""

    def __init__(self, pool: Sequence[TokenSample], plan: BatchPlan, weights: LossWeights, v_sem: int, v_aco: int):
        self.pool = list(pool)
        self.plan = plan
        self.weights = weights
        self.v_sem = v_sem
        self.mask_id = v_aco
        self.pad_code = v_aco + 1
        self.prompts = PromptSampler(self.pool)
        by_group = defaultdict(list)
        for i, u in enumerate(self.pool):
            by_group[u.group_id].append(i)
        self.groups = {g: ix for g, ix in by_group.items() if len(ix) >= plan.K_g}

    @property
    def use_scl(self) -> bool:
        return self.weights.cl > 0 and self.weights.scl > 0

    @property
    def use_fcl(self) -> bool:
        return self.weights.cl > 0 and self.weights.fcl > 0

    def build(self, rng) -> Batch:
        K, K_g = self.plan.K, self.plan.K_g
        rows: list[int] = []
        n_group = 0
        if self.use_scl and not self.groups:
            raise ValueError(f"no group with at least {K_g} members for the sequence-level loss")
        # batch layout ignores the loss weights so ablation arms see identical batches
        if self.groups:
            keys = sorted(self.groups)
            gid = keys[int(rng.integers(len(keys)))]
            rows = [int(i) for i in rng.choice(self.groups[gid], size=K_g, replace=False)]
            n_group = K_g
        rest = np.array([i for i in range(len(self.pool)) if i not in set(rows)
                         and (n_group == 0 or self.pool[i].group_id != self.pool[rows[0]].group_id)])
        if rest.size < K - n_group:
            raise ValueError(f"pool too small for a batch of {K}")
        rows += [int(i) for i in rng.choice(rest, size=K - n_group, replace=False)]
        samples = [self.pool[i] for i in rows]
        masks, masked, prompts, srcs = [], [], [], []
        for s, i in zip(samples, rows):
            m = random_mask(s.L, rng)
            a = s.acoustic.copy()
            a[m] = self.mask_id
            p, src = self.prompts.draw(s.L, s.singer_id, s.group_id, rng, exclude=(i,))
            masks.append(m)
            masked.append(a)
            prompts.append(p)
            srcs.append(src)
        group = np.zeros(K, dtype=bool)
        group[:n_group] = True
        batch = Batch(
            semantic=pad_rows([s.semantic for s in samples], self.v_sem),
            regulated=pad_rows([s.regulated for s in samples], PAD),
            targets=pad_rows([s.acoustic for s in samples], self.pad_code),
            mask=pad_rows([m.astype(np.int64) for m in masks], 0).astype(bool),
            masked=pad_rows(masked, self.pad_code),
            prompt=stack_prompts(prompts, self.pad_code),
            notes=[(s.pitch, s.dur, s.L) for s in samples],
            group=group,
            prompt_src=srcs,
        )
        reg_b, prompts_b, srcs_b = [], [], []
        for b, (s, i) in enumerate(zip(samples, rows)):
            if group[b]:
                reg_b.append(s.regulated)
            else:
                seed = int(rng.integers(2**31))
                p2 = perturb_pitch(s.pitch, self.weights.perturb_fraction, self.weights.offset_bound, seed)
                reg_b.append(regulate_pitch(p2, s.dur, s.L))
            p, src = self.prompts.draw(s.L, s.singer_id, s.group_id, rng, exclude=(i, srcs[b]))
            prompts_b.append(p)
            srcs_b.append(src)
        batch.regulated_b = pad_rows(reg_b, PAD)
        batch.prompt_b = stack_prompts(prompts_b, self.pad_code)
        batch.prompt_src_b = srcs_b
        return batch


def _long(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.long)


def pooled(hidden: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    w = valid.to(hidden.dtype).unsqueeze(-1)
    return (hidden * w).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)


# base model


def pretrain_base(
    samples: Sequence[TokenSample],
    config: TransformerConfig,
    steps: int,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 1e-3,
    weight_decay: float = 0.01,
    log: list | None = None,
) -> S2AModel:
    """Masked-token pretraining without pitch input, prompted by a segment of the
    target utterance itself. The pitch embedding stays at zero."""
    torch.manual_seed(seed)
    model = S2AModel(config)
    model.pitch_emb.weight.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    pool = list(samples)
    pad_code = config.v_aco + 1
    model.train()
    for step in range(steps):
        rng = np.random.default_rng([seed, step])
        idx = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
        batch = [pool[i] for i in idx]
        masked, masks, prompts = [], [], []
        for s in batch:
            m = random_mask(s.L, rng)
            a = s.acoustic.copy()
            a[m] = config.v_aco
            masked.append(a)
            masks.append(m.astype(np.int64))
            lo, hi = prompt_length_range(s.L)
            prompts.append(cut_segment(s.acoustic, int(rng.integers(lo, hi)), rng))
        sem = _long(pad_rows([s.semantic for s in batch], config.v_sem))
        reg = _long(pad_rows([s.regulated for s in batch], PAD))
        _, logits = model(_long(pad_rows(masked, pad_code)), sem, torch.zeros_like(reg), _long(stack_prompts(prompts, pad_code)))
        loss = mask_loss(logits, pad_rows([s.acoustic for s in batch], pad_code), pad_rows(masks, 0).astype(bool))
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None:
            log.append({"step": step, "L_mask": float(loss.detach())})
    model.eval()
    return model


# fine-tuning


def _core_trainable(model: S2AModel) -> list[nn.Parameter]:
    return [
        model.pitch_emb.weight,
        *model.cond.parameters(),
        *model.norm.parameters(),
        *(h.bias for h in model.heads),
    ]


def prepare_finetune(
    base: S2AModel, strategy: str = "lora", lora: LoraConfig = LoraConfig(), pitch_init_std: float = 1.0
) -> S2AModel:
    """Copy of ``base`` with the strategy's trainable set unfrozen.

    Every strategy except ``full`` trains the pitch embedding, conditioning
    projection, final norm and head biases; ``lora`` adds low-rank adapters on
    attention projections and ``prefix`` adds shared virtual key/value tokens.
    A never-trained (all-zero) pitch embedding is redrawn with ``pitch_init_std``
    so the new input starts at the same scale as the semantic embedding.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    model = copy.deepcopy(base)
    if pitch_init_std > 0 and not model.pitch_emb.weight.any():
        with torch.no_grad():
            model.pitch_emb.weight.normal_(0.0, pitch_init_std)
    for p in model.parameters():
        p.requires_grad_(False)
    if strategy == "full":
        for p in model.parameters():
            p.requires_grad_(True)
        return model
    for p in _core_trainable(model):
        p.requires_grad_(True)
    if strategy == "lora":
        inject_lora(model, lora)
    elif strategy == "prefix":
        model.add_prefix()
    return model


def trainable_ratio(model: nn.Module) -> float:
    """Trainable parameters over all parameters."""
    return count_params(model, trainable_only=True) / count_params(model)


def base_view(model: nn.Module) -> dict[str, torch.Tensor]:
    """Frozen tensors of ``model`` keyed by their names in the un-adapted base."""
    out = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            out[name.replace(".base.", ".")] = p.detach()
    return out


def frozen_base_intact(model: nn.Module, base: nn.Module) -> bool:
    """True if every frozen tensor of ``model`` is bit-identical to ``base``."""
    ref = dict(base.named_parameters())
    for name, t in base_view(model).items():
        if name not in ref or not torch.equal(t, ref[name].detach()):
            return False
    return True


@dataclass
class FinetuneConfig:
    strategy: str = "lora"
    lora: LoraConfig = field(default_factory=LoraConfig)
    plan: BatchPlan = field(default_factory=BatchPlan)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup: int = 0
    grad_clip: float = 1.0
    pitch_init_std: float = 1.0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "lora": self.lora.to_dict(),
            "plan": asdict(self.plan),
            "weights": self.weights.to_dict(),
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "warmup": self.warmup,
            "grad_clip": self.grad_clip,
            "pitch_init_std": self.pitch_init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        known = {"strategy", "lora", "plan", "weights", "lr", "weight_decay", "warmup", "grad_clip", "pitch_init_std"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fine-tune keys: {sorted(unknown)}")
        kw = dict(d)
        if "lora" in kw:
            kw["lora"] = LoraConfig.from_dict(kw["lora"])
        if "plan" in kw:
            plan = kw["plan"]
            if set(plan) - {"K", "K_g"}:
                raise ValueError(f"unknown batch plan keys: {sorted(set(plan) - {'K', 'K_g'})}")
            kw["plan"] = BatchPlan(**plan)
        if "weights" in kw:
            kw["weights"] = LossWeights.from_dict(kw["weights"])
        return cls(**kw)


class Finetuner:
    """Owns the adapted model, its optimizer and the step counter.

    Each step's batch and dropout randomness derive from ``(seed, step)`` so a
    resumed run replays exactly what an uninterrupted run would do.
    """

    def __init__(
        self,
        base: S2AModel,
        pool: Sequence[TokenSample],
        config: FinetuneConfig = FinetuneConfig(),
        svt: SVTModel | None = None,
        seed: int = 0,
    ):
        w = config.weights
        if w.svt > 0:
            if svt is None:
                raise ValueError("transcriber guidance needs an SVT model (or set the svt weight to 0)")
            if svt.cfg.n_codebooks != base.cfg.n_codebooks or svt.cfg.v_aco != base.cfg.v_aco:
                raise ValueError("SVT and S2A disagree on codebooks or code vocabulary")
            for p in svt.parameters():
                p.requires_grad_(False)
            svt.eval()
        self.base = base
        self.config = config
        self.svt = svt
        self.seed = seed
        self.step = 0
        torch.manual_seed(seed)
        self.model = prepare_finetune(base, config.strategy, config.lora, config.pitch_init_std)
        self.params = [p for p in self.model.parameters() if p.requires_grad]
        self.opt = torch.optim.AdamW(self.params, lr=config.lr, weight_decay=config.weight_decay)
        self.builder = BatchBuilder(pool, config.plan, w, base.cfg.v_sem, base.cfg.v_aco)
        self.log: list[dict] = []

    @property
    def trainable_ratio(self) -> float:
        return trainable_ratio(self.model)

    def _lr_scale(self) -> float:
        if self.config.warmup <= 0:
            return 1.0
        return min(1.0, (self.step + 1) / self.config.warmup)

    def losses(self, batch: Batch) -> dict[str, torch.Tensor]:
        """Loss terms for one batch; ``total`` carries the gradient."""
        w = self.config.weights
        model = self.model
        sem = _long(batch.semantic)
        masked = _long(batch.masked)
        valid = sem != model.cfg.v_sem
        hidden, logits = model(masked, sem, _long(batch.regulated), _long(batch.prompt))
        zero = logits.new_zeros(())
        frame_rows = np.flatnonzero(~batch.group)
        group_rows = np.flatnonzero(batch.group)
        out = {"L_mask": zero, "L_SCL": zero, "L_FCL": zero, "L_SVT": zero}
        if self.builder.use_scl or self.builder.use_fcl:
            hidden_b, _ = model(masked, sem, _long(batch.regulated_b), _long(batch.prompt_b))
            if self.builder.use_scl and group_rows.size:
                g = torch.as_tensor(group_rows)
                out["L_SCL"] = scl_loss(pooled(hidden[g], valid[g]), pooled(hidden_b[g], valid[g]), w.tau, w.normalize_scl)
            if self.builder.use_fcl:
                Y = np.stack([
                    build_soft_labels(batch.regulated[i], batch.regulated_b[i], batch.semantic[i], w.alpha)
                    for i in frame_rows
                ])
                f = torch.as_tensor(frame_rows)
                out["L_FCL"] = fcl_loss(hidden[f], hidden_b[f], Y)
        f = torch.as_tensor(frame_rows)
        out["L_mask"] = mask_loss(logits[f], batch.targets[frame_rows], batch.mask[frame_rows])
        if w.svt > 0:
            probs = logits[f].softmax(dim=-1)
            pitch_logits = self.svt.forward_soft(probs, ~valid[f])
            notes = [batch.notes[i] for i in frame_rows]
            out["L_SVT"] = svt_objective(pitch_logits, batch.regulated[frame_rows], notes, w)[0]
        cl = w.scl * out["L_SCL"] + w.fcl * out["L_FCL"]
        out["total"] = w.cl * cl + w.svt * out["L_SVT"] + w.mask * out["L_mask"]
        return out

    def train_step(self) -> dict:
        """One optimizer update; returns the loss breakdown."""
        rng = np.random.default_rng([self.seed, self.step])
        torch.manual_seed(int(rng.integers(2**62)))
        batch = self.builder.build(rng)
        check_batch(batch)
        self.model.train()
        out = self.losses(batch)
        row = {"step": self.step, **{k: float(v.detach()) for k, v in out.items()}}
        if not all(math.isfinite(v) for v in row.values()):
            raise TrainingDiverged(f"non-finite loss at step {self.step}: {row}")
        for g in self.opt.param_groups:
            g["lr"] = self.config.lr * self._lr_scale()
        self.opt.zero_grad()
        out["total"].backward()
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.params, self.config.grad_clip)
        self.opt.step()
        self.model.eval()
        self.step += 1
        self.log.append(row)
        return row

    def train(self, steps: int) -> list[dict]:
        return [self.train_step() for _ in range(steps)]

    # persistence

    def save(self, out_dir, meta: dict | None = None) -> str:
        """Write model and optimizer state; returns the model state hash."""
        out = Path(out_dir)
        info = {"kind": "s2a-finetune", "step": self.step, "seed": self.seed,
                "finetune": self.config.to_dict(), "config": self.model.cfg.to_dict(), **(meta or {})}
        digest = save_checkpoint(self.model, out / "model", info)
        moments = nn.Module()
        names = {id(p): n for n, p in self.model.named_parameters()}
        for p in self.params:
            st = self.opt.state.get(p)
            if not st:
                continue
            key = names[id(p)].replace(".", "__")
            moments.register_buffer(key + "__exp_avg", st["exp_avg"].detach().clone())
            moments.register_buffer(key + "__exp_avg_sq", st["exp_avg_sq"].detach().clone())
            moments.register_buffer(key + "__step", torch.as_tensor(st["step"], dtype=torch.float32).reshape(1))
        save_checkpoint(moments, out / "optim", {"kind": "adamw-moments", "step": self.step})
        write_log(self.log, out / "train_log.csv")
        return digest

    @classmethod
    def resume(cls, ckpt_dir, base: S2AModel, pool, svt: SVTModel | None = None) -> "Finetuner":
        ckpt = Path(ckpt_dir)
        meta = read_manifest(ckpt / "model")
        if meta.get("kind") != "s2a-finetune":
            raise CheckpointError(f"{ckpt}: not a fine-tune checkpoint")
        tuner = cls(base, pool, FinetuneConfig.from_dict(meta["finetune"]), svt, seed=meta["seed"])
        load_state(tuner.model, ckpt / "model")
        tuner.step = int(meta["step"])
        man = read_manifest(ckpt / "optim")
        names = {id(p): n for n, p in tuner.model.named_parameters()}
        holder = nn.Module()
        for key, entry in man["params"].items():
            holder.register_buffer(key, torch.zeros(entry["shape"]))
        load_state(holder, ckpt / "optim")
        bufs = dict(holder.named_buffers())
        for p in tuner.params:
            key = names[id(p)].replace(".", "__")
            if key + "__exp_avg" not in bufs:
                continue
            tuner.opt.state[p] = {
                "step": torch.tensor(float(bufs[key + "__step"][0])),
                "exp_avg": bufs[key + "__exp_avg"].clone(),
                "exp_avg_sq": bufs[key + "__exp_avg_sq"].clone(),
            }
        log_path = ckpt / "train_log.csv"
        if log_path.exists():
            with open(log_path, newline="") as fh:
                tuner.log = [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
        return tuner


def write_log(rows: Sequence[dict], path, columns: Sequence[str] = LOG_COLUMNS) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r["step"] if c == "step" else f"{r.get(c, 0.0):.8g}" for c in columns])


def save_model(model: S2AModel, out_dir, meta: dict | None = None) -> str:
    info = {"kind": "s2a", "config": model.cfg.to_dict(), **(meta or {})}
    info.setdefault("lora", None)
    info.setdefault("prefix", None if model.prefix is None else int(model.prefix.shape[0]))
    return save_checkpoint(model, out_dir, info)


def load_model(ckpt_dir) -> S2AModel:
    """Rebuild a base or fine-tuned model (adapters and prefix included) from disk."""
    ckpt = Path(ckpt_dir)
    meta = read_manifest(ckpt)
    model = S2AModel(TransformerConfig.from_dict(meta["config"]))
    ft = meta.get("finetune")
    if ft is not None:
        model = prepare_finetune(model, ft["strategy"], LoraConfig.from_dict(ft["lora"]), 0.0)
    elif meta.get("prefix"):
        model.add_prefix(int(meta["prefix"]))
    load_state(model, ckpt)
    model.eval()
    return model


# decoding


def remaining_schedule(L: int, cfg: DecodeConfig) -> list[int]:
    """Masked-frame count left after each round; strictly decreasing to 0."""
    T = cfg.steps
    out, prev = [], L
    for t in range(1, T + 1):
        frac = math.cos(math.pi / 2 * t / T) if cfg.schedule == "cosine" else 1.0 - t / T
        rem = 0 if t == T else int(math.floor(L * frac))
        if prev > 0:
            rem = min(rem, prev - 1)
        rem = max(rem, 0)
        out.append(rem)
        prev = rem
    return out


@torch.no_grad()
def decode_batch(
    model: S2AModel,
    semantic: Sequence[np.ndarray],
    regulated: Sequence[np.ndarray],
    prompts: Sequence[np.ndarray],
    cfg: DecodeConfig = DecodeConfig(),
    return_history: bool = False,
):
    """Iterative parallel decoding of a batch of conditions.

    Every round predicts all still-masked frames, finalizes the most confident
    ones per the schedule and keeps the rest masked. Finalized frames are never
    revisited. Returns one ``(L_b, N)`` grid per condition.
    """
    B = len(semantic)
    if not (B == len(regulated) == len(prompts)):
        raise ValueError("semantic, regulated and prompts must have equal counts")
    if B == 0:
        return ([], []) if return_history else []
    lengths = [len(s) for s in semantic]
    for s, r in zip(semantic, regulated):
        if len(s) != len(r):
            raise ValueError(f"condition length mismatch: {len(s)} vs {len(r)}")
    N, V = model.cfg.n_codebooks, model.cfg.v_aco
    was_training = model.training
    model.eval()
    Lmax = max(lengths)
    sem = _long(pad_rows([np.asarray(s) for s in semantic], model.cfg.v_sem))
    reg = _long(pad_rows([np.asarray(r) for r in regulated], PAD))
    prompt = _long(stack_prompts([np.asarray(p) for p in prompts], model.pad_id))
    grid = torch.full((B, Lmax, N), model.pad_id, dtype=torch.long)
    for b, L in enumerate(lengths):
        grid[b, :L] = model.mask_id
    final = torch.zeros(B, Lmax, dtype=torch.bool)
    schedules = [remaining_schedule(L, cfg) for L in lengths]
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    for t in range(cfg.steps):
        _, logits = model(grid, sem, reg, prompt)
        logp = logits.log_softmax(dim=-1)
        if cfg.temperature > 0:
            probs = (logits / cfg.temperature).softmax(dim=-1)
            tokens = torch.multinomial(probs.reshape(-1, V), 1, generator=gen).reshape(B, Lmax, N)
        else:
            tokens = logp.argmax(dim=-1)
        conf = logp.gather(-1, tokens.unsqueeze(-1)).squeeze(-1).sum(dim=-1)
        if cfg.temperature > 0:
            u = torch.rand(conf.shape, generator=gen, dtype=conf.dtype).clamp(1e-12, 1 - 1e-12)
            conf = conf + cfg.temperature * (1 - (t + 1) / cfg.steps) * -torch.log(-torch.log(u))
        for b, L in enumerate(lengths):
            open_ix = torch.nonzero(~final[b, :L]).flatten()
            n_new = open_ix.numel() - schedules[b][t]
            if n_new <= 0:
                continue
            order = np.argsort(-conf[b, open_ix].numpy(), kind="stable")[:n_new]
            pick = open_ix[torch.as_tensor(order)]
            grid[b, pick] = tokens[b, pick]
            final[b, pick] = True
        if return_history:
            history.append(final.clone())
    if was_training:
        model.train()
    out = [grid[b, :L].numpy().copy() for b, L in enumerate(lengths)]
    return (out, history) if return_history else out


def decode(model: S2AModel, cond, prompt, cfg: DecodeConfig = DecodeConfig()) -> np.ndarray:
    """Decode one ``(semantic, regulated)`` condition into an ``(L, N)`` grid."""
    semantic, regulated = cond
    return decode_batch(model, [semantic], [regulated], [prompt], cfg)[0]


def score_condition(lyrics, pitch, dur) -> tuple[np.ndarray, np.ndarray]:
    """Frame-level condition of a score whose durations are in frames."""
    L = int(np.sum(dur))
    return regulate(lyrics, dur, L), regulate_pitch(pitch, dur, L)


def decode_scores(model, scores: Sequence[tuple], prompts, cfg: DecodeConfig = DecodeConfig()) -> list[np.ndarray]:
    """Decode ``(lyrics, pitch, dur)`` scores; each output has ``sum(dur)`` frames."""
    conds = [score_condition(*s) for s in scores]
    return decode_batch(model, [c[0] for c in conds], [c[1] for c in conds], prompts, cfg)


def decode_samples(model, samples: Sequence[TokenSample], prompts, cfg: DecodeConfig = DecodeConfig(), batch_size: int = 64):
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        out += decode_batch(model, [s.semantic for s in chunk], [s.regulated for s in chunk],
                            prompts[i : i + batch_size], cfg)
    return out


def model_hash(model: nn.Module) -> str:
    return state_hash(model)


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
