"""Tiny transformer backbone shared by the S2A and SVT models, plus LoRA."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tokens import N_PITCH_TOKENS


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    ffn: int = 256
    max_len: int = 512
    v_aco: int = 256
    n_codebooks: int = 2
    v_sem: int = 64
    n_pitch: int = N_PITCH_TOKENS
    dropout: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "dropout":
                if not 0.0 <= v < 1.0:
                    raise ValueError("dropout must be in [0, 1)")
            elif v < 1:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown TransformerConfig keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def s2a_toy(cls, **kw) -> "TransformerConfig":
        return cls(**{"layers": 4, "dim": 64, "heads": 4, "ffn": 256, **kw})

    @classmethod
    def svt_full(cls, **kw) -> "TransformerConfig":
        return cls(**{"layers": 4, "dim": 512, "heads": 8, "ffn": 2048, "n_codebooks": 12, **kw})

    @classmethod
    def svt_toy(cls, **kw) -> "TransformerConfig":
        return cls(**{"layers": 4, "dim": 64, "heads": 4, "ffn": 256, **kw})


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    dropout: float = 0.1
    targets: tuple[str, ...] = ("q", "k", "v", "o")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")

    @classmethod
    def full_scale(cls) -> "LoraConfig":
        return cls(rank=16, alpha=32.0, dropout=0.1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        d = dict(d)
        if "targets" in d:
            d["targets"] = tuple(d["targets"])
        return cls(**d)


def sinusoidal_table(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.float()


def lora_apply(weight: torch.Tensor, A: torch.Tensor, B: torch.Tensor, alpha: float) -> torch.Tensor:
    """Effective weight ``W + (alpha / r) * B @ A``."""
    r = A.shape[0]
    if B.shape[1] != r or weight.shape != (B.shape[0], A.shape[1]):
        raise ValueError(
            f"shape mismatch: W {tuple(weight.shape)}, A {tuple(A.shape)}, B {tuple(B.shape)}"
        )
    return weight + (alpha / r) * (B @ A)


class LoRALinear(nn.Module):
    """Frozen linear layer with a trainable low-rank additive update."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float = 0.0):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.A = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.A, a=math.sqrt(5))
        self.drop = nn.Dropout(dropout)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def effective_weight(self) -> torch.Tensor:
        return lora_apply(self.base.weight, self.A, self.B, self.alpha)

    def forward(self, x):
        return self.base(x) + self.scaling * F.linear(F.linear(self.drop(x), self.A), self.B)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pos=None, pad_mask=None, prefix=None):
        B, T, D = x.shape
        h = self.heads
        qk_in = x if pos is None else x + pos
        q, k, v = self.q(qk_in), self.k(qk_in), self.v(x)
        if prefix is not None:
            P = prefix.shape[0]
            k = torch.cat([self.k(prefix).expand(B, P, D), k], dim=1)
            v = torch.cat([self.v(prefix).expand(B, P, D), v], dim=1)
            if pad_mask is not None:
                pad_mask = torch.cat([pad_mask.new_zeros(B, P), pad_mask], dim=1)
        S = k.shape[1]
        q = q.view(B, T, h, D // h).transpose(1, 2)
        k = k.view(B, S, h, D // h).transpose(1, 2)
        v = v.view(B, S, h, D // h).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(D // h)
        if pad_mask is not None:
            att = att.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        att = self.drop(att.softmax(dim=-1))
        out = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.o(out)


class Block(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.attn = SelfAttention(cfg.dim, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.ff1 = nn.Linear(cfg.dim, cfg.ffn)
        self.ff2 = nn.Linear(cfg.ffn, cfg.dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pos=None, pad_mask=None, prefix=None):
        x = x + self.drop(self.attn(self.ln1(x), pos=pos, pad_mask=pad_mask, prefix=prefix))
        return x + self.drop(self.ff2(F.gelu(self.ff1(self.ln2(x)))))


class S2AModel(nn.Module):
    """Masked acoustic-token predictor conditioned on semantic + regulated pitch + prompt.

    Acoustic code ids ``v_aco`` and ``v_aco + 1`` are MASK and PAD; semantic id
    ``v_sem`` is PAD. The pitch embedding starts at zero so a freshly extended
    model behaves like one without pitch input.
    """

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.code_emb = nn.ModuleList(nn.Embedding(cfg.v_aco + 2, d) for _ in range(cfg.n_codebooks))
        self.sem_emb = nn.Embedding(cfg.v_sem + 1, d)
        self.pitch_emb = nn.Embedding(cfg.n_pitch, d)
        nn.init.zeros_(self.pitch_emb.weight)
        self.cond = nn.Linear(d, d)
        self.segment = nn.Embedding(2, d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d)
        self.heads = nn.ModuleList(nn.Linear(d, cfg.v_aco) for _ in range(cfg.n_codebooks))
        self.prefix: nn.Parameter | None = None
        self.register_buffer("pe", sinusoidal_table(cfg.max_len, d), persistent=False)

    @property
    def mask_id(self) -> int:
        return self.cfg.v_aco

    @property
    def pad_id(self) -> int:
        return self.cfg.v_aco + 1

    def add_prefix(self, n_tokens: int = 20):
        """Shared virtual key/value tokens injected into every attention layer."""
        w = next(self.parameters())
        self.prefix = nn.Parameter(0.02 * torch.randn(n_tokens, self.cfg.dim, dtype=w.dtype))

    def embed_codes(self, grid: torch.Tensor) -> torch.Tensor:
        return sum(emb(grid[..., k]) for k, emb in enumerate(self.code_emb))

    def embed_condition(self, semantic: torch.Tensor, regulated: torch.Tensor) -> torch.Tensor:
        """Composite conditioning ``e_p + e_s`` per frame."""
        if semantic.shape != regulated.shape:
            raise ValueError(f"semantic {tuple(semantic.shape)} vs regulated {tuple(regulated.shape)}")
        return self.pitch_emb(regulated) + self.sem_emb(semantic)

    def forward(self, masked, semantic, regulated, prompt=None):
        """Return ``(hidden (B, L, d), logits (B, L, N, V))`` for the target frames.

        Accepts unbatched ``(L, N)`` inputs as well. Prompt frames are prepended
        as unmasked context and excluded from the outputs; PAD frames in either
        part are hidden from attention.
        """
        unbatched = masked.dim() == 2
        if unbatched:
            masked, semantic, regulated = masked[None], semantic[None], regulated[None]
            if prompt is not None:
                prompt = prompt[None]
        B, L, N = masked.shape
        if N != self.cfg.n_codebooks:
            raise ValueError(f"expected {self.cfg.n_codebooks} codebooks, got {N}")
        if semantic.shape != (B, L):
            raise ValueError(f"cond length {tuple(semantic.shape)} does not match grid {(B, L)}")
        x = self.embed_codes(masked) + self.cond(self.embed_condition(semantic, regulated))
        x = x + self.segment.weight[1] + self.pe[:L]
        pad = masked[..., 0] == self.pad_id
        Lr = 0
        if prompt is not None and prompt.shape[1] > 0:
            if prompt.shape[0] != B or prompt.shape[2] != N:
                raise ValueError(f"prompt shape {tuple(prompt.shape)} incompatible with {(B, L, N)}")
            Lr = prompt.shape[1]
            xp = self.embed_codes(prompt) + self.segment.weight[0] + self.pe[:Lr]
            x = torch.cat([xp, x], dim=1)
            pad = torch.cat([prompt[..., 0] == self.pad_id, pad], dim=1)
        for blk in self.blocks:
            x = blk(x, pad_mask=pad, prefix=self.prefix)
        hidden = self.norm(x[:, Lr:])
        logits = torch.stack([head(hidden) for head in self.heads], dim=2)
        if unbatched:
            return hidden[0], logits[0]
        return hidden, logits


class SVTModel(nn.Module):
    """Encoder-only frame-level pitch transcriber over acoustic code grids.

    Codes are embedded per codebook, concatenated, projected to ``dim`` and
    layer-normalized. Positions enter attention queries/keys only, so the
    residual path stays frame-local.
    """

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        e = math.ceil(cfg.dim / cfg.n_codebooks)
        self.code_emb = nn.ModuleList(nn.Embedding(cfg.v_aco + 2, e) for _ in range(cfg.n_codebooks))
        self.proj = nn.Linear(e * cfg.n_codebooks, cfg.dim)
        self.in_norm = nn.LayerNorm(cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.n_pitch)
        self.register_buffer("pe", sinusoidal_table(cfg.max_len, cfg.dim), persistent=False)

    def _encode(self, x, pad):
        x = self.in_norm(self.proj(x))
        pos = self.pe[: x.shape[1]]
        for blk in self.blocks:
            x = blk(x, pos=pos, pad_mask=pad)
        return self.head(self.norm(x))

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        unbatched = grid.dim() == 2
        if unbatched:
            grid = grid[None]
        if grid.shape[-1] != self.cfg.n_codebooks:
            raise ValueError(f"SVT expects {self.cfg.n_codebooks} codebooks, got {grid.shape[-1]}")
        x = torch.cat([emb(grid[..., k]) for k, emb in enumerate(self.code_emb)], dim=-1)
        pad = grid[..., 0] == self.cfg.v_aco + 1
        out = self._encode(x, pad)
        return out[0] if unbatched else out

    def forward_soft(self, probs: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        """Pitch logits from per-codebook code distributions ``(B, L, N, V)``.

        Each frame embedding is the probability-weighted mix of code embeddings,
        which keeps the path differentiable with respect to ``probs``.
        """
        if probs.shape[2] != self.cfg.n_codebooks or probs.shape[3] != self.cfg.v_aco:
            raise ValueError(f"soft tokens of shape {tuple(probs.shape)} do not match SVT config")
        x = torch.cat(
            [probs[:, :, k] @ emb.weight[: self.cfg.v_aco] for k, emb in enumerate(self.code_emb)], dim=-1
        )
        return self._encode(x, pad)


def forward_svt(model: SVTModel, grid) -> torch.Tensor:
    """Per-frame pitch logits ``(L, C)`` for one ``(L, N)`` grid."""
    g = torch.as_tensor(np.asarray(grid), dtype=torch.long)
    return model(g)


def forward_s2a(model: S2AModel, masked, cond, prompt=None):
    """Unbatched convenience wrapper: ``cond`` is ``(semantic, regulated)``."""
    semantic, regulated = (torch.as_tensor(np.asarray(c), dtype=torch.long) for c in cond)
    m = torch.as_tensor(np.asarray(masked), dtype=torch.long)
    p = None if prompt is None else torch.as_tensor(np.asarray(prompt), dtype=torch.long).reshape(-1, m.shape[1])
    return model(m, semantic, regulated, p)


def mask_tokens(grid, ratio: float, seed: int, mask_id: int):
    """Replace ``ceil(ratio * L)`` random frames (all codebooks) by ``mask_id``."""
    g = np.asarray(grid, dtype=np.int64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("grid must be a non-empty (L, N) array")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    L = g.shape[0]
    n = min(L, math.ceil(ratio * L))
    rng = np.random.default_rng(seed)
    mask = np.zeros(L, dtype=bool)
    mask[rng.choice(L, size=n, replace=False)] = True
    out = g.copy()
    out[mask] = mask_id
    return out, mask


# LoRA injection and merging


def lora_layers(model: nn.Module) -> list[LoRALinear]:
    return [m for m in model.modules() if isinstance(m, LoRALinear)]


def inject_lora(model: nn.Module, cfg: LoraConfig) -> list[LoRALinear]:
    """Wrap the attention projections named in ``cfg.targets`` with LoRA adapters."""
    added = []
    for mod in model.modules():
        if isinstance(mod, SelfAttention):
            for name in cfg.targets:
                base = getattr(mod, name)
                if isinstance(base, LoRALinear):
                    raise ValueError(f"attention projection {name!r} already adapted")
                wrapped = LoRALinear(base, cfg.rank, cfg.alpha, cfg.dropout)
                setattr(mod, name, wrapped)
                added.append(wrapped)
    return added


def lora_merge(model: nn.Module) -> nn.Module:
    """Copy of ``model`` with every adapter folded into a plain linear layer."""
    merged = copy.deepcopy(model)
    for mod in list(merged.modules()):
        for name, child in list(mod.named_children()):
            if isinstance(child, LoRALinear):
                lin = nn.Linear(child.base.in_features, child.base.out_features, dtype=child.base.weight.dtype)
                with torch.no_grad():
                    lin.weight.copy_(child.effective_weight())
                    lin.bias.copy_(child.base.bias)
                setattr(mod, name, lin)
    return merged


def count_params(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


# checkpoints: JSON manifest + one little-endian float32 blob per tensor


def save_checkpoint(model: nn.Module, out_dir, meta: dict) -> str:
    """Write ``manifest.json`` and per-parameter blobs; return the checkpoint hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    registry = {}
    digest = hashlib.sha256()
    for name, t in model.state_dict().items():
        fname = name + ".f32"
        data = t.detach().cpu().numpy().astype("<f4").tobytes()
        (out / fname).write_bytes(data)
        registry[name] = {"shape": list(t.shape), "file": fname}
        digest.update(name.encode())
        digest.update(data)
    manifest = dict(meta)
    manifest["params"] = registry
    manifest["sha256"] = digest.hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest["sha256"]


def read_manifest(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no manifest.json in {ckpt_dir}")
    return json.loads(path.read_text())


def load_state(model: nn.Module, ckpt_dir) -> dict:
    """Fill ``model`` from a checkpoint directory; every registry entry must be present."""
    d = Path(ckpt_dir)
    manifest = read_manifest(d)
    registry = manifest["params"]
    state = model.state_dict()
    missing = [k for k in state if k not in registry]
    if missing:
        raise CheckpointError(f"checkpoint {d} lacks tensor {missing[0]!r}")
    new_state = {}
    for name, t in state.items():
        entry = registry[name]
        blob = d / entry["file"]
        if not blob.exists():
            raise CheckpointError(f"checkpoint {d} is missing tensor {name!r} ({entry['file']})")
        arr = np.frombuffer(blob.read_bytes(), dtype="<f4")
        if arr.size != int(np.prod(entry["shape"])) or list(t.shape) != entry["shape"]:
            raise CheckpointError(f"tensor {name!r} has wrong size in {d}")
        new_state[name] = torch.from_numpy(arr.copy()).reshape(t.shape).to(t.dtype)
    model.load_state_dict(new_state)
    return manifest


def state_hash(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, t in model.state_dict().items():
        digest.update(name.encode())
        digest.update(t.detach().cpu().numpy().astype("<f4").tobytes())
    return digest.hexdigest()
