"""End-to-end toy pipeline: corpus splits, base and transcriber training,
fine-tuning arms, decoding and evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .corpus import TokenSample, WorldSpec, contours_from_frames, gen_corpus, oracle_decode
from .eval import (
    LeakageReport,
    f0_rmse,
    leakage_from_outputs,
    leakage_prompts,
    pitch_frame_accuracy,
    spectral_distance,
)
from .net import S2AModel, SVTModel, TransformerConfig, state_hash
from .s2a import (
    ABLATIONS,
    DecodeConfig,
    FinetuneConfig,
    Finetuner,
    ablate,
    decode_samples,
    pretrain_base,
)
from .svt import train_svt

SPLITS = ("pretrain", "train", "heldout")


def leak_world() -> WorldSpec:
    """Small world where half the lyric tokens key codebook 0 on pitch."""
    return WorldSpec(v_sem=16, v_aco=1024, n_singers=8, pitch_low=54, pitch_high=65, leak_strength=0.5)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one seeded run needs. Held-out singers are the last
    ``n_heldout_singers`` ids; they appear in base pretraining only."""

    world: WorldSpec = field(default_factory=leak_world)
    S: int = 8
    L: int = 32
    group_size: int = 8
    pretrain_groups: int = 20
    train_groups: int = 10
    heldout_groups: int = 16
    n_heldout_singers: int = 2
    s2a: TransformerConfig | None = None
    svt: TransformerConfig | None = None
    pretrain_steps: int = 400
    svt_epochs: int = 3
    finetune_steps: int = 500
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    leak_shuffles: int = 10_000

    def __post_init__(self):
        if not 1 <= self.n_heldout_singers < self.world.n_singers:
            raise ValueError(
                f"zero-shot split needs 1 <= n_heldout_singers < n_singers, "
                f"got {self.n_heldout_singers} of {self.world.n_singers}"
            )
        if self.heldout_groups < 2:
            raise ValueError("held-out singers need at least 2 groups so prompts come from other utterances")

    def _sized(self, preset: TransformerConfig) -> TransformerConfig:
        w = self.world
        return replace(preset, v_aco=w.v_aco, v_sem=w.v_sem, n_codebooks=w.n_codebooks)

    @property
    def s2a_config(self) -> TransformerConfig:
        return self._sized(self.s2a or TransformerConfig.s2a_toy())

    @property
    def svt_config(self) -> TransformerConfig:
        return self._sized(self.svt or TransformerConfig.svt_toy())

    @property
    def train_singers(self) -> list[int]:
        return list(range(self.world.n_singers - self.n_heldout_singers))

    @property
    def heldout_singers(self) -> list[int]:
        return list(range(self.world.n_singers - self.n_heldout_singers, self.world.n_singers))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif isinstance(v, DecodeConfig):
                v = asdict(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        kw = dict(d)
        if "world" in kw:
            kw["world"] = WorldSpec.from_dict(kw["world"])
        for k in ("s2a", "svt"):
            if kw.get(k) is not None:
                kw[k] = TransformerConfig.from_dict(kw[k])
        if "finetune" in kw:
            kw["finetune"] = FinetuneConfig.from_dict(kw["finetune"])
        if "decode" in kw:
            dc = kw["decode"]
            bad = set(dc) - {f.name for f in fields(DecodeConfig)}
            if bad:
                raise ValueError(f"unknown decode keys: {sorted(bad)}")
            kw["decode"] = DecodeConfig(**dc)
        return cls(**kw)


def make_splits(cfg: ExperimentConfig, seed: int) -> dict[str, list[TokenSample]]:
    """Disjoint-group corpora: ``pretrain`` (all singers), ``train`` (training
    singers) and ``heldout`` (unseen-at-fine-tuning singers)."""
    w = cfg.world
    every = list(range(w.n_singers))
    pre = gen_corpus(w, every, cfg.pretrain_groups, cfg.group_size, cfg.S, cfg.L, seed=3 * seed)
    train = gen_corpus(w, cfg.train_singers, cfg.train_groups, cfg.group_size, cfg.S, cfg.L,
                       seed=3 * seed + 1, first_group_id=len(every) * cfg.pretrain_groups)
    held = gen_corpus(w, cfg.heldout_singers, cfg.heldout_groups, cfg.group_size, cfg.S, cfg.L,
                      seed=3 * seed + 2,
                      first_group_id=len(every) * cfg.pretrain_groups + len(cfg.train_singers) * cfg.train_groups)
    return {"pretrain": pre, "train": train, "heldout": held}


@dataclass
class Scores:
    pitch_accuracy: float
    f0_rmse: float
    spectral_distance: float
    n: int

    def as_row(self) -> dict:
        return asdict(self)


def score_outputs(outputs, samples: Sequence[TokenSample], spec: WorldSpec) -> Scores:
    """Frame pitch accuracy, F0 RMSE and feature distance against the references."""
    accs, rmses, dists = [], [], []
    for out, ref in zip(outputs, samples):
        dec = oracle_decode(out, spec)
        accs.append(pitch_frame_accuracy(dec.pitch, ref.regulated))
        dists.append(spectral_distance(out, ref.acoustic, spec))
        ref_dec = oracle_decode(ref.acoustic, spec)
        pc = contours_from_frames(dec.pitch, dec.singer, spec).f0
        rc = contours_from_frames(ref_dec.pitch, ref_dec.singer, spec).f0
        if np.any((pc > 0) & (rc > 0)):
            rmses.append(f0_rmse(pc, rc))
    return Scores(
        float(np.mean(accs)),
        float(np.mean(rmses)) if rmses else float("nan"),
        float(np.mean(dists)),
        len(accs),
    )


def train_components(cfg: ExperimentConfig, splits, seed: int) -> tuple[S2AModel, SVTModel]:
    """Base model (no pitch input) and transcriber, both trained on the pretraining split."""
    base = pretrain_base(splits["pretrain"], cfg.s2a_config, cfg.pretrain_steps, seed=seed)
    svt = train_svt(splits["pretrain"], cfg.svt_config, epochs=cfg.svt_epochs, seed=seed).model
    for p in svt.parameters():
        p.requires_grad_(False)
    svt.eval()
    return base, svt


def finetune_arm(cfg: ExperimentConfig, base, svt, splits, ablation: str, seed: int) -> Finetuner:
    fc = replace(cfg.finetune, weights=ablate(cfg.finetune.weights, ablation))
    tuner = Finetuner(base, splits["train"], fc, svt if fc.weights.svt > 0 else None, seed=seed)
    tuner.train(cfg.finetune_steps)
    return tuner


@dataclass
class ArmResult:
    ablation: str
    scores: Scores
    leakage: LeakageReport
    trainable_ratio: float
    model_hash: str


def decode_heldout(model, cfg: ExperimentConfig, samples: Sequence[TokenSample], seed: int):
    """Decode every sample with its leakage-pairing prompt; returns ``(outputs, prompts, others)``."""
    prompts, others = leakage_prompts(samples, samples, cfg.world, seed)
    return decode_samples(model, samples, prompts, cfg.decode), prompts, others


def evaluate_model(model, cfg: ExperimentConfig, splits, seed: int) -> tuple[Scores, LeakageReport]:
    held = splits["heldout"]
    outputs, prompts, others = decode_heldout(model, cfg, held, seed)
    scores = score_outputs(outputs, held, cfg.world)
    report = leakage_from_outputs(outputs, prompts, others, cfg.world, seed, cfg.leak_shuffles)
    return scores, report


def run_study(
    cfg: ExperimentConfig, seed: int, ablations: Sequence[str] = ("full", "no_cl", "no_cl+no_svt")
) -> dict[str, ArmResult]:
    """Train the shared components once, then fine-tune and evaluate each arm."""
    for a in ablations:
        if a not in ABLATIONS:
            raise ValueError(f"unknown ablation {a!r}")
    splits = make_splits(cfg, seed)
    base, svt = train_components(cfg, splits, seed)
    out = {}
    for a in ablations:
        tuner = finetune_arm(cfg, base, svt, splits, a, seed)
        scores, report = evaluate_model(tuner.model, cfg, splits, seed)
        out[a] = ArmResult(a, scores, report, tuner.trainable_ratio, state_hash(tuner.model))
    return out
