"""Acceptance suite: one PASS/FAIL line per criterion in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
collected under the "acceptance criteria" section at the end of the output.
"""

import copy
import json
import time

import numpy as np
import pytest
import torch

from melctl.cli import main
from melctl.corpus import ContourPair, WorldSpec, gen_corpus, gen_sample, render_contours, render_waveform
from melctl.eval import hnr_estimate
from melctl.fdcheck import check_gradient
from melctl.losses import LossWeights, build_soft_labels, dur_loss, fcl_loss, mask_loss, scl_loss, seg_loss
from melctl.net import LoraConfig, S2AModel, TransformerConfig, inject_lora, lora_merge
from melctl.pipeline import ExperimentConfig, leak_world, run_study
from melctl.s2a import DecodeConfig, decode_scores, prepare_finetune, trainable_ratio
from melctl.svt import frame_accuracy, train_svt, transcribe_many
from melctl.tokens import PAD, REST, frame_boundaries, regulate_pitch, run_count

# 1. gradient suite


def _scl_case(rng):
    K, d = rng.integers(2, 6, size=2)
    tau = rng.uniform(0.1, 1.0)
    a, b = rng.standard_normal((2, K, d))
    return (lambda x, y: scl_loss(x, y, tau)), [torch.tensor(a), torch.tensor(b)]


def _fcl_case(rng):
    L, d = int(rng.integers(2, 7)), int(rng.integers(2, 6))
    alpha = rng.uniform(0.1, 0.9)
    Y = rng.choice([-1.0, 0.0, alpha, 1.0], size=(L, L))
    Y[0, 0] = 1.0
    a, b = rng.standard_normal((2, L, d))
    return (lambda x, y: fcl_loss(x, y, Y)), [torch.tensor(a), torch.tensor(b)]


def _note_frames(rng, L):
    notes = rng.choice([60, 61, 62, REST], size=L)
    runs = rng.integers(1, 4, size=L)
    frames = np.repeat(notes, runs)[:L]
    if rng.random() < 0.3 and L > 2:
        frames[-1] = PAD
    return frames


def _seg_case(rng):
    L = int(rng.integers(2, 7))
    targets = _note_frames(rng, L)
    delta = rng.uniform(0.2, 1.0)
    logits = rng.standard_normal((L, 130)) * 2
    return (lambda z: seg_loss(z.softmax(-1), targets, delta)), [torch.tensor(logits)]


def _dur_case(rng):
    n = int(rng.integers(1, 5))
    pitch = rng.choice([55, 60, 64, REST], size=n)
    dur = rng.integers(1, 5, size=n)
    L = int(rng.integers(n, 7))
    logits = rng.standard_normal((L, 130)) * 2
    return (lambda z: dur_loss(z.softmax(-1), pitch, dur, L)), [torch.tensor(logits)]


def _mask_case(rng):
    L, N, V = int(rng.integers(2, 7)), int(rng.integers(1, 4)), int(rng.integers(3, 13))
    targets = rng.integers(0, V, size=(L, N))
    mask = rng.random(L) < 0.5
    mask[rng.integers(L)] = True
    logits = rng.standard_normal((L, N, V))
    return (lambda z: mask_loss(z, targets, mask)), [torch.tensor(logits)]


GRADIENT_CASES = {
    "sequence contrastive": _scl_case,
    "frame contrastive": _fcl_case,
    "segment": _seg_case,
    "duration": _dur_case,
    "masked CE": _mask_case,
}


@pytest.mark.criterion(1, "gradient suite (100 instances per loss, rel err <= 1e-4, < 60 s)")
def test_gradient_suite(record_property):
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    worst = {}
    for name, make in GRADIENT_CASES.items():
        worst[name] = max(check_gradient(*make(rng)) for _ in range(100))
    elapsed = time.perf_counter() - start
    record_property("detail", f"worst {max(worst.values()):.2e} over {len(worst)} losses in {elapsed:.1f} s")
    assert all(err <= 1e-4 for err in worst.values()), worst
    assert elapsed < 60


# 2. regulation invariants


@pytest.mark.criterion(2, "regulation telescopes to L over 1e4 random inputs")
def test_regulation_telescopes(record_property):
    rng = np.random.default_rng(12)
    failures = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 41))
        dur = rng.integers(1, 51, size=n)
        pitch = rng.integers(0, 129, size=n)
        L = int(rng.integers(1, 501))
        start, end = frame_boundaries(dur, L)
        spans = end - start
        ok = spans.sum() == L and (spans >= 0).all() and regulate_pitch(pitch, dur, L).size == L
        failures += not ok
    record_property("detail", f"{failures} failures")
    assert failures == 0


# 3. label-matrix oracle


def _label_cell(pa, pb, sa, sb, alpha):
    silent = {REST, PAD}
    if pa in silent or pb in silent:
        return -1.0
    if pa != pb:
        return 0.0
    return 1.0 if sa == sb else alpha


@pytest.mark.criterion(3, "soft labels equal a cell-by-cell oracle on 1e3 pairs")
def test_soft_labels_oracle(record_property):
    rng = np.random.default_rng(13)
    mismatches = 0
    for _ in range(1000):
        L = int(rng.integers(1, 21))
        alpha = float(rng.uniform(0.05, 0.95))
        a = rng.choice([57, 58, 59, 60, REST, PAD], size=L)
        b = rng.choice([57, 58, 59, 60, REST, PAD], size=L)
        s = rng.integers(0, 4, size=L)
        want = np.array([[_label_cell(a[i], b[j], s[i], s[j], alpha) for j in range(L)] for i in range(L)])
        mismatches += not np.array_equal(build_soft_labels(a, b, s, alpha), want)
    record_property("detail", f"{mismatches} mismatching matrices")
    assert mismatches == 0


# 4. transcriber fidelity


def _svt_world(code_noise=0.0):
    return WorldSpec(v_sem=16, v_aco=1024, n_singers=8, pitch_low=54, pitch_high=65,
                     leak_strength=0.0, code_noise=code_noise)


def _svt_corpora(spec, seed):
    train = gen_corpus(spec, range(spec.n_singers), 10, 8, 8, 32, seed=2 * seed)
    held = gen_corpus(spec, range(spec.n_singers), 2, 8, 8, 32, seed=2 * seed + 1, first_group_id=1000)
    return train, held


def _svt_config(spec):
    return TransformerConfig.svt_toy(v_aco=spec.v_aco, v_sem=spec.v_sem, n_codebooks=spec.n_codebooks)


@pytest.mark.criterion(4, "transcriber held-out frame accuracy >= 0.99 on the clean world, < 5 min")
def test_svt_fidelity(record_property):
    spec = _svt_world()
    train, held = _svt_corpora(spec, 0)
    start = time.perf_counter()
    ckpt = train_svt(train, _svt_config(spec), epochs=10, seed=0)
    acc = frame_accuracy(ckpt.model, held)
    elapsed = time.perf_counter() - start
    record_property("detail", f"accuracy {acc:.4f} in {elapsed:.0f} s")
    assert acc >= 0.99
    assert elapsed < 300


# 5. fragmentation


@pytest.mark.criterion(5, "segment and duration losses give fewer pitch runs than CE alone, 3 seeds")
def test_fragmentation_reduction(record_property):
    spec = _svt_world(code_noise=0.15)
    rows = []
    for seed in range(3):
        train, held = _svt_corpora(spec, seed)
        counts = []
        for weights in (LossWeights(), LossWeights(seg=0.0, dur=0.0)):
            model = train_svt(train, _svt_config(spec), weights, epochs=10, seed=seed).model
            counts.append(sum(run_count(p) for p in transcribe_many(model, [s.acoustic for s in held])))
        truth = sum(run_count(s.regulated) for s in held)
        rows.append((seed, *counts, truth))
    record_property("detail", "; ".join(f"seed {s}: {a} vs CE-only {b} (truth {t})" for s, a, b, t in rows))
    assert all(aux < ce for _, aux, ce, _ in rows)


# 6. duration control


@pytest.mark.criterion(6, "decoded length equals total score duration for 100 random scores")
def test_decode_length(record_property):
    spec = leak_world()
    cfg = ExperimentConfig().s2a_config
    torch.manual_seed(0)
    model = prepare_finetune(S2AModel(cfg), "lora")
    model.eval()
    rng = np.random.default_rng(16)
    scores, prompts = [], []
    for _ in range(100):
        n = int(rng.integers(1, 9))
        lyrics = rng.integers(0, spec.v_sem, size=n)
        pitch = rng.choice(np.r_[np.arange(spec.pitch_low, spec.pitch_high + 1), REST], size=n)
        dur = rng.integers(1, 9, size=n)
        scores.append((lyrics, pitch, dur))
        prompts.append(rng.integers(0, spec.v_aco, size=(int(rng.integers(0, 6)), spec.n_codebooks)))
    outputs = decode_scores(model, scores, prompts, DecodeConfig(steps=4))
    wrong = sum(o.shape != (int(s[2].sum()), spec.n_codebooks) for o, s in zip(outputs, scores))
    record_property("detail", f"{wrong} of {len(scores)} lengths wrong")
    assert wrong == 0


# 7. leakage reproduction


@pytest.mark.criterion(7, "leakage gap ordering and accuracy margin on the entangled world, 3 seeds, < 20 min")
def test_leakage_reproduction(record_property):
    cfg = ExperimentConfig()
    start = time.perf_counter()
    results = [run_study(cfg, seed) for seed in range(3)]
    elapsed = time.perf_counter() - start
    gaps = np.array([[r[a].leakage.gap() for a in ("full", "no_cl")] for r in results])
    margins = np.array([r["full"].scores.pitch_accuracy - r["no_cl+no_svt"].scores.pitch_accuracy for r in results])
    record_property("detail", "; ".join(
        f"seed {s}: gap full {g[0]:.2f} < no_cl {g[1]:.2f}, accuracy margin {m:.3f}"
        for s, (g, m) in enumerate(zip(gaps, margins))
    ) + f"; {elapsed:.0f} s")
    assert (gaps[:, 0] < gaps[:, 1]).all()
    assert (margins >= 0.05).all()
    assert elapsed < 20 * 60


# 8. adapter contract


@pytest.mark.criterion(8, "adapter identity <= 1e-7, merge <= 1e-6, trainable ratio < 10%")
def test_lora_contract(record_property):
    cfg = ExperimentConfig().s2a_config
    torch.manual_seed(0)
    base = S2AModel(cfg).eval()
    rng = np.random.default_rng(18)
    L = 20
    masked = torch.tensor(rng.integers(0, cfg.v_aco + 1, size=(L, cfg.n_codebooks)))
    sem = torch.tensor(rng.integers(0, cfg.v_sem, size=L))
    pit = torch.tensor(rng.integers(54, 66, size=L))
    prompt = torch.tensor(rng.integers(0, cfg.v_aco, size=(6, cfg.n_codebooks)))
    ref = base(masked, sem, pit, prompt)[1]
    adapted = copy.deepcopy(base)
    inject_lora(adapted, LoraConfig(rank=4, alpha=8.0, dropout=0.0))
    adapted.eval()
    identity = (adapted(masked, sem, pit, prompt)[1] - ref).abs().max().item()
    with torch.no_grad():
        for name, p in adapted.named_parameters():
            if p.requires_grad and name.endswith((".A", ".B")):
                p.normal_(0.0, 0.2)
    out = adapted(masked, sem, pit, prompt)[1]
    merged = lora_merge(adapted).eval()(masked, sem, pit, prompt)[1]
    merge_err = ((merged - out).abs().max() / out.abs().max()).item()
    ratio = trainable_ratio(prepare_finetune(base, "lora"))
    record_property("detail", f"identity {identity:.1e}, merge {merge_err:.1e}, ratio {100 * ratio:.2f}%")
    assert identity <= 1e-7
    assert merge_err <= 1e-6
    assert ratio < 0.10


# 9. HNR estimator


@pytest.mark.criterion(9, "HNR estimate within 1 dB of the rendered target at 0/10/20/30 dB")
def test_hnr_accuracy(record_property):
    spec = WorldSpec()
    worst = 0.0
    for seed in range(3):
        contours = render_contours(gen_sample(spec, 8, 40, seed % spec.n_singers, seed), spec)
        for target in (0.0, 10.0, 20.0, 30.0):
            for rate in (8000, 16000):
                wave = render_waveform(contours, target, rate, seed=seed)
                worst = max(worst, abs(hnr_estimate(wave, contours.f0, rate) - target))
        tone = ContourPair(np.full(50, 220.0), np.full(50, 1.0))
        worst = max(worst, abs(hnr_estimate(render_waveform(tone, 15.0, 16000, seed=seed), 220.0, 16000) - 15.0))
    record_property("detail", f"worst error {worst:.3f} dB")
    assert worst <= 1.0


# 10. determinism

DET_CONFIG = {
    "world": {"v_sem": 8, "v_aco": 128, "n_singers": 3, "pitch_low": 55, "pitch_high": 62, "leak_strength": 0.5},
    "S": 4,
    "L": 12,
    "group_size": 4,
    "pretrain_groups": 2,
    "train_groups": 3,
    "heldout_groups": 2,
    "n_heldout_singers": 1,
    "s2a": {"layers": 1, "dim": 16, "heads": 2, "ffn": 32, "max_len": 64},
    "svt": {"layers": 1, "dim": 16, "heads": 2, "ffn": 32, "max_len": 64},
    "pretrain_steps": 5,
    "svt_epochs": 2,
    "finetune_steps": 5,
    "finetune": {"plan": {"K": 8, "K_g": 4}},
    "decode": {"steps": 3},
    "leak_shuffles": 500,
}


def _pipeline_artifacts(cfg_path, out):
    for cmd in ("gen-corpus", "pretrain-s2a", "train-svt", "train-s2a", "decode", "eval"):
        extra = ["--ablation", "full"] if cmd in ("train-s2a", "decode", "eval") else []
        assert main([cmd, "--config", str(cfg_path), "--seed", "5", "--out", str(out), *extra]) == 0
    files = {f"corpus/{s}.jsonl": (out / "corpus" / f"{s}.jsonl").read_bytes()
             for s in ("pretrain", "train", "heldout")}
    for ckpt in ("base", "svt", "s2a/full/model"):
        files[ckpt] = json.loads((out / ckpt / "manifest.json").read_text())["sha256"]
    for name in ("metrics.csv", "leakage.csv"):
        files[f"eval/{name}"] = (out / "eval" / "full" / name).read_bytes()
    return files


@pytest.mark.criterion(10, "same config and seed give identical corpora, checkpoint hashes and metric CSVs")
def test_determinism(tmp_path, record_property):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(DET_CONFIG))
    first = _pipeline_artifacts(cfg_path, tmp_path / "a")
    second = _pipeline_artifacts(cfg_path, tmp_path / "b")
    differing = sorted(k for k in first if first[k] != second[k])
    record_property("detail", f"{len(first)} artifacts compared, differing: {differing or 'none'}")
    assert not differing
