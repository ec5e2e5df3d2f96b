"""``melctl``: corpus generation, training, decoding, evaluation and ablation grids.

All artifacts live under one run directory (``--out``)::

    corpus/{pretrain,train,heldout}.jsonl  corpus/manifest.json
    base/        pitch-free base model
    svt/         pitch transcriber
    s2a/<arm>/   fine-tuned model, optimizer moments, train_log.csv
    decode/<arm>/outputs.jsonl + manifest.json
    eval/<arm>/metrics.csv, leakage.csv, leakage.txt
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .corpus import CorpusFormatError, TokenSample, oracle_decode, read_corpus, write_corpus
from .eval import leakage_from_outputs
from .net import CheckpointError, read_manifest
from .pipeline import SPLITS, ExperimentConfig, decode_heldout, make_splits, score_outputs
from .s2a import ABLATIONS, Finetuner, ablate, load_model, pretrain_base, save_model, write_log
from .svt import load_svt, save_svt, train_svt

THRESHOLD_KEYS = ("min_pitch_accuracy", "max_f0_rmse", "max_spectral_distance", "max_leakage_gap")
EXIT_USAGE = 2
EXIT_THRESHOLD = 3


class UsageError(ValueError):
    pass


# config


def load_config(path) -> tuple[ExperimentConfig, dict]:
    """Parse a JSON run config; unknown keys anywhere are rejected."""
    if path is None:
        return ExperimentConfig(), {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be an object")
    thresholds = raw.pop("thresholds", {})
    bad = set(thresholds) - set(THRESHOLD_KEYS)
    if bad:
        raise UsageError(f"{path}: unknown threshold keys {sorted(bad)}")
    try:
        return ExperimentConfig.from_dict(raw), thresholds
    except (TypeError, ValueError) as e:
        raise UsageError(f"{path}: {e}") from None


def _dump(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    import hashlib

    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}")
    return path


def load_splits(run: Path) -> dict[str, list[TokenSample]]:
    out = {}
    for name in SPLITS:
        _, samples = read_corpus(_require(run / "corpus" / f"{name}.jsonl", f"{name} corpus"))
        out[name] = samples
    return out


# subcommands


def cmd_gen_corpus(cfg: ExperimentConfig, seed: int, run: Path, **_) -> dict:
    splits = make_splits(cfg, seed)
    manifest = {"seed": seed, "config": cfg.to_dict(), "splits": {}}
    for name, samples in splits.items():
        path = run / "corpus" / f"{name}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_corpus(samples, path, cfg.world, split=name, seed=seed)
        manifest["splits"][name] = {
            "path": path.name,
            "samples": len(samples),
            "singers": sorted({s.singer_id for s in samples}),
            "sha256": _sha256(path),
        }
    _dump(manifest, run / "corpus" / "manifest.json")
    return manifest


def cmd_pretrain_s2a(cfg: ExperimentConfig, seed: int, run: Path, steps=None, **_) -> dict:
    splits = load_splits(run)
    n = cfg.pretrain_steps if steps is None else steps
    log: list[dict] = []
    model = pretrain_base(splits["pretrain"], cfg.s2a_config, n, seed=seed, log=log)
    digest = save_model(model, run / "base", {"seed": seed, "steps": n})
    write_log(log, run / "base" / "train_log.csv", ("step", "L_mask"))
    return {"checkpoint": str(run / "base"), "sha256": digest, "steps": n}


def cmd_train_svt(cfg: ExperimentConfig, seed: int, run: Path, steps=None, **_) -> dict:
    splits = load_splits(run)
    epochs = cfg.svt_epochs if steps is None else steps
    out = run / "svt"
    out.mkdir(parents=True, exist_ok=True)
    ckpt = train_svt(splits["pretrain"], cfg.svt_config, cfg.finetune.weights, epochs=epochs, seed=seed,
                     heldout=splits["heldout"], log_path=out / "train_log.csv")
    digest = save_svt(ckpt, out)
    return {"checkpoint": str(out), "sha256": digest, "epochs": epochs, "final": ckpt.meta.get("final")}


def _arm_config(cfg: ExperimentConfig, ablation: str) -> ExperimentConfig:
    return replace(cfg, finetune=replace(cfg.finetune, weights=ablate(cfg.finetune.weights, ablation)))


def cmd_train_s2a(cfg: ExperimentConfig, seed: int, run: Path, ablation="full", steps=None, resume=False, **_) -> dict:
    arm_cfg = _arm_config(cfg, ablation)
    splits = load_splits(run)
    base = load_model(_require(run / "base", "base checkpoint"))
    svt = None
    if arm_cfg.finetune.weights.svt > 0:
        svt = load_svt(_require(run / "svt", "SVT checkpoint (or use an ablation without SVT)")).model
    out = run / "s2a" / ablation
    target = cfg.finetune_steps if steps is None else steps
    if resume:
        tuner = Finetuner.resume(_require(out, "checkpoint to resume"), base, splits["train"], svt)
    else:
        tuner = Finetuner(base, splits["train"], arm_cfg.finetune, svt, seed=seed)
    tuner.train(max(0, target - tuner.step))
    digest = tuner.save(out, {"ablation": ablation})
    return {"checkpoint": str(out), "sha256": digest, "step": tuner.step,
            "trainable_ratio": tuner.trainable_ratio}


def _grid_record(i: int, sample: TokenSample, out: np.ndarray, prompt, other, spec) -> dict:
    dec = oracle_decode(out, spec)
    return {
        "index": i,
        "L": int(out.shape[0]),
        "grid": out.tolist(),
        "prompt": np.asarray(prompt).tolist(),
        "other_prompt": np.asarray(other).tolist(),
        "oracle_pitch": dec.pitch.tolist(),
        "oracle_singer": dec.singer.tolist(),
        "reference_pitch": sample.regulated.tolist(),
    }


def cmd_decode(cfg: ExperimentConfig, seed: int, run: Path, ablation="full", split="heldout", **_) -> dict:
    ckpt = run / "s2a" / ablation / "model"
    model = load_model(_require(ckpt, "fine-tuned checkpoint"))
    _, samples = read_corpus(_require(run / "corpus" / f"{split}.jsonl", f"{split} corpus"))
    if samples:
        outputs, prompts, others = decode_heldout(model, cfg, samples, seed)
    else:
        outputs, prompts, others = [], [], []
    out = run / "decode" / ablation
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "outputs.jsonl", "w") as fh:
        for i, (s, o, p, q) in enumerate(zip(samples, outputs, prompts, others)):
            fh.write(json.dumps(_grid_record(i, s, o, p, q, cfg.world), separators=(",", ":")) + "\n")
    manifest = {
        "ablation": ablation,
        "split": split,
        "samples": len(outputs),
        "lengths": [int(o.shape[0]) for o in outputs],
        "checkpoint_sha256": read_manifest(ckpt)["sha256"],
        "decode": cfg.to_dict()["decode"],
        "seed": seed,
    }
    _dump(manifest, out / "manifest.json")
    return manifest


def read_decoded(path: Path):
    path = _require(path, "decode directory")
    manifest = json.loads(_require(path / "manifest.json", "decode manifest").read_text())
    outputs, prompts, others = [], [], []
    with open(path / "outputs.jsonl") as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                rec = json.loads(line)
                outputs.append(np.asarray(rec["grid"], dtype=np.int64))
                prompts.append(np.asarray(rec["prompt"], dtype=np.int64))
                others.append(np.asarray(rec["other_prompt"], dtype=np.int64))
            except (json.JSONDecodeError, KeyError) as e:
                raise CorpusFormatError(f"{path / 'outputs.jsonl'}:{lineno}: {e}") from None
    return manifest, outputs, prompts, others


def check_thresholds(row: dict, thresholds: dict) -> list[str]:
    """Human-readable list of violated thresholds."""
    bad = []
    checks = {
        "min_pitch_accuracy": ("pitch_accuracy", lambda v, t: v >= t),
        "max_f0_rmse": ("f0_rmse", lambda v, t: v <= t),
        "max_spectral_distance": ("spectral_distance", lambda v, t: v <= t),
        "max_leakage_gap": ("leakage_gap", lambda v, t: v <= t),
    }
    for key, limit in sorted(thresholds.items()):
        metric, ok = checks[key]
        value = row.get(metric)
        if value is None or not np.isfinite(value) or not ok(value, limit):
            bad.append(f"{metric}={value} violates {key}={limit}")
    return bad


def cmd_eval(cfg: ExperimentConfig, seed: int, run: Path, ablation="full", decoded=None, thresholds=None, **_) -> dict:
    src = Path(decoded) if decoded else run / "decode" / ablation
    manifest, outputs, prompts, others = read_decoded(src)
    _, samples = read_corpus(_require(run / "corpus" / f"{manifest['split']}.jsonl", "corpus"))
    if len(samples) != len(outputs):
        raise ValueError(f"{src}: {len(outputs)} outputs for {len(samples)} corpus samples")
    out = run / "eval" / ablation
    out.mkdir(parents=True, exist_ok=True)
    row = {"split": manifest["split"], "n": len(outputs)}
    if outputs:
        scores = score_outputs(outputs, samples, cfg.world)
        row.update(pitch_accuracy=scores.pitch_accuracy, f0_rmse=scores.f0_rmse,
                   spectral_distance=scores.spectral_distance)
        try:
            report = leakage_from_outputs(outputs, prompts, others, cfg.world, seed, cfg.leak_shuffles)
        except ValueError as e:
            # too few voiced frames for prosody statistics; reported as missing, not fatal
            row.update(leakage_gap=float("nan"), leakage_p=float("nan"))
            (out / "leakage.txt").write_text(f"no leakage report: {e}\n")
        else:
            row.update(leakage_gap=report.gap("pitch_mean"), leakage_p=report.p_values["pitch_mean"])
            (out / "leakage.csv").write_text(report.to_csv())
            (out / "leakage.txt").write_text(report.to_text())
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = list(row)
        w.writerow(keys)
        w.writerow([f"{row[k]:.8g}" if isinstance(row[k], float) else row[k] for k in keys])
    row["violations"] = check_thresholds(row, thresholds or {})
    return row


def cmd_ablate(cfg: ExperimentConfig, seed: int, run: Path, ablation=None, steps=None, thresholds=None, **_) -> dict:
    arms = list(ABLATIONS) if ablation in (None, "all") else ablation.split(",")
    for a in arms:
        if a not in ABLATIONS:
            raise UsageError(f"unknown ablation {a!r}; choose from {ABLATIONS}")
    if not (run / "corpus" / "manifest.json").exists():
        cmd_gen_corpus(cfg, seed, run)
    if not (run / "base" / "manifest.json").exists():
        cmd_pretrain_s2a(cfg, seed, run)
    needs_svt = any(ablate(cfg.finetune.weights, a).svt > 0 for a in arms)
    if needs_svt and not (run / "svt" / "manifest.json").exists():
        cmd_train_svt(cfg, seed, run)
    rows, violations = [], []
    for a in arms:
        trained = cmd_train_s2a(cfg, seed, run, ablation=a, steps=steps)
        cmd_decode(cfg, seed, run, ablation=a)
        res = cmd_eval(cfg, seed, run, ablation=a, thresholds=thresholds)
        violations += [f"{a}: {v}" for v in res.pop("violations")]
        rows.append({"ablation": a, **res, "trainable_ratio": trained["trainable_ratio"], "model_sha256": trained["sha256"]})
    keys = ["ablation", "pitch_accuracy", "f0_rmse", "spectral_distance", "leakage_gap", "leakage_p",
            "trainable_ratio", "n", "model_sha256"]
    with open(run / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([f"{r[k]:.8g}" if isinstance(r.get(k), float) else r.get(k) for k in keys])
    return {"arms": arms, "table": str(run / "ablation.csv"), "violations": violations}


COMMANDS = {
    "gen-corpus": (cmd_gen_corpus, "write pretrain/train/heldout corpora and a manifest"),
    "pretrain-s2a": (cmd_pretrain_s2a, "train the pitch-free base acoustic model"),
    "train-svt": (cmd_train_svt, "train the frame-level pitch transcriber"),
    "train-s2a": (cmd_train_s2a, "fine-tune the acoustic model for one ablation arm"),
    "decode": (cmd_decode, "decode a split with a fine-tuned model"),
    "eval": (cmd_eval, "score decoded outputs; exit 3 if a threshold is violated"),
    "ablate": (cmd_ablate, "run fine-tune, decode and eval for several arms"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="melctl", description="Pitch-controllable acoustic token toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="run directory")
        if name in ("train-s2a", "decode", "eval", "ablate"):
            p.add_argument("--ablation", default=None if name == "ablate" else "full",
                           help="arm name" + (" or comma list, default all" if name == "ablate" else ""))
        if name in ("pretrain-s2a", "train-svt", "train-s2a", "ablate"):
            p.add_argument("--steps", type=int, help="override step (or SVT epoch) count")
        if name == "train-s2a":
            p.add_argument("--resume", action="store_true", help="continue from the arm's checkpoint")
        if name == "decode":
            p.add_argument("--split", default="heldout", choices=SPLITS)
        if name == "eval":
            p.add_argument("--decoded", help="decode directory (default: run's decode/<arm>)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("MELCTL_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg, thresholds = load_config(args.config)
        run = Path(args.out)
        run.mkdir(parents=True, exist_ok=True)
        if args.command != "ablate" and getattr(args, "ablation", None) not in (None, *ABLATIONS):
            raise UsageError(f"unknown ablation {args.ablation!r}; choose from {ABLATIONS}")
        fn = COMMANDS[args.command][0]
        extra = {k: v for k, v in vars(args).items() if k not in ("command", "config", "seed", "out")}
        result = fn(cfg, args.seed, run, thresholds=thresholds, **extra)
    except (UsageError, ValueError, CheckpointError, CorpusFormatError, FileNotFoundError) as e:
        print(f"melctl {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    violations = result.pop("violations", []) if isinstance(result, dict) else []
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    for v in violations:
        print(f"threshold violated: {v}", file=sys.stderr)
    return EXIT_THRESHOLD if violations else 0


if __name__ == "__main__":
    sys.exit(main())
