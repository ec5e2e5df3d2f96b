"""Objective metrics and the paired-versus-unpaired prompt leakage report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .corpus import (
    UNKNOWN,
    TokenSample,
    WorldSpec,
    contours_from_frames,
    frame_features,
    oracle_decode,
    render_waveform,
    singer_hnr_db,
)
from .tokens import PAD

HNR_CAP_DB = 40.0
STAT_NAMES = (
    "pitch_mean", "pitch_std", "pitch_skew", "pitch_kurt",
    "energy_mean", "energy_std", "energy_skew", "energy_kurt",
    "jitter", "shimmer", "hnr",
)


def pitch_frame_accuracy(pred, ref) -> float:
    """Fraction of non-PAD reference frames whose predicted token matches."""
    p = np.asarray(pred)
    r = np.asarray(ref)
    if p.shape != r.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {r.shape}")
    keep = r != PAD
    if not keep.any():
        raise ValueError("reference has no non-PAD frames")
    return float(np.mean(p[keep] == r[keep]))


def f0_rmse(pred, ref) -> float:
    """RMSE in Hz over frames voiced in both contours."""
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {r.shape}")
    both = (p > 0) & (r > 0)
    if not both.any():
        raise ValueError("no frame is voiced in both contours")
    return float(np.sqrt(np.mean((p[both] - r[both]) ** 2)))


def spectral_distance(pred, ref, spec: WorldSpec) -> float:
    """Mean per-frame Euclidean distance between oracle feature vectors."""
    a = np.asarray(pred)
    b = np.asarray(ref)
    if a.shape != b.shape:
        raise ValueError(f"grid shape mismatch: {a.shape} vs {b.shape}")
    fa = frame_features(a, spec)
    fb = frame_features(b, spec)
    return float(np.mean(np.linalg.norm(fa - fb, axis=-1)))


def contour_stats(x) -> tuple[float, float, float, float]:
    """Population (mean, std, skew, excess kurtosis); shape terms are 0 for constant input."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError(f"need a 1-D sequence of length >= 2, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("sequence contains non-finite values")
    mean = float(v.mean())
    d = v - mean
    m2 = float(np.mean(d**2))
    if m2 <= 1e-300 * max(1.0, mean * mean):
        return mean, 0.0, 0.0, 0.0
    m3 = float(np.mean(d**3))
    m4 = float(np.mean(d**4))
    return mean, math.sqrt(m2), m3 / m2**1.5, m4 / m2**2 - 3.0


def _perturbation(x, what: str) -> float:
    v = np.asarray(x, dtype=np.float64)
    pair = (v[1:] > 0) & (v[:-1] > 0)
    if not pair.any():
        raise ValueError(f"{what} needs at least 2 consecutive nonzero frames")
    diffs = np.abs(v[1:][pair] - v[:-1][pair])
    members = np.zeros(v.size, dtype=bool)
    members[1:] |= pair
    members[:-1] |= pair
    return float(diffs.mean() / v[members].mean() * 100.0)


def jitter(f0) -> float:
    """Mean absolute frame-to-frame f0 change over voiced pairs, as a percentage of mean f0."""
    return _perturbation(f0, "jitter")


def shimmer(energy) -> float:
    """Mean absolute frame-to-frame energy change over nonzero pairs, as a percentage of mean energy."""
    return _perturbation(energy, "shimmer")


def _constant_runs(f0_frames, n: int, sample_rate: float, frame_rate: float):
    f0 = np.asarray(f0_frames, dtype=np.float64)
    hop = sample_rate / frame_rate
    per_sample = f0[np.minimum((np.arange(n) / hop).astype(np.int64), f0.size - 1)]
    edges = np.flatnonzero(np.diff(per_sample) != 0) + 1
    starts = np.r_[0, edges]
    ends = np.r_[edges, n]
    return [(int(s), int(e), float(per_sample[s])) for s, e in zip(starts, ends) if per_sample[s] > 0]


def _run_correlation(seg: np.ndarray, period: float) -> float:
    """Peak overlap-normalized autocorrelation near ``period`` samples, at fractional lag."""
    n = seg.size
    size = 1 << int(math.ceil(math.log2(2 * n)))
    power = np.abs(np.fft.rfft(seg, size)) ** 2
    k = np.arange(power.size)
    weight = np.where((k == 0) | (k == size // 2), 1.0, 2.0) * power / size
    cum = np.r_[0.0, np.cumsum(seg * seg)]
    grid = np.arange(n + 1)

    def corr(lag: float) -> float:
        num = float(np.sum(weight * np.cos(2 * np.pi * k * lag / size)))
        left = np.interp(n - lag, grid, cum)
        right = cum[-1] - np.interp(lag, grid, cum)
        den = math.sqrt(max(left * right, 1e-300))
        return num / den

    lo = max(1, int(math.floor(0.9 * period)))
    hi = min(n - 1, int(math.ceil(1.1 * period)))
    lags = np.arange(lo, hi + 1)
    best = int(lags[int(np.argmax([corr(t) for t in lags]))])
    res = minimize_scalar(
        lambda t: -corr(t), bounds=(max(0.5, best - 1.0), min(n - 1.0, best + 1.0)),
        method="bounded", options={"xatol": 1e-4},
    )
    return max(-float(res.fun), corr(best))


def hnr_estimate(waveform, f0_hint, sample_rate: int, frame_rate: float = 50.0) -> float:
    """Autocorrelation HNR in dB, pooled over constant-f0 voiced runs.

    ``f0_hint`` is a scalar f0 in Hz or a per-frame contour at ``frame_rate``
    (0 marks unvoiced frames). Runs shorter than three periods are skipped.
    Result is capped at 40 dB; non-positive correlation maps to -40 dB.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise ValueError("waveform must be a finite 1-D sequence")
    if np.ndim(f0_hint) == 0:
        if not f0_hint > 0:
            raise ValueError(f"f0 hint must be positive, got {f0_hint}")
        runs = [(0, x.size, float(f0_hint))]
    else:
        runs = _constant_runs(f0_hint, x.size, sample_rate, frame_rate)
    num = den = 0.0
    for start, end, f0 in runs:
        seg = x[start:end]
        period = sample_rate / f0
        if seg.size < 3 * period:
            continue
        energy = float(seg @ seg)
        if energy <= 0:
            continue
        num += _run_correlation(seg, period) * energy
        den += energy
    if den <= 0:
        raise ValueError("no voiced run spans three periods with nonzero energy")
    r = num / den
    if r <= 0:
        return -HNR_CAP_DB
    if r >= 1:
        return HNR_CAP_DB
    return float(np.clip(10 * math.log10(r / (1 - r)), -HNR_CAP_DB, HNR_CAP_DB))


# leakage report


@dataclass
class Profile:
    """Prosody statistics of one acoustic grid."""

    values: dict

    @classmethod
    def of(cls, grid, spec: WorldSpec, sample_rate: int = 8000, seed: int = 0) -> "Profile":
        dec = oracle_decode(grid, spec)
        c = contours_from_frames(dec.pitch, dec.singer, spec)
        voiced_f0 = c.f0[c.f0 > 0]
        voiced_en = c.energy[c.energy > 0]
        vals = dict(zip(STAT_NAMES[:4], contour_stats(voiced_f0)))
        vals.update(zip(STAT_NAMES[4:8], contour_stats(voiced_en)))
        vals["jitter"] = jitter(c.f0)
        vals["shimmer"] = shimmer(c.energy)
        singer = dec.majority_singer
        wave = render_waveform(c, singer_hnr_db(singer, spec), sample_rate, seed=seed)
        vals["hnr"] = hnr_estimate(wave, c.f0, sample_rate)
        return cls(vals)


def profile_ok(grid, spec: WorldSpec) -> bool:
    """True if ``grid`` decodes to enough voiced frames for every statistic."""
    dec = oracle_decode(grid, spec)
    c = contours_from_frames(dec.pitch, dec.singer, spec)
    voiced = (c.f0 > 0) & (c.energy > 0)
    return bool(np.any(voiced[1:] & voiced[:-1])) and dec.majority_singer != UNKNOWN


def sign_flip_pvalue(diffs, n_shuffles: int = 10_000, seed: int = 0) -> float:
    """Two-sided permutation p-value for mean(diffs) == 0 by random sign flips."""
    d = np.asarray(diffs, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no differences to test")
    rng = np.random.default_rng(seed)
    observed = abs(d.mean())
    signs = rng.choice(np.array([-1.0, 1.0]), size=(n_shuffles, d.size))
    null = np.abs((signs * d).mean(axis=1))
    return float((1 + np.sum(null >= observed - 1e-12)) / (n_shuffles + 1))


@dataclass
class LeakageReport:
    """Mean absolute statistic differences of outputs against their own prompt
    (paired) and against another prompt of the same singer (unpaired)."""

    paired: dict
    unpaired: dict
    p_values: dict
    n: int
    per_item: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        for row in (self.paired, self.unpaired):
            for k, v in row.items():
                if not math.isfinite(v) or v < 0:
                    raise ValueError(f"report entry {k}={v} must be finite and non-negative")

    def gap(self, name: str = "pitch_mean") -> float:
        """Unpaired minus paired difference; larger means more prompt leakage."""
        return self.unpaired[name] - self.paired[name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", *STAT_NAMES, "n"])
        w.writerow(["paired", *(f"{self.paired[k]:.6g}" for k in STAT_NAMES), self.n])
        w.writerow(["unpaired", *(f"{self.unpaired[k]:.6g}" for k in STAT_NAMES), self.n])
        w.writerow(["p_value", *(f"{self.p_values[k]:.6g}" for k in STAT_NAMES), self.n])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'':10s}|{'Pitch':^36s}|{'Energy':^36s}|{'Jitter':>8s}|{'Shimmer':>8s}|{'HNR':>8s}"
        sub = f"{'':10s}|" + ("".join(f"{h:>9s}" for h in ("Mean", "Std", "Skew", "Kurt")) + "|") * 2
        lines = [head, sub + " " * 26, "-" * len(head)]
        for name, row in (("Paired", self.paired), ("Unpaired", self.unpaired), ("p-value", self.p_values)):
            cells = "".join(f"{row[k]:9.3f}" for k in STAT_NAMES[:4]) + "|"
            cells += "".join(f"{row[k]:9.3f}" for k in STAT_NAMES[4:8]) + "|"
            cells += "|".join(f"{row[k]:8.3f}" for k in STAT_NAMES[8:])
            lines.append(f"{name:10s}|{cells}")
        lines.append(f"n = {self.n}")
        return "\n".join(lines) + "\n"


Synthesizer = Callable[[Sequence[TokenSample], Sequence[np.ndarray]], Sequence[np.ndarray]]


def draw_prompt_pair(target: TokenSample, pool: Sequence[TokenSample], spec: WorldSpec, rng, tries: int = 50):
    """Two prompt segments from distinct utterances of the target's singer outside the target's group."""
    from .s2a import prompt_length_range

    cands = [u for u in pool if u.singer_id == target.singer_id and u.group_id != target.group_id]
    if len(cands) < 2:
        raise ValueError(f"singer {target.singer_id} has fewer than 2 utterances outside group {target.group_id}")
    lo, hi = prompt_length_range(target.L)
    for _ in range(tries):
        i, j = rng.choice(len(cands), size=2, replace=False)
        out = []
        for u in (cands[i], cands[j]):
            n = int(rng.integers(lo, hi))
            n = min(n, u.L)
            s = int(rng.integers(0, u.L - n + 1))
            out.append(u.acoustic[s : s + n])
        if all(profile_ok(p, spec) for p in out):
            return out[0], out[1]
    raise ValueError(f"no usable prompt pair found for singer {target.singer_id}")


def leakage_prompts(targets: Sequence[TokenSample], pool: Sequence[TokenSample], spec: WorldSpec, seed: int = 0):
    """Per target, the prompt used for synthesis and an unused prompt of the same singer."""
    rng = np.random.default_rng(seed)
    prompts, others = [], []
    for t in targets:
        a, b = draw_prompt_pair(t, pool, spec, rng)
        prompts.append(a)
        others.append(b)
    return prompts, others


def leakage_from_outputs(
    outputs: Sequence[np.ndarray],
    prompts: Sequence[np.ndarray],
    others: Sequence[np.ndarray],
    spec: WorldSpec,
    seed: int = 0,
    n_shuffles: int = 10_000,
    sample_rate: int = 8000,
) -> LeakageReport:
    """Score synthesized grids against their own prompt and the unused one.

    Outputs without enough voiced frames are skipped.
    """
    if not (len(outputs) == len(prompts) == len(others)):
        raise ValueError("outputs, prompts and others must have equal counts")
    paired_rows, unpaired_rows = [], []
    for k, (out, a, b) in enumerate(zip(outputs, prompts, others)):
        if not profile_ok(out, spec):
            continue
        po = Profile.of(out, spec, sample_rate, seed=k).values
        pa = Profile.of(a, spec, sample_rate, seed=k).values
        pb = Profile.of(b, spec, sample_rate, seed=k).values
        paired_rows.append([abs(po[s] - pa[s]) for s in STAT_NAMES])
        unpaired_rows.append([abs(po[s] - pb[s]) for s in STAT_NAMES])
    if not paired_rows:
        raise ValueError("no synthesized output had enough voiced frames")
    P = np.asarray(paired_rows)
    U = np.asarray(unpaired_rows)
    pvals = {s: sign_flip_pvalue(U[:, i] - P[:, i], n_shuffles, seed) for i, s in enumerate(STAT_NAMES)}
    return LeakageReport(
        paired=dict(zip(STAT_NAMES, map(float, P.mean(axis=0)))),
        unpaired=dict(zip(STAT_NAMES, map(float, U.mean(axis=0)))),
        p_values=pvals,
        n=len(paired_rows),
        per_item=[dict(zip(STAT_NAMES, map(float, U[i] - P[i]))) for i in range(len(P))],
    )


def leakage_report(
    synthesize: Synthesizer,
    targets: Sequence[TokenSample],
    pool: Sequence[TokenSample],
    spec: WorldSpec,
    seed: int = 0,
    n_shuffles: int = 10_000,
    sample_rate: int = 8000,
) -> LeakageReport:
    """Compare each output's prosody with its own prompt and with an unused prompt.

    ``synthesize(targets, prompts)`` returns one grid per target. Pairing is
    fully determined by ``seed``.
    """
    prompts, others = leakage_prompts(targets, pool, spec, seed)
    outputs = synthesize(list(targets), prompts)
    return leakage_from_outputs(outputs, prompts, others, spec, seed, n_shuffles, sample_rate)
