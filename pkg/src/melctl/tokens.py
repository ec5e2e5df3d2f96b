"""Pitch vocabulary and the deterministic sequence transforms built on it."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

MIDI_MAX = 127
REST = 128
PAD = 129
N_PITCH_TOKENS = 130


def _as_int_array(seq, name: str) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def check_pitch(pitch) -> np.ndarray:
    """Validate a raw pitch sequence (MIDI 0-127 or REST) and return it as int64."""
    arr = _as_int_array(pitch, "pitch")
    if arr.size == 0:
        raise ValueError("pitch sequence is empty")
    bad = (arr < 0) | (arr > REST)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"pitch token {arr[i]} at position {i} is outside 0..127 or REST")
    return arr


def check_durations(dur, n: int | None = None) -> np.ndarray:
    arr = _as_int_array(dur, "dur")
    if arr.size == 0:
        raise ValueError("duration sequence is empty")
    if n is not None and arr.size != n:
        raise ValueError(f"pitch has {n} tokens but dur has {arr.size}")
    if (arr < 1).any():
        i = int(np.flatnonzero(arr < 1)[0])
        raise ValueError(f"duration at position {i} is {arr[i]}, must be >= 1")
    return arr


def frame_boundaries(dur: Sequence[int], L: int) -> tuple[np.ndarray, np.ndarray]:
    """Start/end frame of every token after rounding the cumulative normalized duration.

    Boundaries are round-half-up of ``c_i * L / D`` evaluated exactly in integers,
    so the spans always telescope to ``L``.
    """
    d = check_durations(dur)
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    D = int(d.sum())
    c = np.concatenate([[0], np.cumsum(d)])
    # Python ints: c*L can exceed int64 for adversarial inputs
    bounds = np.array([(2 * int(ci) * L + D) // (2 * D) for ci in c], dtype=np.int64)
    return bounds[:-1], bounds[1:]


def regulate(tokens: Sequence[int], dur: Sequence[int], L: int) -> np.ndarray:
    """Expand per-note tokens to ``L`` frames by duration (length regulation)."""
    tok = _as_int_array(tokens, "tokens")
    if tok.size == 0:
        raise ValueError("token sequence is empty")
    d = check_durations(dur, tok.size)
    start, end = frame_boundaries(d, L)
    return np.repeat(tok, end - start)


def regulate_pitch(pitch: Sequence[int], dur: Sequence[int], L: int) -> np.ndarray:
    """Frame-aligned pitch sequence of length ``L``.

    >>> regulate_pitch([60, 62], [1, 2], 5).tolist()
    [60, 60, 62, 62, 62]
    """
    p = check_pitch(pitch)
    return regulate(p, dur, L)


def allocate_frames(dur: Sequence[int], L: int) -> np.ndarray:
    """Floor allocation ``a_i = floor(m_i * L / D)`` used by the soft duration loss."""
    d = check_durations(dur)
    D = int(d.sum())
    return np.array([int(m) * L // D for m in d], dtype=np.int64)


def perturb_pitch(pitch: Sequence[int], fraction: float, offset_bound: int, seed: int) -> np.ndarray:
    """Shift a fraction of the non-REST pitch tokens by a random nonzero offset.

    Exactly ``ceil(fraction * n_voiced)`` positions change. Offsets are drawn
    uniformly from the nonzero integers in ``[-offset_bound, offset_bound]`` that
    keep the token inside 0..127, so every selected position really moves.
    """
    p = check_pitch(pitch)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    if offset_bound < 0:
        raise ValueError(f"offset_bound must be >= 0, got {offset_bound}")
    out = p.copy()
    voiced = np.flatnonzero(p != REST)
    k = math.ceil(fraction * voiced.size)
    if k == 0 or offset_bound == 0:
        return out
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(voiced, size=k, replace=False))
    offsets = np.concatenate([np.arange(-offset_bound, 0), np.arange(1, offset_bound + 1)])
    for i in chosen:
        ok = offsets[(p[i] + offsets >= 0) & (p[i] + offsets <= MIDI_MAX)]
        out[i] = p[i] + rng.choice(ok)
    return out


def pad_to(seq: Sequence[int], L: int, pad_id: int) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.int64).reshape(-1)
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    if arr.size > L:
        raise ValueError(f"sequence of length {arr.size} does not fit in {L}")
    out = np.full(L, pad_id, dtype=np.int64)
    out[: arr.size] = arr
    return out


def run_count(frames: Sequence[int]) -> int:
    """Number of maximal constant runs in a frame sequence."""
    f = np.asarray(frames)
    if f.size == 0:
        return 0
    return int(1 + np.count_nonzero(f[1:] != f[:-1]))
