"""Synthetic singing-token world with an exact decoding oracle.

The world replaces the pretrained semantic/acoustic codecs with invertible code
maps. Even codebooks carry content (semantic token x singer), odd codebooks
carry pitch (regulated pitch x singer). ``leak_strength`` makes a fraction of
the semantic vocabulary key codebook 0 on pitch as well, so timbre-side codes
carry melody the way real codec prompts do.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokens import REST, regulate

FORMAT_NAME = "melctl-corpus"
FORMAT_VERSION = 1
UNKNOWN = -1


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    v_sem: int = 64
    v_aco: int = 256
    n_codebooks: int = 2
    n_singers: int = 4
    pitch_low: int = 48
    pitch_high: int = 71
    seed: int = 0
    leak_strength: float = 0.0
    # generation knobs
    rest_prob: float = 0.1
    max_dur: int = 4
    register_spread: int = 4
    note_spread: int = 3
    code_noise: float = 0.0

    def __post_init__(self):
        for name in ("v_sem", "v_aco", "n_codebooks", "n_singers", "max_dur"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.pitch_low <= self.pitch_high <= 127:
            raise ValueError("pitch range must satisfy 0 <= low <= high <= 127")
        if not 0.0 <= self.leak_strength <= 1.0:
            raise ValueError("leak_strength must be in [0, 1]")
        if not 0.0 <= self.rest_prob < 1.0 or not 0.0 <= self.code_noise <= 1.0:
            raise ValueError("rest_prob must be in [0, 1) and code_noise in [0, 1]")
        need = self.codes_needed()
        if need > self.v_aco:
            raise ValueError(
                f"v_aco={self.v_aco} too small for injective code maps (needs {need})"
            )

    @property
    def n_pitch_classes(self) -> int:
        """Distinct pitch keys of the code map: the pitch range plus REST."""
        return self.pitch_high - self.pitch_low + 2

    @property
    def n_leaky(self) -> int:
        return int(round(self.leak_strength * self.v_sem))

    def codes_needed(self) -> int:
        content = self.n_singers * ((self.v_sem - self.n_leaky) + self.n_leaky * self.n_pitch_classes)
        pitch = self.n_singers * self.n_pitch_classes
        return max(content, pitch) if self.n_codebooks > 1 else content

    @property
    def mask_id(self) -> int:
        return self.v_aco

    @property
    def pad_id(self) -> int:
        return self.v_aco + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown WorldSpec keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class TokenSample:
    semantic: np.ndarray
    pitch: np.ndarray
    dur: np.ndarray
    regulated: np.ndarray
    acoustic: np.ndarray  # (L, N)
    singer_id: int
    group_id: int = 0

    def __post_init__(self):
        L = len(self.semantic)
        if len(self.regulated) != L or self.acoustic.shape[0] != L:
            raise ValueError(
                f"frame lengths disagree: semantic {L}, regulated {len(self.regulated)}, "
                f"acoustic {self.acoustic.shape[0]}"
            )
        if len(self.pitch) != len(self.dur):
            raise ValueError("pitch and dur lengths disagree")

    @property
    def L(self) -> int:
        return len(self.semantic)

    def equals(self, other: "TokenSample") -> bool:
        return (
            self.singer_id == other.singer_id
            and self.group_id == other.group_id
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("semantic", "pitch", "dur", "regulated", "acoustic")
            )
        )


@dataclass
class ContourPair:
    f0: np.ndarray
    energy: np.ndarray

    def __post_init__(self):
        if len(self.f0) != len(self.energy):
            raise ValueError("f0 and energy lengths disagree")


@dataclass
class Decoded:
    semantic: np.ndarray
    pitch: np.ndarray
    singer: np.ndarray

    @property
    def majority_singer(self) -> int:
        known = self.singer[self.singer != UNKNOWN]
        if known.size == 0:
            return UNKNOWN
        return int(np.bincount(known).argmax())


class World:
    """Code tables of one :class:`WorldSpec`; build through :func:`world_for`."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 7919])
        S, V, P = spec.n_singers, spec.v_sem, spec.n_pitch_classes
        leaky = np.zeros(V, dtype=bool)
        leaky[rng.permutation(V)[: spec.n_leaky]] = True
        self.leaky = leaky

        self.encode_tables: list[np.ndarray] = []
        # per codebook: decode arrays of shape (v_aco + 2,) -> singer / semantic / pitch class
        self.dec_singer: list[np.ndarray] = []
        self.dec_sem: list[np.ndarray] = []
        self.dec_pclass: list[np.ndarray] = []
        for k in range(spec.n_codebooks):
            perm = rng.permutation(spec.v_aco)
            n = spec.v_aco + 2
            ds, dm, dp = (np.full(n, UNKNOWN, dtype=np.int64) for _ in range(3))
            if k % 2 == 0:
                table = np.empty((S, V, P), dtype=np.int64)
                key = 0
                for s in range(S):
                    for v in range(V):
                        if leaky[v] and k == 0:
                            for pc in range(P):
                                code = perm[key]
                                table[s, v, pc] = code
                                ds[code], dm[code], dp[code] = s, v, pc
                                key += 1
                        else:
                            code = perm[key]
                            table[s, v, :] = code
                            ds[code], dm[code] = s, v
                            key += 1
            else:
                table = np.empty((S, P), dtype=np.int64)
                for s in range(S):
                    for pc in range(P):
                        code = perm[s * P + pc]
                        table[s, pc] = code
                        ds[code], dp[code] = s, pc
            self.encode_tables.append(table)
            self.dec_singer.append(ds)
            self.dec_sem.append(dm)
            self.dec_pclass.append(dp)

        frng = np.random.default_rng([spec.seed, 104729])
        self.feature_tables = [frng.standard_normal((spec.v_aco + 2, 8)) for _ in range(spec.n_codebooks)]
        prng = np.random.default_rng([spec.seed, 15485863])
        centers = np.linspace(spec.pitch_low, spec.pitch_high, S + 2)[1:-1]
        self.singer_center = np.rint(centers).astype(np.int64)
        self.singer_level = prng.uniform(0.5, 1.0, size=S)
        self.singer_mod_period = prng.uniform(6.0, 16.0, size=S)
        self.singer_hnr = prng.uniform(8.0, 24.0, size=S)

    # pitch <-> class index
    def pitch_class(self, regulated: np.ndarray) -> np.ndarray:
        spec = self.spec
        r = np.asarray(regulated, dtype=np.int64)
        pc = r - spec.pitch_low
        pc = np.where(r == REST, spec.n_pitch_classes - 1, pc)
        bad = (pc < 0) | (pc >= spec.n_pitch_classes)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"pitch token {r[i]} at frame {i} outside world range")
        return pc

    def class_pitch(self, pc: np.ndarray) -> np.ndarray:
        spec = self.spec
        pc = np.asarray(pc, dtype=np.int64)
        out = np.where(pc == spec.n_pitch_classes - 1, REST, pc + spec.pitch_low)
        return np.where(pc == UNKNOWN, UNKNOWN, out)

    def encode(self, semantic, regulated, singer: int) -> np.ndarray:
        sem = np.asarray(semantic, dtype=np.int64)
        pc = self.pitch_class(regulated)
        if not 0 <= singer < self.spec.n_singers:
            raise ValueError(f"singer {singer} outside 0..{self.spec.n_singers - 1}")
        if ((sem < 0) | (sem >= self.spec.v_sem)).any():
            raise ValueError("semantic token outside vocabulary")
        cols = []
        for k, table in enumerate(self.encode_tables):
            cols.append(table[singer, sem, pc] if k % 2 == 0 else table[singer, pc])
        return np.stack(cols, axis=1)

    def decode(self, acoustic) -> Decoded:
        a = np.asarray(acoustic, dtype=np.int64)
        if a.ndim != 2 or a.shape[1] != self.spec.n_codebooks:
            raise ValueError(f"grid must be (L, {self.spec.n_codebooks}), got {a.shape}")
        n = self.spec.v_aco + 2
        a = np.where((a < 0) | (a >= n), -1, a)
        valid = a >= 0
        idx = np.where(valid, a, 0)

        def look(tables, k):
            return np.where(valid[:, k], tables[k][idx[:, k]], UNKNOWN)

        sem = look(self.dec_sem, 0)
        content_singer = look(self.dec_singer, 0)
        if self.spec.n_codebooks > 1:
            pclass = look(self.dec_pclass, 1)
            pitch_singer = look(self.dec_singer, 1)
        else:
            pclass = look(self.dec_pclass, 0)
            pitch_singer = np.where(pclass != UNKNOWN, content_singer, UNKNOWN)
        singer = np.where(content_singer == UNKNOWN, pitch_singer, content_singer)
        clash = (content_singer != UNKNOWN) & (pitch_singer != UNKNOWN) & (content_singer != pitch_singer)
        singer = np.where(clash, UNKNOWN, singer)
        return Decoded(semantic=sem, pitch=self.class_pitch(pclass), singer=singer)

    def features(self, acoustic) -> np.ndarray:
        a = np.asarray(acoustic, dtype=np.int64)
        n = self.spec.v_aco + 2
        a = np.clip(a, 0, n - 1)
        return np.concatenate([self.feature_tables[k][a[:, k]] for k in range(a.shape[1])], axis=1)


@functools.lru_cache(maxsize=32)
def world_for(spec: WorldSpec) -> World:
    return World(spec)


def _draw_melody(world: World, S: int, rng: np.random.Generator, singer: int) -> np.ndarray:
    spec = world.spec
    center = world.singer_center[singer] + rng.integers(-spec.register_spread, spec.register_spread + 1)
    notes = center + rng.integers(-spec.note_spread, spec.note_spread + 1, size=S)
    notes = np.clip(notes, spec.pitch_low, spec.pitch_high)
    rest = rng.random(S) < spec.rest_prob
    return np.where(rest, REST, notes).astype(np.int64)


def _assemble(world: World, lyrics, pitch, dur, L, singer, group_id, rng) -> TokenSample:
    spec = world.spec
    semantic = regulate(lyrics, dur, L)
    regulated = regulate(pitch, dur, L)
    acoustic = world.encode(semantic, regulated, singer)
    if spec.code_noise > 0:
        hit = rng.random(L) < spec.code_noise
        acoustic[hit] = rng.integers(0, spec.v_aco, size=(int(hit.sum()), spec.n_codebooks))
    return TokenSample(semantic, np.asarray(pitch, dtype=np.int64), np.asarray(dur, dtype=np.int64),
                       regulated, acoustic, int(singer), int(group_id))


def _check_gen_args(spec: WorldSpec, S: int, L: int, singer: int):
    if not 0 <= singer < spec.n_singers:
        raise ValueError(f"singer {singer} outside 0..{spec.n_singers - 1}")
    if S < 1 or L < S:
        raise ValueError(f"need S >= 1 and L >= S, got S={S}, L={L}")


def gen_sample(spec: WorldSpec, S: int, L: int, singer: int, seed: int, group_id: int = 0) -> TokenSample:
    """Draw one aligned sample: S notes regulated onto L frames, rendered by ``singer``."""
    _check_gen_args(spec, S, L, singer)
    world = world_for(spec)
    rng = np.random.default_rng([spec.seed, singer, seed, 1])
    lyrics = rng.integers(0, spec.v_sem, size=S)
    dur = rng.integers(1, spec.max_dur + 1, size=S)
    pitch = _draw_melody(world, S, rng, singer)
    return _assemble(world, lyrics, pitch, dur, L, singer, group_id, rng)


def gen_group(spec: WorldSpec, S: int, L: int, singer: int, K: int, seed: int, group_id: int = 0) -> list[TokenSample]:
    """K samples sharing lyrics and durations (hence the semantic sequence), with distinct melodies."""
    _check_gen_args(spec, S, L, singer)
    world = world_for(spec)
    rng = np.random.default_rng([spec.seed, singer, seed, 2])
    lyrics = rng.integers(0, spec.v_sem, size=S)
    dur = rng.integers(1, spec.max_dur + 1, size=S)
    out: list[TokenSample] = []
    seen: set[tuple] = set()
    attempts = 0
    while len(out) < K:
        attempts += 1
        if attempts > 100 * K:
            raise ValueError("could not draw enough distinct melodies; widen the pitch range")
        pitch = _draw_melody(world, S, rng, singer)
        key = tuple(regulate(pitch, dur, L).tolist())
        if key in seen:
            continue
        seen.add(key)
        out.append(_assemble(world, lyrics, pitch, dur, L, singer, group_id, rng))
    return out


def oracle_decode(acoustic, spec: WorldSpec) -> Decoded:
    """Exact inverse of the world's code maps; out-of-world codes decode to UNKNOWN."""
    return world_for(spec).decode(acoustic)


def frame_features(acoustic, spec: WorldSpec) -> np.ndarray:
    """Fixed per-code feature vectors (a stand-in for cepstral frames)."""
    return world_for(spec).features(acoustic)


def contours_from_frames(pitch_frames, singer_frames, spec: WorldSpec) -> ContourPair:
    """F0 (Hz) and energy per frame from frame pitch tokens and frame singer ids."""
    world = world_for(spec)
    p = np.asarray(pitch_frames, dtype=np.int64)
    s = np.broadcast_to(np.asarray(singer_frames, dtype=np.int64), p.shape)
    voiced = (p >= 0) & (p <= 127)
    f0 = np.where(voiced, 440.0 * 2.0 ** ((p - 69) / 12.0), 0.0)
    known = voiced & (s >= 0)
    ss = np.where(known, s, 0)
    t = np.arange(p.size)
    level = world.singer_level[ss] * (1.0 + 0.03 * (p - 60))
    mod = 1.0 + 0.1 * np.sin(2 * np.pi * t / world.singer_mod_period[ss])
    energy = np.where(known, np.maximum(level * mod, 0.0), 0.0)
    return ContourPair(f0=f0, energy=energy)


def render_contours(sample: TokenSample, spec: WorldSpec) -> ContourPair:
    return contours_from_frames(sample.regulated, sample.singer_id, spec)


def singer_hnr_db(singer: int, spec: WorldSpec) -> float:
    """Per-singer breathiness used when rendering waveforms for reports."""
    return float(world_for(spec).singer_hnr[singer])


def render_waveform(
    contours: ContourPair,
    target_hnr_db: float | None,
    sample_rate: int = 16000,
    seed: int = 0,
    frame_rate: float = 50.0,
    n_harmonics: int = 8,
    return_parts: bool = False,
):
    """Harmonic source following the contours plus envelope-shaped white noise.

    Noise is scaled so that total harmonic power over total noise power equals
    ``target_hnr_db`` exactly. ``target_hnr_db=None`` renders without noise.
    With ``return_parts`` the harmonic and noise components are returned too.
    """
    if sample_rate < 8000:
        raise ValueError(f"sample_rate must be >= 8000, got {sample_rate}")
    if target_hnr_db is not None and not math.isfinite(target_hnr_db):
        raise ValueError(f"target_hnr_db must be finite, got {target_hnr_db}")
    f0 = np.asarray(contours.f0, dtype=np.float64)
    energy = np.asarray(contours.energy, dtype=np.float64)
    hop = sample_rate / frame_rate
    n = int(round(f0.size * hop))
    frame_of = np.minimum((np.arange(n) / hop).astype(np.int64), f0.size - 1)
    f0_s = f0[frame_of]
    centers = (np.arange(f0.size) + 0.5) * hop
    # unvoiced frames hold the nearest voiced energy so onsets are hard gates, not ramps
    on = (f0 > 0) & (energy > 0)
    if on.any() and f0.size > 1:
        amp = np.interp(np.arange(n), centers[on], energy[on])
    else:
        amp = np.full(n, energy[0] if f0.size else 0.0)
    voiced = (f0_s > 0) & (amp > 0)
    phase = 2 * np.pi * np.cumsum(f0_s / sample_rate)
    harmonic = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        ok = voiced & (k * f0_s < sample_rate / 2)
        harmonic += np.where(ok, np.sin(k * phase) / k, 0.0)
    harmonic *= amp
    noise = np.zeros(n)
    ph = float(np.sum(harmonic**2))
    if target_hnr_db is not None and ph > 0:
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal(n) * amp * voiced
        pn = float(np.sum(raw**2))
        noise = raw * math.sqrt(ph / (10 ** (target_hnr_db / 10.0)) / pn)
    wave = harmonic + noise
    if return_parts:
        return wave, harmonic, noise
    return wave


def write_waveform(path, wave, sample_rate: int):
    """Mono little-endian float32 blob plus a one-line JSON sidecar manifest."""
    path = Path(path)
    data = np.asarray(wave, dtype="<f4")
    path.write_bytes(data.tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"sample_rate": int(sample_rate), "length": int(data.size)}) + "\n")


def read_waveform(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != meta["length"]:
        raise CorpusFormatError(f"{path}: expected {meta['length']} samples, found {data.size}")
    return data.astype(np.float64), int(meta["sample_rate"])


# corpus files


def _record(s: TokenSample) -> dict:
    return {
        "semantic": s.semantic.tolist(),
        "pitch": s.pitch.tolist(),
        "dur": s.dur.tolist(),
        "regulated": s.regulated.tolist(),
        "acoustic": s.acoustic.reshape(-1).tolist(),
        "singer_id": int(s.singer_id),
        "group_id": int(s.group_id),
    }


def write_corpus(samples: Iterable[TokenSample], path, spec: WorldSpec, **extra) -> None:
    """Write a versioned JSON-lines corpus: one header line, one sample per line."""
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "spec": spec.to_dict()}
    header.update(extra)
    lines = [json.dumps(header, separators=(",", ":"))]
    lines += [json.dumps(_record(s), separators=(",", ":")) for s in samples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_FIELDS = ("semantic", "pitch", "dur", "regulated", "acoustic", "singer_id", "group_id")


def read_corpus(path) -> tuple[WorldSpec, list[TokenSample]]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusFormatError(f"{path}: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"{path}:1: malformed header ({e.msg})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise CorpusFormatError(f"{path}:1: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise CorpusFormatError(
            f"{path}:1: version mismatch: file has {header.get('version')}, reader expects {FORMAT_VERSION}"
        )
    spec = WorldSpec.from_dict(header["spec"])
    N = spec.n_codebooks
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            missing = [k for k in _FIELDS if k not in rec]
            if missing:
                raise CorpusFormatError(f"missing fields {missing}")
            aco = np.asarray(rec["acoustic"], dtype=np.int64)
            if aco.size % N:
                raise CorpusFormatError(f"acoustic length {aco.size} not a multiple of {N}")
            samples.append(
                TokenSample(
                    semantic=np.asarray(rec["semantic"], dtype=np.int64),
                    pitch=np.asarray(rec["pitch"], dtype=np.int64),
                    dur=np.asarray(rec["dur"], dtype=np.int64),
                    regulated=np.asarray(rec["regulated"], dtype=np.int64),
                    acoustic=aco.reshape(-1, N),
                    singer_id=int(rec["singer_id"]),
                    group_id=int(rec["group_id"]),
                )
            )
        except CorpusFormatError as e:
            raise CorpusFormatError(f"{path}:{lineno}: {e}") from None
        except (json.JSONDecodeError, ValueError, TypeError) as e:
            raise CorpusFormatError(f"{path}:{lineno}: malformed record ({e})") from None
    return spec, samples


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.loads(fh.readline())


def gen_corpus(
    spec: WorldSpec,
    singers: Sequence[int],
    n_groups_per_singer: int,
    group_size: int,
    S: int,
    L: int,
    seed: int,
    first_group_id: int = 0,
) -> list[TokenSample]:
    """Groups of same-lyrics, different-melody utterances for each listed singer."""
    out = []
    gid = first_group_id
    for s in singers:
        for g in range(n_groups_per_singer):
            out.extend(gen_group(spec, S, L, s, group_size, seed=seed * 1_000_003 + gid, group_id=gid))
            gid += 1
    return out
