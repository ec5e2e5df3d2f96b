"""
A tour of the synthetic codec world
===================================

Scores become frame sequences, frame sequences become acoustic codes, and
the codes decode back exactly. Everything downstream is measured against
that exact inverse.
"""

import numpy as np

from melctl.corpus import WorldSpec, gen_sample, oracle_decode, render_contours, render_waveform, singer_hnr_db
from melctl.eval import contour_stats, hnr_estimate, jitter, shimmer
from melctl.tokens import frame_boundaries, regulate_pitch

# A three-note score stretched over ten frames. Boundaries are rounded
# cumulative durations, so the spans always add up to the frame count.
pitch, dur = [60, 62, 64], [1, 2, 1]
start, end = frame_boundaries(dur, 10)
print("spans:", (end - start).tolist())
print("frames:", regulate_pitch(pitch, dur, 10).tolist())

# half of the lyric vocabulary also carries pitch in codebook 0
spec = WorldSpec(v_sem=16, v_aco=1024, n_singers=4, pitch_low=54, pitch_high=65, leak_strength=0.5)
sample = gen_sample(spec, S=6, L=24, singer=2, seed=7)
print("acoustic grid:", sample.acoustic.shape)

decoded = oracle_decode(sample.acoustic, spec)
print("pitch recovered exactly:", np.array_equal(decoded.pitch, sample.regulated))
print("singer:", decoded.majority_singer)

# Contours and a rendered waveform give the prosody statistics
contours = render_contours(sample, spec)
voiced = contours.f0[contours.f0 > 0]
print("f0 mean/std/skew/kurt:", np.round(contour_stats(voiced), 2))
print("jitter %:", round(jitter(contours.f0), 3), " shimmer %:", round(shimmer(contours.energy), 3))

target = singer_hnr_db(2, spec)
wave = render_waveform(contours, target, 8000, seed=0)
print(f"HNR target {target:.1f} dB, estimated {hnr_estimate(wave, contours.f0, 8000):.2f} dB")
