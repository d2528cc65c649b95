"""
BPM / UESC decoding from a per-frame P/N sequence.

BPM is the first P frame followed by at least 3 more P frames; UESC is the last
P frame preceded by at least 3 P frames. Both rules run over the whole clip
independently, so the two events may come from different P runs.
"""

import numpy as np

from data.models.schemas import PhaseDetection, PhaseSequence

RUN_LENGTH = 4


def _full_windows(is_p: np.ndarray) -> np.ndarray:
    """Start indices i where is_p[i:i + RUN_LENGTH] is all P"""
    if len(is_p) < RUN_LENGTH:
        return np.empty(0, dtype=int)
    counts = np.convolve(is_p.astype(int), np.ones(RUN_LENGTH, dtype=int), mode="valid")
    return np.flatnonzero(counts == RUN_LENGTH)


def decode(sequence: PhaseSequence) -> PhaseDetection:
    starts = _full_windows(sequence.is_p())
    if len(starts) == 0:
        return PhaseDetection()
    return PhaseDetection(bpm=int(starts[0]), uesc=int(starts[-1]) + RUN_LENGTH - 1)
