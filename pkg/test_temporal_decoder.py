#!/usr/bin/env python3
"""
Test Temporal Decoder
BPM/UESC decoding against a brute-force rule check on every short sequence
"""

from itertools import product

import pytest

from data.models.schemas import PhaseDetection, PhaseSequence
from data.processors.temporal_decoder import decode


def brute_force(text: str) -> PhaseDetection:
    n = len(text)
    bpm = next((i for i in range(n) if text[i:i + 4] == "PPPP"), None)
    uesc = next((j for j in reversed(range(n)) if j >= 3 and text[j - 3:j + 1] == "PPPP"), None)
    return PhaseDetection(bpm=bpm, uesc=uesc)


@pytest.mark.parametrize("text,expected", [
    ("NNNPPPPPNNN", (3, 7)),
    ("NPPPNNN", (None, None)),
    ("PPPPNNNPPPPP", (0, 11)),
    ("PPPP", (0, 3)),
    ("PPPNPPPP", (4, 7)),
    ("N", (None, None)),
])
def test_documented_examples(text, expected):
    detection = decode(PhaseSequence.from_string(text))
    assert (detection.bpm, detection.uesc) == expected


def test_all_sequences_up_to_length_12_match_rule():
    mismatches = 0
    for length in range(1, 13):
        for letters in product("NP", repeat=length):
            text = "".join(letters)
            got = decode(PhaseSequence.from_string(text))
            want = brute_force(text)
            if (got.bpm, got.uesc) != (want.bpm, want.uesc):
                mismatches += 1
    assert mismatches == 0


def test_events_present_together_and_ordered():
    for letters in product("NP", repeat=10):
        detection = decode(PhaseSequence.from_string("".join(letters)))
        assert (detection.bpm is None) == (detection.uesc is None)
        if detection.bpm is not None:
            assert detection.uesc - detection.bpm >= 3


def test_isolated_n_between_short_runs_is_not_bridged():
    detection = decode(PhaseSequence.from_string("PPNPP"))
    assert detection.bpm is None and detection.uesc is None


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        PhaseSequence.from_string("")
