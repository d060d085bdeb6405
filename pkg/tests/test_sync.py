import math
from fractions import Fraction

import numpy as np
import pytest

from m4pipe.errors import InvalidArgumentError, NoTriggerError
from m4pipe.sync import MarkerTrack, align_frames, detect_trigger


def planted_track(n_hold=100, swing=0.15, steps=10, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    ramp = swing * np.arange(steps + 1) / steps
    disp = np.concatenate([np.zeros(n_hold), ramp, np.full(50, swing)])
    pos = np.column_stack([disp, np.zeros_like(disp), np.full_like(disp, 1.7)])
    pos += rng.normal(0, noise, pos.shape)
    return MarkerTrack.from_positions(pos)


def test_planted_trigger_found():
    # ramp samples 0.09 and 0.105: the first above 0.10 is ramp index 7
    assert detect_trigger(planted_track()) == 107


def test_threshold_is_strict():
    pos = np.array([[0, 0, 0], [0.05, 0, 0], [0.10, 0, 0], [0.11, 0, 0]], float)
    assert detect_trigger(MarkerTrack.from_positions(pos), 0.10) == 3


def test_invalid_samples_skipped():
    tr = planted_track()
    valid = tr.valid.copy()
    valid[107] = False
    valid[0] = False
    tr = MarkerTrack(tr.times, tr.positions, valid)
    assert detect_trigger(tr) == 108


def test_no_trigger():
    with pytest.raises(NoTriggerError):
        detect_trigger(MarkerTrack.from_positions(np.zeros((20, 3))))
    with pytest.raises(InvalidArgumentError):
        detect_trigger(planted_track(), threshold=0.0)


def test_alignment_matches_rational_oracle(rng):
    for _ in range(200):
        start = int(rng.integers(0, 500))
        n = int(rng.integers(1, 60))
        idx, valid = align_frames(100, 12, start, n)
        for j in range(n):
            exact = start + Fraction(100, 12) * j
            assert idx[j] == math.floor(exact + Fraction(1, 2))
        assert valid.all()


def test_alignment_rounds_half_up():
    idx, _ = align_frames(3, 2, 0, 4)  # 0, 1.5, 3, 4.5
    assert list(idx) == [0, 2, 3, 5]


def test_alignment_marks_overrun():
    idx, valid = align_frames(100, 12, 90, 3, mocap_length=100)
    assert list(idx) == [90, 98, 107]
    assert list(valid) == [True, True, False]


def test_csv_round_trip(tmp_path):
    tr = planted_track(noise=1e-3)
    p = tmp_path / "track.csv"
    tr.to_csv(p)
    back = MarkerTrack.from_csv(p)
    assert back.rate == 100.0
    assert np.array_equal(back.positions, tr.positions)
    assert np.array_equal(back.times, tr.times)
    assert detect_trigger(back) == detect_trigger(tr)


def test_csv_missing_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("time_s,x,y\n0,0,0\n")
    with pytest.raises(InvalidArgumentError):
        MarkerTrack.from_csv(p)
