import numpy as np
import pytest

from uatrack.geometry import BBox
from uatrack.metrics import (FrameMatching, accumulate, evaluate_sequence,
                             match_frame)


def _box(cx, cy=50.0, w=20.0, h=20.0):
    return BBox(cx, cy, w, h)


def test_match_frame_perfect():
    truth = [("a", _box(10)), ("b", _box(100))]
    hyps = [(0, _box(10)), (1, _box(100))]
    m = match_frame(hyps, truth)
    assert len(m.matches) == 2
    assert m.misses == 0 and m.false_positives == 0 and m.switches == 0


def test_match_frame_miss():
    m = match_frame([], [("a", _box(10))])
    assert m.misses == 1
    assert m.gt_count == 1


def test_match_frame_fp():
    m = match_frame([(0, _box(10))], [])
    assert m.false_positives == 1


def test_match_frame_gate():
    # IoU below 0.5 must not match: both a miss and a false positive
    m = match_frame([(0, _box(18))], [("a", _box(10))])
    assert m.misses == 1 and m.false_positives == 1


def test_match_persistence_beats_fresh_assignment():
    # carried pair keeps gt "a" with hyp 0 even though hyp 1 now overlaps more
    prev = match_frame([(0, _box(10))], [("a", _box(10))])
    m = match_frame([(0, _box(13)), (1, _box(10))], [("a", _box(10))], prev)
    pairs = {(g, h) for g, h, _ in m.matches}
    assert ("a", 0) in pairs
    assert m.switches == 0


def test_crossing_swap_counts_two_mismatches():
    # two objects cross; at the crossing frame the hypothesis labels swap
    truth_frames = [
        [("a", _box(10)), ("b", _box(100))],
        [("a", _box(10)), ("b", _box(100))],
    ]
    hyp_frames = [
        [(0, _box(10)), (1, _box(100))],
        [(1, _box(10)), (0, _box(100))],   # labels swapped
    ]
    prev = match_frame(hyp_frames[0], truth_frames[0])
    m = match_frame(hyp_frames[1], truth_frames[1], prev)
    assert m.switches == 2


def test_accumulate_perfect():
    truth = [[("a", _box(10))]] * 5
    hyps = [[(0, _box(10))]] * 5
    r = evaluate_sequence(hyps, truth)
    assert r.mota == 1.0
    assert r.motp == 0.0
    assert r.miss == r.fp == r.mismatch == 0.0


def test_accumulate_hand_arithmetic():
    # 10 single-object frames: 2 misses, 1 fp, 1 switch -> mota 0.6
    g = _box(10)
    truth = [[("a", g)]] * 10
    hyps = []
    for k in range(10):
        if k in (4, 9):
            hyps.append([])                      # misses
        elif k == 5:
            hyps.append([(1, g), (2, _box(500))])  # switch 0 -> 1 plus one fp
        elif k < 4:
            hyps.append([(0, g)])
        else:
            hyps.append([(1, g)])
    r = evaluate_sequence(hyps, truth)
    assert r.misses == 2 and r.false_positives == 1 and r.switches == 1
    assert r.mota == pytest.approx(0.6, abs=1e-12)
    assert r.mota == pytest.approx(1 - r.miss - r.fp - r.mismatch, abs=1e-12)


def test_accumulate_additivity():
    g = _box(10)
    frames_a = [match_frame([(0, g)], [("a", g)])]
    frames_b = [match_frame([], [("a", g)]), match_frame([(0, g)], [("a", g)])]
    ra = accumulate(frames_a)
    rb = accumulate(frames_b)
    rc = accumulate(frames_a + frames_b)
    assert rc.gt_total == ra.gt_total + rb.gt_total
    assert rc.misses == ra.misses + rb.misses
    assert rc.false_positives == ra.false_positives + rb.false_positives


def test_accumulate_no_gt_errors():
    with pytest.raises(ValueError):
        accumulate([match_frame([], [])])


def test_label_permutation_invariance():
    rng = np.random.default_rng(0)
    truth_frames = []
    hyp_frames = []
    for k in range(20):
        objs = [(f"g{i}", _box(60 * i + rng.uniform(-2, 2), 50)) for i in range(3)]
        truth_frames.append(objs)
        hyps = [(i, _box(60 * i + rng.uniform(-2, 2), 50)) for i in range(3)]
        if k % 7 == 0:
            hyps = hyps[:2]  # drop one -> occasional misses
        hyp_frames.append(hyps)
    r1 = evaluate_sequence(hyp_frames, truth_frames)
    perm = {0: 13, 1: 27, 2: 5}
    hyp_renamed = [[(perm[h], b) for h, b in frame] for frame in hyp_frames]
    r2 = evaluate_sequence(hyp_renamed, truth_frames)
    assert r1 == r2


def test_motp_bounded_by_gate():
    rng = np.random.default_rng(1)
    truth_frames = []
    hyp_frames = []
    for _ in range(30):
        truth_frames.append([("a", _box(50))])
        hyp_frames.append([(0, _box(50 + rng.uniform(-5, 5)))])
    r = evaluate_sequence(hyp_frames, truth_frames)
    assert 0.0 <= r.motp <= 0.5


def test_mota_identity_random_sequences():
    rng = np.random.default_rng(2)
    for trial in range(10):
        truth_frames = []
        hyp_frames = []
        for _ in range(15):
            truth_frames.append([(f"g{i}", _box(80 * i, 50)) for i in range(3)])
            hyps = []
            for i in range(3):
                if rng.random() < 0.75:
                    hyps.append((int(rng.integers(0, 5)), _box(80 * i + rng.uniform(-3, 3), 50)))
            if rng.random() < 0.3:
                hyps.append((99, _box(700, 50)))
            hyp_frames.append(hyps)
        r = evaluate_sequence(hyp_frames, truth_frames)
        assert r.mota == pytest.approx(1 - r.miss - r.fp - r.mismatch, abs=1e-12)
