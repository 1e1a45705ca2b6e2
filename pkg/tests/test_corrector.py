import random

import pytest

from stonefuse.corrector import (
    EXCLUDED,
    Excluded,
    Provenance,
    RoiPair,
    correct,
    correction_log_line,
    count_histogram,
)
from stonefuse.detector import priority_order
from stonefuse.imaging import BoxXYXY, mirror_box


def ranked(boxes):
    return [boxes[i] for i in priority_order(boxes)]


def test_no_detection_is_excluded():
    assert correct([], 512) is EXCLUDED
    assert isinstance(correct([], 512), Excluded)


def test_single_detection_is_mirrored():
    out = correct([BoxXYXY(100, 150, 200, 300, 0.8)], 512)
    assert isinstance(out, RoiPair)
    assert out.left.as_list() == [100, 150, 200, 300, 0.8]
    assert out.right.as_list() == [312, 150, 412, 300, 0.8]
    assert out.provenance is Provenance.MIRROR_SYNTHESIZED
    assert out.synthetic_side == "right"
    assert out.warnings == ()


def test_single_right_detection_synthesizes_left():
    out = correct([BoxXYXY(312, 150, 412, 300, 0.8)], 512)
    assert out.left.as_list()[:4] == [100, 150, 200, 300]
    assert out.synthetic_side == "left"


def test_two_detections_reordered_left_to_right():
    right, left = BoxXYXY(300, 0, 400, 100, 0.9), BoxXYXY(10, 0, 110, 100, 0.6)
    out = correct([right, left], 512)
    assert (out.left, out.right) == (left, right)
    assert out.provenance is Provenance.BOTH_DETECTED
    assert out.synthetic_side is None


def test_three_detections_keep_top_two():
    a = BoxXYXY(300, 0, 400, 100, 0.9)
    b = BoxXYXY(10, 0, 110, 100, 0.8)
    c = BoxXYXY(150, 200, 250, 300, 0.7)
    out = correct([a, b, c], 512)
    assert {out.left, out.right} == {a, b}
    assert out.provenance is Provenance.TRUNCATED_FROM_THREE


def test_midline_single_detection_warns_but_returns_pair(caplog):
    out = correct([BoxXYXY(200, 10, 312, 90, 0.5)], 512)
    assert isinstance(out, RoiPair)
    assert out.warnings and out.warnings[0].startswith("mirror_collision")
    assert "midline" in caplog.text


def test_log_line():
    assert correction_log_line("img7", 0, EXCLUDED) == "img7, 0, excluded, -"
    pair = correct([BoxXYXY(100, 150, 200, 300, 0.8)], 512)
    assert correction_log_line("img8", 1, pair) == "img8, 1, pair, mirror_synthesized"


def test_roipair_rejects_wrong_order():
    with pytest.raises(ValueError):
        RoiPair(BoxXYXY(50, 0, 60, 10), BoxXYXY(0, 0, 10, 10), Provenance.BOTH_DETECTED)


def random_box(rng, width):
    x1 = rng.uniform(0, width - 2)
    x2 = rng.uniform(x1 + 1, width)
    y1 = rng.uniform(0, 500)
    return BoxXYXY(x1, y1, x2, y1 + rng.uniform(1, 100), rng.choice([0.3, 0.5, 0.7, rng.random()]))


def test_correction_properties_random():
    rng = random.Random(3)
    for _ in range(10_000):
        width = rng.randint(16, 1024)
        dets = ranked([random_box(rng, width) for _ in range(rng.choice([0, 1, 2, 3, 3, 4, 7]))])
        out = correct(dets, width)
        if not dets:
            assert out is EXCLUDED
            continue
        assert isinstance(out, RoiPair) and len(out.boxes) == 2
        assert out.left.x1 <= out.right.x1
        if len(dets) == 1:
            synth = out.left if out.synthetic_side == "left" else out.right
            assert synth == mirror_box(dets[0], width)
            assert (synth.y1, synth.y2) == (dets[0].y1, dets[0].y2)
            assert mirror_box(synth, width) == dets[0]
        else:
            assert sorted(out.boxes, key=id) == sorted(dets[:2], key=id)


def test_permutation_of_equal_confidence_inputs():
    rng = random.Random(4)
    for _ in range(500):
        boxes = [BoxXYXY(x, x / 2, x + 20, x / 2 + 20, 0.5) for x in rng.sample(range(0, 400, 5), 4)]
        outs = set()
        for _ in range(5):
            rng.shuffle(boxes)
            out = correct(ranked(boxes), 512)
            outs.add((out.left, out.right))
        assert len(outs) == 1


# --- histogram --------------------------------------------------------------


def test_histogram_testset_counts():
    rows = (
        [(0, "stone")] * 14 + [(1, "stone")] * 50 + [(2, "stone")] * 99 + [(3, "stone")] * 2
        + [(0, "normal")] * 9 + [(1, "normal")] * 41 + [(2, "normal")] * 131
    )
    h = count_histogram(rows)
    assert h.totals() == {0: 23, 1: 91, 2: 230, 3: 2}
    assert h.by_label("stone") == {0: 14, 1: 50, 2: 99, 3: 2}
    assert h.by_label("normal") == {0: 9, 1: 41, 2: 131, 3: 0}
    assert h.n_images == 346
    assert h.folded == 0


def test_histogram_empty():
    h = count_histogram([])
    assert h.totals() == {0: 0, 1: 0, 2: 0, 3: 0}


def test_histogram_single():
    assert count_histogram([(2, "normal")]).totals() == {0: 0, 1: 0, 2: 1, 3: 0}


def test_histogram_folds_large_counts():
    h = count_histogram([(5, "stone"), (3, "stone")])
    assert h.totals()[3] == 2 and h.folded == 1
    assert h.to_dict()["folded_over_3"] == 1
