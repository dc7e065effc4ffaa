import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evlines.event_model import LineSegment
from evlines.metrics import (EvalReport, average_precision, blur_binned_msap, evaluate, greedy_match, heatmap_ap,
                             junction_ap, junction_map, junctions_from_lines, line_distance, matched_pixels, msap,
                             pairwise_line_distance, rasterize_lines, structural_ap)

from oracles import junction_ap_oracle, line_distance_oracle, sap_oracle


def random_instance(rng, max_gt=20, max_pred=40, size=128):
    n_gt = int(rng.integers(0, max_gt + 1))
    gt = rng.uniform(0, size, (n_gt, 4))
    n_pred = int(rng.integers(0, max_pred + 1))
    near = gt[rng.integers(0, max(n_gt, 1), n_pred)] if n_gt else rng.uniform(0, size, (n_pred, 4))
    pred = near + rng.normal(0, rng.uniform(0.5, 8), (n_pred, 4))
    # coarse score grid creates ties that exercise the stable ranking
    scores = rng.integers(0, 20, n_pred) / 20.0
    return np.concatenate([pred, scores[:, None]], axis=1), gt


class TestLineDistance:
    def test_examples(self):
        assert line_distance([0, 0, 10, 0], [0, 0, 10, 0]) == 0.0
        assert line_distance([0, 0, 10, 0], [10, 0, 0, 0]) == 0.0
        assert line_distance([0, 0, 10, 0], [0, 2, 10, 2]) == 2.0

    @given(st.lists(st.floats(-100, 100), min_size=8, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_symmetry_and_swap(self, v):
        a, b = v[:4], v[4:]
        d = line_distance(a, b)
        assert d == line_distance(b, a)
        assert d == line_distance([a[2], a[3], a[0], a[1]], b)
        assert d == pytest.approx(line_distance_oracle(a, b), abs=1e-9)

    def test_pairwise(self, rng):
        a, b = rng.uniform(0, 10, (5, 4)), rng.uniform(0, 10, (7, 4))
        d = pairwise_line_distance(a, b)
        for i in range(5):
            for j in range(7):
                assert d[i, j] == pytest.approx(line_distance(a[i], b[j]), abs=1e-12)


class TestStructuralAP:
    def test_oracle(self, rng):
        for _ in range(50):
            preds, gts = zip(*[random_instance(rng) for _ in range(3)])
            for thr in (5, 10, 15):
                assert structural_ap(list(preds), list(gts), thr, eval_size=None) == pytest.approx(
                    sap_oracle(preds, gts, thr), abs=1e-9)

    def test_scaled_oracle(self, rng):
        preds, gts = zip(*[random_instance(rng, size=64) for _ in range(4)])
        sizes = [(64, 48)] * 4
        assert structural_ap(list(preds), list(gts), 10, image_sizes=sizes) == pytest.approx(
            sap_oracle(preds, gts, 10, sizes), abs=1e-9)

    def test_perfect_and_empty(self):
        gt = np.array([[0, 0, 50, 0], [10, 10, 10, 90.0]])
        pred = np.concatenate([gt, np.ones((2, 1))], axis=1)
        assert structural_ap([pred], [gt], 5, eval_size=None) == 100.0
        assert structural_ap([np.zeros((0, 5))], [gt], 5, eval_size=None) == 0.0

    def test_duplicate_is_false_positive(self):
        gt = np.array([[0, 0, 50, 0.0]])
        pred = np.array([[0, 0, 50, 0, 0.9], [0, 0, 50, 0, 0.8]])
        ap, curve = structural_ap([pred], [gt], 5, eval_size=None, return_curve=True)
        assert ap == 100.0
        assert curve["precision"][-1] == 0.5

    def test_threshold_is_strict(self):
        gt = np.array([[0, 0, 10, 0.0]])
        pred = np.array([[0, 5, 10, 5, 1.0]])
        assert structural_ap([pred], [gt], 5, eval_size=None) == 0.0
        assert structural_ap([pred], [gt], 5.0001, eval_size=None) == 100.0

    def test_monotone_in_threshold(self, rng):
        for _ in range(30):
            preds, gts = zip(*[random_instance(rng) for _ in range(2)])
            s = [structural_ap(list(preds), list(gts), t, eval_size=None) for t in (5, 10, 15)]
            assert s[0] <= s[1] <= s[2]

    def test_ranking_invariant_to_monotone_score_map(self, rng):
        preds, gts = zip(*[random_instance(rng) for _ in range(3)])
        scaled = [np.concatenate([p[:, :4], (p[:, 4:] ** 2) * 0.5], axis=1) for p in preds]
        assert structural_ap(list(preds), list(gts), 10, eval_size=None) == pytest.approx(
            structural_ap(scaled, list(gts), 10, eval_size=None), abs=1e-12)

    def test_line_segment_inputs(self):
        gt = [LineSegment([0, 0], [20, 0])]
        pred = [LineSegment([0, 0.5], [20, 0.5], 0.7)]
        assert structural_ap([pred], [gt], 5, eval_size=None) == 100.0
        with pytest.raises(ValueError):
            structural_ap([[LineSegment([0, 0], [1, 1])]], [gt], 5)

    def test_msap_identity(self, rng):
        preds, gts = zip(*[random_instance(rng) for _ in range(3)])
        parts = [structural_ap(list(preds), list(gts), t) for t in (5, 10, 15)]
        assert msap(list(preds), list(gts)) == (parts[0] + parts[1] + parts[2]) / 3.0


class TestJunctionAP:
    def test_oracle(self, rng):
        for _ in range(30):
            preds, gts = [], []
            for _ in range(2):
                g = rng.uniform(0, 128, (int(rng.integers(0, 15)), 2))
                n = int(rng.integers(0, 30))
                base = g[rng.integers(0, len(g), n)] if len(g) else rng.uniform(0, 128, (n, 2))
                p = np.concatenate([base + rng.normal(0, 1.0, (n, 2)), rng.uniform(0, 1, (n, 1))], axis=1)
                preds.append(p)
                gts.append(g)
            for thr in (0.5, 1.0, 2.0):
                assert junction_ap(preds, gts, thr, eval_size=None) == pytest.approx(
                    junction_ap_oracle(preds, gts, thr), abs=1e-9)

    def test_map_is_mean(self, rng):
        g = [rng.uniform(0, 128, (6, 2))]
        p = [np.concatenate([g[0] + rng.normal(0, 0.8, (6, 2)), rng.uniform(0, 1, (6, 1))], axis=1)]
        parts = [junction_ap(p, g, t) for t in (0.5, 1.0, 2.0)]
        assert junction_map(p, g) == pytest.approx(sum(parts) / 3)

    def test_junctions_from_lines(self):
        j = junctions_from_lines(np.array([[0, 0, 1, 1], [1, 1, 2, 0.0]]))
        assert len(j) == 3


class TestHeatmap:
    def test_rasterize_and_match(self):
        m = rasterize_lines(np.array([[0, 0.5, 10, 0.5]]), 16)
        # the far endpoint x = 10 lies in pixel 10
        assert m[0, :11].all() and m.sum() == 11
        shifted = np.roll(m, 1, axis=0)
        assert matched_pixels(shifted, m) == 11
        assert matched_pixels(np.roll(m, 2, axis=0), m) == 0

    def test_bipartite_not_greedy(self):
        # pixel a can match gt 1 or 2, pixel b only gt 1: a maximum matching uses both
        pred = np.zeros((4, 4), bool)
        gt = np.zeros((4, 4), bool)
        pred[1, 1] = pred[1, 2] = True
        gt[1, 2] = gt[2, 1] = True
        assert matched_pixels(pred, gt) == 2

    def test_perfect(self):
        gt = [np.array([[5, 5, 100, 100], [20, 90, 110, 10.0]])]
        pred = [np.concatenate([gt[0], np.ones((2, 1))], axis=1)]
        aph, fh = heatmap_ap(pred, gt)
        assert aph == pytest.approx(100.0) and fh == pytest.approx(100.0)
        assert heatmap_ap([np.zeros((0, 5))], gt) == (0.0, 0.0)


class TestReport:
    def test_gt_as_prediction(self, tmp_path):
        gts = [np.array([[5, 5, 100, 100], [20, 90, 110, 10.0]]), np.array([[0, 0, 60, 0.5]])]
        preds = [np.concatenate([g, np.ones((len(g), 1))], axis=1) for g in gts]
        juncs = [np.concatenate([junctions_from_lines(g), np.ones((len(junctions_from_lines(g)), 1))], axis=1)
                 for g in gts]
        rep = evaluate(preds, gts, juncs, image_sizes=[(128, 128)] * 2)
        for v in rep.summary().values():
            assert v == pytest.approx(100.0)
        rep.to_json(tmp_path / "r.json")
        for path in rep.write_curves(tmp_path):
            rows = list(csv.reader(path.open()))
            assert rows[0] == ["threshold", "precision", "recall"]

    def test_empty_predictions(self):
        gts = [np.array([[5, 5, 100, 100.0]])]
        rep = evaluate([np.zeros((0, 5))], gts, [np.zeros((0, 3))])
        assert all(v == 0.0 for v in rep.summary().values())

    def test_blur_bins(self):
        gts = [np.array([[0, 0, 50, 0.0]])] * 3
        preds = [np.array([[0, 0, 50, 0, 1.0]]), np.zeros((0, 5)), np.array([[0, 0, 50, 0, 1.0]])]
        bins = blur_binned_msap(preds, gts, [3.0, 15.0, 75.0])
        assert [b["bin_lo"] for b in bins] == [0.0, 10.0, 50.0]
        assert [b["msAP"] for b in bins] == [100.0, 0.0, 100.0]


class TestHelpers:
    def test_greedy_match_strict(self):
        d = np.array([[1.0, 0.5], [0.4, 2.0]])
        np.testing.assert_array_equal(greedy_match(d, 1.0), [True, True])
        np.testing.assert_array_equal(greedy_match(np.array([[1.0]]), 1.0), [False])
        # the second row's only free column is too far once the first row consumed column 1
        np.testing.assert_array_equal(greedy_match(np.array([[0.2, 0.1], [5.0, 0.3]]), 1.0), [True, False])

    def test_average_precision(self):
        ap, p, r = average_precision(np.array([True, False, True]), 2)
        assert ap == pytest.approx(0.5 + 0.5 * 2 / 3)
