import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evlines.errors import ShapeError, ValidationError
from evlines.event_model import (BlurredLineParams, Event, EventWindow, LineSegment, average_blur,
                                 blurred_line_membership, generate_events, read_events, to_log_luminance,
                                 write_events)


def _oracle_counts(frames, C):
    """Per-pixel loop over transitions with an explicit reference level."""
    h, w = frames[0].shape
    counts = np.zeros((h, w), int)
    for y in range(h):
        for x in range(w):
            ref = frames[0][y, x]
            for k in range(1, len(frames)):
                d = frames[k][y, x] - ref
                n = int(np.floor(abs(d) / C))
                counts[y, x] += n
                ref += n * C * np.sign(d)
    return counts


class TestGenerateEvents:
    def test_single_pixel_ramp(self):
        """0 -> 0.35 over 10 ms with C = 0.1 crosses at 0.1, 0.2, 0.3."""
        f0 = np.zeros((1, 1))
        f1 = np.full((1, 1), 0.35)
        win = generate_events([f0, f1], [0.0, 0.010], 0.1)
        assert len(win) == 3
        np.testing.assert_allclose(win.t * 1e3, [10 / 3.5, 20 / 3.5, 30 / 3.5], atol=1e-9)
        assert np.all(win.p == 1)

    def test_constant_frames_emit_nothing(self):
        f = np.full((4, 5), -1.2)
        win = generate_events([f, f, f], [0, 1, 2], 0.2)
        assert len(win) == 0
        assert (win.width, win.height) == (5, 4)

    def test_count_matches_oracle(self, rng):
        frames = [rng.normal(0, 0.5, (6, 7)) for _ in range(4)]
        win = generate_events(frames, [0.0, 0.01, 0.02, 0.03], 0.15)
        counts = np.zeros((6, 7), int)
        np.add.at(counts, (win.y, win.x), 1)
        np.testing.assert_array_equal(counts, _oracle_counts(frames, 0.15))

    def test_output_sorted_and_valid(self, rng):
        frames = [rng.normal(0, 1, (8, 8)) for _ in range(5)]
        win = generate_events(frames, np.linspace(1.0, 1.03, 5), 0.1)
        win.validate()
        assert np.all(np.diff(win.t) >= 0)
        assert win.t_start == 1.0 and abs(win.duration - 0.03) < 1e-12

    def test_large_threshold_gives_no_events(self, rng):
        frames = [rng.uniform(-1, 1, (5, 5)) for _ in range(3)]
        assert len(generate_events(frames, [0, 1, 2], 10.0)) == 0

    def test_doubling_threshold_never_increases_count(self, rng):
        for _ in range(10):
            frames = [rng.normal(0, 0.6, (5, 5)) for _ in range(4)]
            c = rng.uniform(0.05, 0.5)
            assert len(generate_events(frames, [0, 1, 2, 3], 2 * c)) <= len(generate_events(frames, [0, 1, 2, 3], c))

    def test_sign_flip_flips_polarity(self, rng):
        # dyadic values keep the crossings exact so the comparison is bitwise
        frames = [np.round(rng.normal(0, 0.6, (5, 5)) * 64) / 64 for _ in range(3)]
        a = generate_events(frames, [0, 1, 2], 0.125)
        b = generate_events([-f for f in frames], [0, 1, 2], 0.125)
        assert len(a) == len(b)
        np.testing.assert_array_equal(a.t, b.t)
        np.testing.assert_array_equal(a.p, -b.p)

    def test_errors(self):
        f = np.zeros((2, 2))
        with pytest.raises(ValueError):
            generate_events([f, f], [0, 1], 0.0)
        with pytest.raises(ShapeError):
            generate_events([f, np.zeros((3, 2))], [0, 1], 0.1)
        with pytest.raises(ValueError):
            generate_events([f, f], [1, 1], 0.1)
        with pytest.raises(ValueError):
            generate_events([f], [0], 0.1)


class TestAverageBlur:
    def test_identity(self, rng):
        f = rng.uniform(0, 1, (4, 4, 3)).astype(np.float32)
        np.testing.assert_array_equal(average_blur([f] * 40), f)

    def test_black_white(self):
        out = average_blur([np.zeros((2, 2, 3)), np.ones((2, 2, 3))])
        np.testing.assert_array_equal(out, 0.5)

    def test_matches_oracle(self, rng):
        frames = [rng.uniform(0, 1, (5, 6, 3)) for _ in range(41)]
        oracle = np.zeros((5, 6, 3))
        for f in frames:
            oracle += f
        np.testing.assert_allclose(average_blur(frames), oracle / 41, atol=1e-7)

    def test_permutation_invariant(self, rng):
        frames = [rng.uniform(0, 1, (3, 3, 3)) for _ in range(7)]
        np.testing.assert_allclose(average_blur(frames), average_blur(frames[::-1]), atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            average_blur([])


class TestBlurredLine:
    def test_examples(self):
        assert blurred_line_membership(BlurredLineParams(1, 1, 0, 2), (3, 3))
        assert not blurred_line_membership(BlurredLineParams(1, 0, 0, 1), (-1, 5))

    def test_grid_oracle(self):
        p = BlurredLineParams(3, -2, 1, 4)
        for x in range(20):
            for y in range(20):
                assert blurred_line_membership(p, (x, y)) == (1 <= 3 * x + 2 * y < 5)

    def test_thickness_and_validation(self):
        assert BlurredLineParams(2, -4, 0, 6).thickness == 1.5
        with pytest.raises(ValueError):
            BlurredLineParams(0, 0, 0, 1)
        with pytest.raises(ValueError):
            BlurredLineParams(1, 1, 0, 0)

    @given(st.integers(-5, 5), st.integers(-5, 5), st.integers(-10, 10), st.integers(1, 6))
    @settings(max_examples=50, deadline=None)
    def test_wider_line_is_superset(self, a, b, c, v):
        if a == 0 and b == 0:
            return
        thin, thick = BlurredLineParams(a, b, c, v), BlurredLineParams(a, b, c, v + 1)
        for x in range(-5, 6):
            for y in range(-5, 6):
                if blurred_line_membership(thin, (x, y)):
                    assert blurred_line_membership(thick, (x, y))


class TestTypes:
    def test_event_window_validation(self):
        ok = EventWindow.from_events([Event(1, 1, 0.02, -1), Event(0, 0, 0.01, 1)], 3, 3, 0.0, 0.03)
        ok.validate()
        assert ok.t[0] == 0.01
        bad = EventWindow([5], [0], [0.0], [1], 0.0, 1.0, 3, 3)
        with pytest.raises(ValidationError):
            bad.validate()
        bad = EventWindow([0], [0], [0.0], [0], 0.0, 1.0, 3, 3)
        with pytest.raises(ValidationError):
            bad.validate()
        bad = EventWindow([0, 0], [0, 0], [0.5, 0.2], [1, 1], 0.0, 1.0, 3, 3)
        with pytest.raises(ValidationError):
            bad.validate()

    def test_line_segment_validation(self):
        LineSegment([0, 0], [10.4, 5]).validate(10, 10)
        with pytest.raises(ValidationError):
            LineSegment([0, 0], [11, 5]).validate(10, 10)
        with pytest.raises(ValidationError):
            LineSegment([2, 2], [2, 2]).validate(10, 10)

    def test_log_luminance(self):
        img = np.full((2, 2, 3), 0.5)
        np.testing.assert_allclose(to_log_luminance(img), np.log(0.5 + 1e-3))


class TestEventFile:
    def test_round_trip(self, tmp_path, rng):
        frames = [rng.normal(0, 1, (6, 6)) for _ in range(3)]
        win = generate_events(frames, [0.5, 0.51, 0.52], 0.2)
        write_events(tmp_path / "e.evt", win)
        back = read_events(tmp_path / "e.evt")
        for k in ("x", "y", "t", "p"):
            np.testing.assert_array_equal(getattr(back, k), getattr(win, k))
        assert (back.width, back.height, back.t_start, back.duration) == (6, 6, 0.5, win.duration)

    def test_truncated_file_names_path(self, tmp_path, rng):
        frames = [rng.normal(0, 1, (6, 6)) for _ in range(3)]
        path = tmp_path / "e.evt"
        write_events(path, generate_events(frames, [0, 1, 2], 0.2))
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValidationError, match="e.evt"):
            read_events(path)
