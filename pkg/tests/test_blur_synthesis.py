import numpy as np
import pytest

from evlines.blur_synthesis import (Sample, TrajectoryConfig, blur_magnitude, derive_seed, make_sample,
                                    rigid_homography, simulate_trajectory_frames)
from evlines.errors import ConfigError
from evlines.event_model import LineSegment
from evlines.scenes import random_scene


@pytest.fixture
def scene():
    image, lines = random_scene(np.random.default_rng(3), 64)
    return image, [LineSegment.from_array(a) for a in lines]


class TestTrajectory:
    def test_static(self, scene):
        image, _ = scene
        frames, ts, _ = simulate_trajectory_frames(image, TrajectoryConfig(max_translation=0, max_rotation=0))
        assert len(frames) == 40
        assert all(np.array_equal(f, image) for f in frames)

    def test_last_frame_exact_and_spacing(self, scene):
        image, _ = scene
        frames, ts, homs = simulate_trajectory_frames(image, TrajectoryConfig(rng_seed=5))
        assert np.array_equal(frames[-1], image)
        np.testing.assert_allclose(np.diff(ts), 0.03 / 39)
        assert len(ts) == 40 and np.array_equal(homs[-1], np.eye(3))
        assert not np.array_equal(frames[0], image)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrajectoryConfig(num_interp_frames=0)
        with pytest.raises(ConfigError):
            TrajectoryConfig(window=0)
        with pytest.raises(ConfigError):
            TrajectoryConfig(max_translation=-1)


class TestMakeSample:
    def test_static_sample(self, scene):
        image, lines = scene
        s = make_sample(image, lines, TrajectoryConfig(max_translation=0, max_rotation=0))
        assert len(s.events) == 0
        assert np.array_equal(s.blurred_image, s.clear_end_frame)
        assert s.meta["blur_magnitude"] == 0.0

    def test_deterministic(self, scene):
        image, lines = scene
        a = make_sample(image, lines, TrajectoryConfig(rng_seed=11))
        b = make_sample(image, lines, TrajectoryConfig(rng_seed=11))
        assert a.blurred_image.tobytes() == b.blurred_image.tobytes()
        assert a.events.t.tobytes() == b.events.t.tobytes()
        assert a.meta == b.meta

    def test_moving_scene_emits_events(self, scene):
        image, lines = scene
        s = make_sample(image, lines, TrajectoryConfig(max_translation=2.0, rng_seed=2))
        assert len(s.events) > 0
        assert 0.05 <= s.meta["contrast"] <= 0.5
        assert s.events.duration == pytest.approx(0.03)
        s.events.validate()

    def test_contrast_argument(self, scene):
        image, lines = scene
        assert make_sample(image, lines, TrajectoryConfig(), C=0.2).meta["contrast"] == 0.2
        with pytest.raises(ValueError):
            make_sample(image, lines, TrajectoryConfig(), C="other")


class TestBlurMagnitude:
    def _sample(self, homs, lines):
        img = np.zeros((8, 8, 3))
        return Sample(img, None, img, lines, {"homographies": [h.tolist() for h in homs]})

    def test_pure_translation(self):
        lines = [LineSegment([1, 1], [5, 2]), LineSegment([0, 7], [3, 3])]
        s = self._sample([rigid_homography(5, 0, 0, (4, 4)), np.eye(3)], lines)
        assert blur_magnitude(s) == pytest.approx(5.0)

    def test_oracle(self, scene):
        image, lines = scene
        s = make_sample(image, lines, TrajectoryConfig(rng_seed=9))
        h0 = np.array(s.meta["homographies"][0])
        disp = []
        for ln in lines:
            for p in (ln.p0, ln.p1):
                q = h0 @ np.array([p[0], p[1], 1.0])
                disp.append(np.hypot(q[0] / q[2] - p[0], q[1] / q[2] - p[1]))
        assert s.meta["blur_magnitude"] == pytest.approx(np.mean(disp), abs=1e-6)

    def test_no_annotations(self):
        with pytest.raises(ValueError):
            blur_magnitude(self._sample([np.eye(3)], []))


def test_event_count_grows_with_motion(scene):
    image, lines = scene
    small, large = [], []
    for seed in range(20):
        small.append(len(make_sample(image, lines, TrajectoryConfig(max_translation=2, rng_seed=seed), 0.2).events))
        large.append(len(make_sample(image, lines, TrajectoryConfig(max_translation=10, rng_seed=seed), 0.2).events))
    assert np.median(large) > np.median(small)


def test_derive_seed_stable():
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert derive_seed(0, "a") != derive_seed(0, "b")
    assert derive_seed(1, 5) != derive_seed(2, 5)
