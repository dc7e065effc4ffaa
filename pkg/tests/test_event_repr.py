import numpy as np
import pytest

from evlines.errors import ValidationError
from evlines.event_model import EventWindow
from evlines.event_repr import (GridKind, encode, encode_ec_sae, encode_est, encode_voxel, grid_channels,
                                read_grid, resize_grid, write_grid)

from oracles import est_oracle


def random_window(rng, n=500, w=12, h=9, t_start=0.3, T=0.03, pol=None):
    t = np.sort(rng.uniform(t_start, t_start + T, n))
    p = rng.choice([-1, 1], n) if pol is None else np.full(n, pol)
    return EventWindow(rng.integers(0, w, n), rng.integers(0, h, n), t, p, t_start, T, w, h)


class TestEST:
    def test_single_event_at_origin(self):
        win = EventWindow([2], [1], [0.0], [1], 0.0, 1.0, 4, 3)
        g = encode_est(win, 5).data
        assert g.shape == (3, 4, 10)
        assert g[1, 2, 0] == 1.0 and g.sum() == 1.0

    def test_half_bin_split(self):
        # the first event fixes t0; the second sits at t* = 1.5 with B = 5, T = 1
        win = EventWindow([0, 1], [0, 0], [0.0, 0.375], [-1, 1], 0.0, 1.0, 2, 1)
        g = encode_est(win, 5).data
        np.testing.assert_allclose(g[0, 1, :5], [0, 0.5, 0.5, 0, 0])

    def test_oracle(self, rng):
        win = random_window(rng, 800)
        for B in (1, 3, 5):
            np.testing.assert_allclose(encode_est(win, B).data, est_oracle(win, B), atol=1e-9)

    def test_mass_conservation(self, rng):
        win = random_window(rng, 300)
        g = encode_est(win, 5).data
        assert g[..., :5].sum() == pytest.approx((win.p == 1).sum(), abs=1e-6)
        assert g[..., 5:].sum() == pytest.approx((win.p == -1).sum(), abs=1e-6)

    def test_b1_equals_polar_counts(self, rng):
        win = random_window(rng, 300)
        est = encode_est(win, 1).data
        ec = encode_ec_sae(win).data
        np.testing.assert_allclose(est, ec[..., :2])

    def test_order_invariance(self, rng):
        win = random_window(rng, 200)
        perm = rng.permutation(len(win))
        shuffled = EventWindow(win.x[perm], win.y[perm], win.t[perm], win.p[perm], win.t_start, win.duration,
                               win.width, win.height)
        np.testing.assert_allclose(encode_est(shuffled, 4).data, encode_est(win, 4).data, atol=1e-12)

    def test_empty_and_bad_bins(self):
        win = EventWindow.empty(5, 4, 0.0, 1.0)
        assert encode_est(win, 3).data.shape == (4, 5, 6)
        assert not encode_est(win, 3).data.any()
        with pytest.raises(ValueError):
            encode_est(win, 0)


class TestVoxelAndSAE:
    def test_cancellation(self):
        win = EventWindow([1, 1], [0, 0], [0.0, 0.0], [1, -1], 0.0, 1.0, 2, 1)
        assert not encode_voxel(win, 3).data.any()

    def test_positive_stream_matches_est(self, rng):
        win = random_window(rng, 200, pol=1)
        np.testing.assert_allclose(encode_voxel(win, 5).data, encode_est(win, 5).data[..., :5])

    def test_ec_sae_rules(self):
        win = EventWindow([0, 1, 1], [0, 0, 0], [0.0, 0.0, 1.0], [1, 1, 1], 0.0, 1.0, 2, 1)
        g = encode_ec_sae(win).data
        assert g[0, 1, 0] == 2 and g[0, 1, 2] == 1.0
        assert g[0, 0, 0] == 1 and g[0, 0, 2] == 0.0

    def test_nopol_sums_polar(self, rng):
        win = random_window(rng, 300)
        polar = encode_ec_sae(win, True).data
        flat = encode_ec_sae(win, False).data
        np.testing.assert_allclose(flat[..., 0], polar[..., 0] + polar[..., 1])
        assert np.all((flat[..., 1] >= 0) & (flat[..., 1] <= 1))

    @pytest.mark.parametrize("kind", list(GridKind))
    def test_flip_commutes(self, rng, kind):
        win = random_window(rng, 300)
        flipped = EventWindow(win.width - 1 - win.x, win.y, win.t, win.p, win.t_start, win.duration,
                              win.width, win.height)
        a = encode(flipped, kind, 4).data
        b = encode(win, kind, 4).data[:, ::-1]
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert a.shape[2] == grid_channels(kind, 4)


class TestResizeAndCache:
    def test_channel_counts(self):
        assert [grid_channels(k, 5) for k in GridKind] == [10, 5, 4, 2]

    def test_resize(self, rng):
        win = random_window(rng, 300, w=16, h=16)
        est = resize_grid(encode(win, "est", 5), 32)
        assert est.data.shape == (32, 32, 10)
        ec = resize_grid(encode(win, "ec_sae"), 32)
        # nearest-neighbour upsampling keeps integer counts
        np.testing.assert_array_equal(ec.data[..., :2], np.round(ec.data[..., :2]))

    def test_cache_round_trip(self, tmp_path, rng):
        g = encode(random_window(rng, 100), "voxel", 3)
        write_grid(tmp_path / "g.grid", g)
        back = read_grid(tmp_path / "g.grid")
        np.testing.assert_array_equal(back.data, g.data)
        assert back.kind is GridKind.VOXEL and back.bins == 3
        (tmp_path / "g.grid").write_bytes(b"\0" * 8)
        with pytest.raises(ValidationError):
            read_grid(tmp_path / "g.grid")
