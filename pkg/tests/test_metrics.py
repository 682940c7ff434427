import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countfocus.errors import MissingBoxes, NoData, ShapeMismatch, UndefinedPeak
from countfocus.geometry import PointSet
from countfocus.metrics import (
    count_errors,
    evaluate_maps,
    game,
    psnr_ssim,
    stratify,
)
from countfocus.supervision import DensityMap


def dm(values):
    return DensityMap(values=np.asarray(values, dtype=np.float64))


class TestCountErrors:
    def test_perfect(self):
        assert count_errors([1, 2, 3], [1, 2, 3]) == (0.0, 0.0, 0.0)

    def test_hand_arithmetic(self):
        mae, rmse, nmae = count_errors([10, 20], [13, 16])
        assert mae == 3.5
        assert rmse == pytest.approx(3.5355, abs=1e-4)
        assert nmae == pytest.approx(0.25)

    def test_loop_oracle(self, rng):
        t = rng.uniform(1, 100, 100)
        p = rng.uniform(1, 100, 100)
        mae, rmse, nmae = count_errors(t, p)
        assert abs(mae - sum(abs(a - b) for a, b in zip(t, p)) / 100) < 1e-12
        assert abs(rmse - np.sqrt(sum((a - b) ** 2 for a, b in zip(t, p)) / 100)) < 1e-12
        assert abs(nmae - sum(abs(a - b) / a for a, b in zip(t, p)) / 100) < 1e-12

    def test_nmae_skips_zero_truth(self):
        _, _, nmae = count_errors([0, 10], [5, 15])
        assert nmae == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            count_errors([1], [1, 2])

    def test_empty(self):
        with pytest.raises(NoData):
            count_errors([], [])

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        t = rng.uniform(1, 50, 20)
        p = rng.uniform(1, 50, 20)
        perm = rng.permutation(20)
        assert count_errors(t, p) == pytest.approx(count_errors(t[perm], p[perm]))


class TestGame:
    def test_level0_is_count_difference(self, rng):
        t = dm(rng.uniform(0, 1, (32, 32)))
        p = dm(rng.uniform(0, 1, (32, 32)))
        assert game(t, p, 0) == pytest.approx(abs(t.count() - p.count()), abs=1e-9)

    def test_identical_maps_zero(self, rng):
        t = dm(rng.uniform(0, 1, (16, 16)))
        for L in range(5):
            assert game(t, t, L) == 0.0

    def test_shifted_mass(self):
        t = np.zeros((16, 16))
        p = np.zeros((16, 16))
        t[2, 2] = 1.0
        p[13, 13] = 1.0  # same total, different cells
        assert game(dm(t), dm(p), 0) == 0.0
        assert game(dm(t), dm(p), 2) == 2.0

    def test_cell_sum_oracle(self, rng):
        t = dm(rng.uniform(0, 1, (30, 30)))  # 30 not divisible by 4/8
        p = dm(rng.uniform(0, 1, (30, 30)))
        for L in range(5):
            cells = 2**L
            base = 30 // cells
            total = 0.0
            for cy in range(cells):
                for cx in range(cells):
                    y1 = 30 if cy == cells - 1 else (cy + 1) * base
                    x1 = 30 if cx == cells - 1 else (cx + 1) * base
                    ts = t.values[cy * base : y1, cx * base : x1].sum()
                    ps = p.values[cy * base : y1, cx * base : x1].sum()
                    total += abs(ts - ps)
            assert game(t, p, L) == pytest.approx(total, abs=1e-9)

    def test_monotone_in_level(self, rng):
        for _ in range(10):
            t = dm(rng.uniform(0, 1, (24, 24)))
            p = dm(rng.uniform(0, 1, (24, 24)))
            values = [game(t, p, L) for L in range(5)]
            assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))

    def test_level_range(self, rng):
        t = dm(rng.uniform(0, 1, (8, 8)))
        with pytest.raises(ValueError):
            game(t, t, 5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            game(dm(np.zeros((4, 4))), dm(np.zeros((5, 5))), 0)


class TestPsnrSsim:
    def test_identical_maps(self, rng):
        t = dm(rng.uniform(0, 1, (32, 32)))
        psnr, ssim = psnr_ssim(t, t)
        assert psnr == float("inf")
        assert ssim == pytest.approx(1.0, abs=1e-12)

    def test_offset_gives_20db(self, rng):
        t = dm(rng.uniform(0.2, 1.0, (32, 32)))
        peak = t.values.max()
        p = dm(t.values + 0.1 * peak)
        psnr, _ = psnr_ssim(t, p)
        assert psnr == pytest.approx(20.0, abs=1e-6)

    def test_ssim_symmetry(self, rng):
        a = dm(rng.uniform(0.1, 1.0, (24, 24)))
        b = dm(rng.uniform(0.1, 1.0, (24, 24)) * a.values.max())
        # symmetric up to the peak normalization, so use equal peaks
        b.values[0, 0] = a.values.max()
        a.values[0, 1] = a.values.max()
        _, s_ab = psnr_ssim(a, b)
        _, s_ba = psnr_ssim(b, a)
        assert s_ab == pytest.approx(s_ba, abs=1e-9)

    def test_ssim_window_oracle(self, rng):
        from scipy.ndimage import correlate

        t = dm(rng.uniform(0.1, 1.0, (20, 20)))
        p = dm(rng.uniform(0.1, 1.0, (20, 20)))
        _, ssim = psnr_ssim(t, p)

        peak = t.values.max()
        x, y = t.values / peak, p.values / peak
        coords = np.arange(11) - 5.0
        g = np.exp(-(coords**2) / (2 * 1.5**2))
        win = np.outer(g, g)
        win /= win.sum()
        mx = correlate(x, win, mode="reflect")
        my = correlate(y, win, mode="reflect")
        vx = correlate(x * x, win, mode="reflect") - mx**2
        vy = correlate(y * y, win, mode="reflect") - my**2
        cxy = correlate(x * y, win, mode="reflect") - mx * my
        c1, c2 = 0.01**2, 0.03**2
        ref = (((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))).mean()
        assert ssim == pytest.approx(float(ref), abs=1e-6)

    def test_zero_truth_raises(self):
        with pytest.raises(UndefinedPeak):
            psnr_ssim(dm(np.zeros((8, 8))), dm(np.ones((8, 8))))


class TestStratify:
    def _annotated(self, sizes, counts, img=100):
        items = []
        for i, (side, n) in enumerate(zip(sizes, counts)):
            pts = tuple((float(j % (img - 1)), float(j // (img - 1))) for j in range(n))
            boxes = tuple((0.0, 0.0, float(side), float(side)) for _ in range(n))
            items.append((f"img{i:03d}", PointSet(image_width=img, image_height=img, points=pts, boxes=boxes)))
        return items

    def test_three_images_three_strata(self):
        items = self._annotated([2, 4, 8], [4, 4, 4])
        out = stratify(items, "scale")
        assert [s.stratum for s in out] == ["small", "medium", "large"]

    def test_identical_images_tie_break_deterministic(self):
        items = self._annotated([4, 4, 4, 4, 4, 4], [3, 3, 3, 3, 3, 3])
        a = stratify(items, "crowding")
        b = stratify(items, "crowding")
        assert a == b
        from collections import Counter

        assert sorted(Counter(s.stratum for s in a).values()) == [2, 2, 2]

    def test_sort_oracle_group_boundaries(self, rng):
        sizes = rng.uniform(1, 20, 99)
        counts = rng.integers(1, 30, 99)
        items = self._annotated(sizes, counts)
        out = stratify(items, "scale")
        order = sorted(range(99), key=lambda i: (out[i].index, out[i].image_id))
        strata = [out[i].stratum for i in order]
        assert strata[:33] == ["small"] * 33
        assert strata[33:66] == ["medium"] * 33
        assert strata[66:] == ["large"] * 33

    def test_missing_boxes(self):
        ps = PointSet(image_width=10, image_height=10, points=((1, 1),))
        with pytest.raises(MissingBoxes):
            stratify([("x", ps)], "scale")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            stratify(self._annotated([2], [1]), "weather")


class TestEvaluateMaps:
    def test_report_aggregates(self, rng):
        pairs = []
        for i in range(4):
            t = dm(rng.uniform(0, 1, (16, 16)))
            p = dm(rng.uniform(0, 1, (16, 16)))
            pairs.append((f"im{i}", t, p))
        report = evaluate_maps(pairs, game_max=2)
        assert len(report.per_image) == 4
        assert report.aggregate["GAME0"] == pytest.approx(report.aggregate["MAE"], abs=1e-9)
        assert "PSNR" in report.aggregate and "SSIM" in report.aggregate

    def test_empty_raises(self):
        with pytest.raises(NoData):
            evaluate_maps([])
