import numpy as np
import pytest

from countfocus.geometry import estimate_sigma_gak, estimate_sigma_nonuniform
from countfocus.synthdata import SceneSpec, generate, generate_many, parse_scene_spec


class TestSceneSpec:
    def test_rejects_unknown_layout(self):
        with pytest.raises(ValueError):
            SceneSpec(layout="spiral")

    def test_rejects_bad_count_range(self):
        with pytest.raises(ValueError):
            SceneSpec(count_min=10, count_max=5)

    def test_rejects_bad_radius_range(self):
        with pytest.raises(ValueError):
            SceneSpec(radius_min=0.0)


class TestGenerate:
    def test_zero_count(self):
        spec = SceneSpec(count_min=0, count_max=0, seed=3)
        img, ps = generate(spec, 0)
        assert len(ps) == 0
        assert img.shape == (64, 64)
        assert img.max() <= spec.noise_level + 1e-12

    def test_exact_count_and_boxes(self):
        spec = SceneSpec(count_min=5, count_max=5, layout="uniform", seed=1)
        _, ps = generate(spec, 2)
        assert len(ps) == 5
        assert len(ps.boxes) == 5

    def test_bit_identical_across_calls(self):
        spec = SceneSpec(layout="clustered", seed=11)
        a_img, a_ps = generate(spec, 4)
        b_img, b_ps = generate(spec, 4)
        assert np.array_equal(a_img, b_img)
        assert a_ps == b_ps

    def test_different_indices_differ(self):
        spec = SceneSpec(seed=0)
        a, _ = generate(spec, 0)
        b, _ = generate(spec, 1)
        assert not np.array_equal(a, b)

    def test_image_range_and_bounds(self):
        for layout in ("uniform", "clustered", "bimodal"):
            spec = SceneSpec(layout=layout, seed=7)
            for i in range(5):
                img, ps = generate(spec, i)
                assert img.min() >= 0.0 and img.max() <= 1.0
                for x, y in ps.points:
                    assert 0 < x < spec.size and 0 < y < spec.size
                for bx, by, bw, bh in ps.boxes:
                    assert bx >= 0 and by >= 0
                    assert bx + bw <= spec.size + 1e-9 and by + bh <= spec.size + 1e-9

    def test_clustered_scenes_separate_the_estimators(self):
        # tight clusters push the local (non-uniform) sigma below the
        # whole-image GAK sigma on the dense side
        spec = SceneSpec(layout="clustered", cluster_spread=3.0, count_min=20, count_max=25, seed=5)
        diffs = []
        for i in range(20):
            _, ps = generate(spec, i)
            if len(ps) < 2:
                continue
            g = estimate_sigma_gak(ps).as_array()
            n = estimate_sigma_nonuniform(ps).as_array()
            diffs.append(np.mean(np.abs(g - n) / g))
        assert np.mean(diffs) > 0.01

    def test_generate_many(self):
        spec = SceneSpec(seed=0)
        scenes = generate_many(spec, 3)
        assert len(scenes) == 3
        one_img, one_ps = generate(spec, 1)
        assert np.array_equal(scenes[1][0], one_img)
        assert scenes[1][1] == one_ps


class TestParseSceneSpec:
    def test_basic(self):
        spec = parse_scene_spec("uniform,count=10,size=64")
        assert spec.layout == "uniform"
        assert spec.count_min == spec.count_max == 10
        assert spec.size == 64

    def test_range_and_extras(self):
        spec = parse_scene_spec("clustered,count_min=3,count_max=9,clusters=4,spread=2.5,noise=0.1", seed=9)
        assert (spec.count_min, spec.count_max) == (3, 9)
        assert spec.num_clusters == 4
        assert spec.cluster_spread == 2.5
        assert spec.noise_level == 0.1
        assert spec.seed == 9

    def test_bad_items(self):
        with pytest.raises(ValueError):
            parse_scene_spec("")
        with pytest.raises(ValueError):
            parse_scene_spec("uniform,count")
        with pytest.raises(ValueError):
            parse_scene_spec("uniform,flavor=mint")
