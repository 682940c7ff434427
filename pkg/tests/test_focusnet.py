import numpy as np
import pytest

from conftest import rel_err
from countfocus import autograd as ag
from countfocus import focusnet as fn
from countfocus.errors import InvalidConfig, NoData, ShapeMismatch
from countfocus.synthdata import SceneSpec, generate

SMALL = fn.FocusNetConfig(input_size=32, base_channels=4, num_levels=2, seed=0)


def small_dataset(n=12, size=32, seed=0):
    spec = SceneSpec(layout="bimodal", size=size, count_min=3, count_max=10, seed=seed)
    scenes = [generate(spec, i) for i in range(n)]
    return fn.make_dataset(scenes, SMALL.num_levels)


class TestConfig:
    def test_divisibility(self):
        with pytest.raises(InvalidConfig):
            fn.FocusNetConfig(input_size=30)

    def test_positive_channels(self):
        with pytest.raises(InvalidConfig):
            fn.FocusNetConfig(base_channels=0)


class TestForward:
    def test_output_shapes(self):
        cfg = fn.FocusNetConfig(input_size=64, base_channels=16, num_levels=4, seed=0)
        model = fn.build_network(cfg)
        out = model.forward(np.zeros((2, 64, 64)))
        assert out.density.shape == (2, 64, 64)
        assert out.seg_probs.shape == (2, 2, 64, 64)
        assert out.level_probs.shape == (2, 5)
        assert out.focus_seg.shape == (2, 16, 64, 64)
        assert out.focus_density.shape == (2, 16, 64, 64)

    def test_seg_probs_normalized(self, rng):
        model = fn.build_network(SMALL)
        out = model.forward(rng.uniform(0, 1, (1, 32, 32)))
        assert np.allclose(out.seg_probs.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.allclose(out.level_probs.data.sum(axis=1), 1.0, atol=1e-6)

    def test_single_image_promoted_to_batch(self, rng):
        model = fn.build_network(SMALL)
        out = model.forward(rng.uniform(0, 1, (32, 32)))
        assert out.density.shape == (1, 32, 32)

    def test_wrong_size_rejected(self):
        model = fn.build_network(SMALL)
        with pytest.raises(ShapeMismatch):
            model.forward(np.zeros((1, 16, 16)))

    def test_branch_ablation_identity(self, rng):
        """V_s = V_d = 1 must reproduce the base-only head output exactly."""
        model = fn.build_network(SMALL)
        img = rng.uniform(0, 1, (1, 32, 32)).astype(np.float32)
        base = model.forward(img, ablate="base-only")

        # recompute the trunk by hand, multiply by explicit all-ones focus
        # tensors, and push through the density head
        x = ag.tensor(img[:, None])
        e1 = model._block(x, "enc1", stride=2)
        e2 = model._block(e1, "enc2", stride=2)
        e3 = model._block(e2, "enc3", stride=2)
        d1 = model._block(e3, "dila1", dilation=2, padding=2)
        d2 = model._block(d1, "dila2", dilation=2, padding=2)
        f1 = model._block(ag.concat([e3, d2], axis=1), "dist1")
        f2 = model._block(f1, "dist2")
        y = f2
        for i in (1, 2, 3):
            y = model._up_block(y, f"dec{i}.up")
            y = model._block(y, f"dec{i}.c1")
            y = model._block(y, f"dec{i}.c2")
        ones = ag.tensor(np.ones(y.shape))
        fused = ag.mul(ag.mul(y, ones), ones)
        density = ag.conv2d(fused, model.params["density_head.w"], model.params["density_head.b"])
        assert np.array_equal(base.density.data, density.data.reshape(1, 32, 32))

    def test_ablations_change_density_but_not_trunk_outputs(self, rng):
        model = fn.build_network(SMALL)
        img = rng.uniform(0, 1, (1, 32, 32)).astype(np.float32)
        full = model.forward(img, ablate="none")
        base = model.forward(img, ablate="base-only")
        # branch probabilities are computed identically regardless of ablation
        assert np.array_equal(full.seg_probs.data, base.seg_probs.data)
        assert np.array_equal(full.level_probs.data, base.level_probs.data)
        # the fused density differs once the focus maps multiply in
        assert not np.array_equal(full.density.data, base.density.data)

    def test_unknown_ablation(self):
        model = fn.build_network(SMALL)
        with pytest.raises(ValueError):
            model.forward(np.zeros((32, 32)), ablate="everything")

    def test_parameter_count_matches_hand_sum(self):
        cfg = fn.FocusNetConfig(input_size=64, base_channels=16, num_levels=4, seed=0)
        model = fn.build_network(cfg)
        c, m = 16, 4
        conv = lambda oc, ic, k: oc * ic * k * k + oc
        affine = lambda ch: 2 * ch
        expected = (
            conv(c, 1, 3) + affine(c)          # enc1
            + conv(c, c, 3) + affine(c)        # enc2
            + conv(c, c, 3) + affine(c)        # enc3
            + conv(c, c, 3) + affine(c)        # dila1
            + conv(c, c, 3) + affine(c)        # dila2
            + conv(c, 2 * c, 3) + affine(c)    # dist1
            + conv(c, c, 3) + affine(c)        # dist2
            + 3 * (c * c * 4 * 4 + c + affine(c)      # dec up
                   + conv(c, c, 3) + affine(c)        # dec c1
                   + conv(c, c, 3) + affine(c))       # dec c2
            + conv(2, c, 1)                    # seg head
            + c * (m + 1) + (m + 1)            # level head
            + c * c + c                        # channel head
            + conv(1, c, 1)                    # density head
        )
        assert model.parameter_count() == expected

    def test_state_dict_round_trip(self, rng):
        model = fn.build_network(SMALL)
        state = model.state_dict()
        other = fn.build_network(fn.FocusNetConfig(input_size=32, base_channels=4, num_levels=2, seed=99))
        other.load_state_dict(state)
        img = rng.uniform(0, 1, (1, 32, 32)).astype(np.float32)
        a = model.forward(img)
        b = other.forward(img)
        assert np.array_equal(a.density.data, b.density.data)


class TestPredictCount:
    def test_zeroed_head_gives_zero(self):
        model = fn.build_network(SMALL)
        model.params["density_head.w"].data[:] = 0
        model.params["density_head.b"].data[:] = 0
        assert fn.predict_count(model, np.zeros((32, 32))) == 0.0

    def test_equals_map_sum(self, rng):
        model = fn.build_network(SMALL)
        img = rng.uniform(0, 1, (32, 32)).astype(np.float32)
        out = model.forward(img)
        assert fn.predict_count(model, img) == float(out.density.data.sum())


class TestMakeDataset:
    def test_tuples_and_spec(self):
        dataset, spec = small_dataset()
        assert len(dataset) == 12
        assert spec.num_levels == SMALL.num_levels
        img, dmap, smap, label = dataset[0]
        assert img.shape == (32, 32)
        assert dmap.values.shape == (32, 32)
        assert smap.values.shape == (32, 32)
        assert 0 <= label.level <= SMALL.num_levels

    def test_empty_raises(self):
        with pytest.raises(NoData):
            fn.make_dataset([], 4)


class TestTraining:
    def test_zero_lr_keeps_parameters(self):
        dataset, _ = small_dataset()
        model = fn.build_network(SMALL)
        before = model.state_dict()
        log = fn.train(model, dataset, SMALL, epochs=2, lr=0.0)
        for name, arr in model.state_dict().items():
            assert np.array_equal(arr, before[name]), name
        assert log[0]["total"] == pytest.approx(log[1]["total"], rel=1e-6)

    def test_loss_decreases(self):
        dataset, _ = small_dataset()
        model = fn.build_network(SMALL)
        log = fn.train(model, dataset, SMALL, epochs=8, lr=1e-3)
        assert log[-1]["total"] < log[0]["total"]

    def test_deterministic_given_seed(self):
        dataset, _ = small_dataset()
        a = fn.build_network(SMALL)
        b = fn.build_network(SMALL)
        log_a = fn.train(a, dataset, SMALL, epochs=2)
        log_b = fn.train(b, dataset, SMALL, epochs=2)
        assert log_a == log_b
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_empty_dataset(self):
        model = fn.build_network(SMALL)
        with pytest.raises(NoData):
            fn.train(model, [], SMALL, epochs=1)

    def test_ablation_drops_loss_terms(self):
        dataset, _ = small_dataset()
        model = fn.build_network(SMALL)
        images = np.stack([dataset[i][0] for i in range(2)])
        targets = [dataset[i][1:] for i in range(2)]
        _, parts = fn.batch_losses(model, images, targets, ablate="base-only")
        assert parts["loss_s"] == 0.0
        assert parts["loss_c"] == 0.0
        assert parts["loss_r"] > 0.0

    def test_training_log_csv(self, tmp_path):
        dataset, _ = small_dataset()
        model = fn.build_network(SMALL)
        log = fn.train(model, dataset, SMALL, epochs=2)
        path = tmp_path / "log.csv"
        fn.write_training_log(path, log)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,loss_r,loss_s,loss_c,total,val_mae"
        assert len(lines) == 3


class TestEndToEndGradients:
    def test_full_network_finite_differences(self):
        """Jittered float64 probe of random parameters through all branches."""
        cfg = fn.FocusNetConfig(input_size=32, base_channels=4, num_levels=2, seed=0)
        model = fn.build_network(cfg)
        rng = np.random.default_rng(0)
        for p in model.params.values():
            p.data = (p.data + rng.normal(0, 0.02, p.data.shape)).astype(np.float64)
        img = rng.uniform(0, 1, (1, 32, 32))
        gd = rng.normal(size=(1, 32, 32))
        gs = rng.normal(size=(1, 2, 32, 32))
        gc = rng.normal(size=(1, 3))

        def loss_tensor():
            out = model.forward(img.astype(np.float64))
            return ag.add(
                ag.add(
                    ag.tensor_sum(ag.mul(out.density, ag.Tensor(gd))),
                    ag.tensor_sum(ag.mul(out.seg_probs, ag.Tensor(gs))),
                ),
                ag.tensor_sum(ag.mul(out.level_probs, ag.Tensor(gc))),
            )

        ag.backward(loss_tensor())
        names = list(model.params)
        failures = []
        for _ in range(50):
            name = names[rng.integers(len(names))]
            p = model.params[name]
            idx = tuple(rng.integers(d) for d in p.data.shape)
            analytic = 0.0 if p.grad is None else float(p.grad[idx])
            orig = p.data[idx]
            eps = 1e-6
            p.data[idx] = orig + eps
            lp = float(loss_tensor().data)
            p.data[idx] = orig - eps
            lm = float(loss_tensor().data)
            p.data[idx] = orig
            numeric = (lp - lm) / (2 * eps)
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-5)
            if err > 1e-3:
                failures.append((name, idx, err))
        assert not failures, failures
