"""Toy three-branch counting network and its trainer.

The base network is a reduced encoder-distiller-decoder: three stride-2
convolution stages and two dilated convolutions, a distiller that fuses skip
features from the two deepest non-gridding levels, and three deconvolution
stages (4x4, stride 2) each followed by two convolutions, producing a C-channel
feature map V at full input resolution.  A segmentation branch turns V into
per-pixel foreground probabilities whose foreground slice is tiled into a
spatial focus map V_s; a global-density branch bilinear-pools V into a channel
focus map V_d plus a density-level classifier.  The density head multiplies
V * V_s * V_d and projects to a single channel.

Batch normalization is deliberately replaced by a learnable per-channel affine:
at batch sizes this small it only adds noise and complicates gradient checks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import InvalidConfig, NoData, ShapeMismatch
from .losses import LossWeights, density_regression_loss, global_density_loss, seg_focal_loss, total_loss
from .supervision import DensityMap, GlobalDensityLabel, SegmentationMap

ABLATIONS = ("none", "no-seg", "no-density", "base-only")


@dataclass(frozen=True)
class FocusNetConfig:
    input_size: int = 64
    base_channels: int = 16
    num_levels: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    gamma_s: float = 2.0
    gamma_c: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.input_size % 8 != 0:
            raise InvalidConfig("input_size must be divisible by 8")
        if self.base_channels < 1 or self.num_levels < 1:
            raise InvalidConfig("base_channels and num_levels must be >= 1")


@dataclass
class FocusNetOutput:
    density: ag.Tensor  # (N, H, W)
    seg_probs: ag.Tensor  # (N, 2, H, W)
    level_probs: ag.Tensor  # (N, M+1)
    focus_seg: ag.Tensor  # V_s, (N, C, H, W)
    focus_density: ag.Tensor  # V_d, (N, C, H, W)


class FocusNet:
    """Parameter container plus forward pass."""

    def __init__(self, cfg: FocusNetConfig):
        self.cfg = cfg
        self.params: dict[str, ag.Tensor] = {}
        rng = np.random.default_rng(cfg.seed)
        c = cfg.base_channels

        def conv_param(name, oc, ic, k):
            fan_in = ic * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(oc, ic, k, k))
            self.params[name + ".w"] = ag.tensor(w, requires_grad=True, name=name + ".w")
            self.params[name + ".b"] = ag.tensor(np.zeros(oc), requires_grad=True, name=name + ".b")

        def deconv_param(name, ic, oc, k, stride=2):
            # only k^2 / stride^2 taps feed each output pixel of a strided
            # deconv, so the usual fan-in would shrink activations
            fan_in = ic * k * k // (stride * stride)
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(ic, oc, k, k))
            self.params[name + ".w"] = ag.tensor(w, requires_grad=True, name=name + ".w")
            self.params[name + ".b"] = ag.tensor(np.zeros(oc), requires_grad=True, name=name + ".b")

        def affine_param(name, channels):
            self.params[name + ".scale"] = ag.tensor(
                np.ones((1, channels, 1, 1)), requires_grad=True, name=name + ".scale"
            )
            self.params[name + ".shift"] = ag.tensor(
                np.zeros((1, channels, 1, 1)), requires_grad=True, name=name + ".shift"
            )

        # encoder: three stride-2 stages, then two dilation-2 layers
        conv_param("enc1", c, 1, 3)
        affine_param("enc1.aff", c)
        conv_param("enc2", c, c, 3)
        affine_param("enc2.aff", c)
        conv_param("enc3", c, c, 3)
        affine_param("enc3.aff", c)
        conv_param("dila1", c, c, 3)
        affine_param("dila1.aff", c)
        conv_param("dila2", c, c, 3)
        affine_param("dila2.aff", c)
        # distiller over concatenated skip features
        conv_param("dist1", c, 2 * c, 3)
        affine_param("dist1.aff", c)
        conv_param("dist2", c, c, 3)
        affine_param("dist2.aff", c)
        # decoder: three (deconv + two conv) stages
        for i in (1, 2, 3):
            deconv_param(f"dec{i}.up", c, c, 4)
            affine_param(f"dec{i}.up.aff", c)
            conv_param(f"dec{i}.c1", c, c, 3)
            affine_param(f"dec{i}.c1.aff", c)
            conv_param(f"dec{i}.c2", c, c, 3)
            affine_param(f"dec{i}.c2.aff", c)
        # heads
        conv_param("seg_head", 2, c, 1)
        m = cfg.num_levels
        self.params["level_head.w"] = ag.tensor(
            rng.normal(0.0, np.sqrt(1.0 / c), size=(c, m + 1)), requires_grad=True, name="level_head.w"
        )
        self.params["level_head.b"] = ag.tensor(np.zeros(m + 1), requires_grad=True, name="level_head.b")
        self.params["channel_head.w"] = ag.tensor(
            rng.normal(0.0, np.sqrt(1.0 / c), size=(c, c)), requires_grad=True, name="channel_head.w"
        )
        self.params["channel_head.b"] = ag.tensor(np.zeros(c), requires_grad=True, name="channel_head.b")
        conv_param("density_head", 1, c, 1)

    # -- helpers -------------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeMismatch(f"parameter {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def _block(self, x, name, stride=1, dilation=1, padding=1):
        y = ag.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride=stride, dilation=dilation, padding=padding)
        y = ag.add(ag.mul(y, self.params[name + ".aff.scale"]), self.params[name + ".aff.shift"])
        return ag.relu(y)

    def _up_block(self, x, name):
        y = ag.transposed_conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride=2, padding=1)
        y = ag.add(ag.mul(y, self.params[name + ".aff.scale"]), self.params[name + ".aff.shift"])
        return ag.relu(y)

    # -- forward -------------------------------------------------------------

    def forward(self, images, ablate: str = "none") -> FocusNetOutput:
        """Run a batch of grayscale images through all three branches.

        ``images`` is (N, H, W) or (H, W); ablation switches replace V_s
        and/or V_d by all-ones tensors.
        """
        if ablate not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablate!r}")
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[1] != self.cfg.input_size or arr.shape[2] != self.cfg.input_size:
            raise ShapeMismatch(
                f"expected (N, {self.cfg.input_size}, {self.cfg.input_size}) images, got {arr.shape}"
            )
        n = arr.shape[0]
        c = self.cfg.base_channels
        x = ag.tensor(arr[:, None], name="input")

        e1 = self._block(x, "enc1", stride=2)
        e2 = self._block(e1, "enc2", stride=2)
        e3 = self._block(e2, "enc3", stride=2)
        d1 = self._block(e3, "dila1", dilation=2, padding=2)
        # dila1 is the gridding-prone high-dilation analogue: its features are
        # carried along the trunk but not skipped into the distiller
        d2 = self._block(d1, "dila2", dilation=2, padding=2)
        fused = ag.concat([e3, d2], axis=1)
        f1 = self._block(fused, "dist1")
        f2 = self._block(f1, "dist2")

        y = f2
        for i in (1, 2, 3):
            y = self._up_block(y, f"dec{i}.up")
            y = self._block(y, f"dec{i}.c1")
            y = self._block(y, f"dec{i}.c2")
        v = y  # (N, C, H, W)

        # segmentation branch
        seg_logits = ag.conv2d(v, self.params["seg_head.w"], self.params["seg_head.b"])
        seg_probs = ag.softmax(seg_logits, axis=1)
        foreground = ag.narrow(seg_probs, axis=1, start=1, length=1)
        v_s = ag.tile(foreground, axis=1, n=c)

        # global-density branch via bilinear pooling
        pooled = ag.outer_product_pool(v)
        pooled = ag.l2_normalize(pooled, axis=1)
        pooled = ag.signed_sqrt(pooled)
        level_logits = ag.add(ag.matmul(pooled, self.params["level_head.w"]), self.params["level_head.b"])
        level_probs = ag.softmax(level_logits, axis=1)
        channel_vec = ag.sigmoid(ag.add(ag.matmul(pooled, self.params["channel_head.w"]), self.params["channel_head.b"]))
        v_d = ag.reshape(channel_vec, (n, c, 1, 1))
        v_d = ag.tile(ag.tile(v_d, axis=2, n=self.cfg.input_size), axis=3, n=self.cfg.input_size)

        ones = ag.tensor(np.ones((n, c, self.cfg.input_size, self.cfg.input_size)))
        use_s = v_s if ablate in ("none", "no-density") else ones
        use_d = v_d if ablate in ("none", "no-seg") else ones

        fusedv = ag.mul(ag.mul(v, use_s), use_d)
        density = ag.conv2d(fusedv, self.params["density_head.w"], self.params["density_head.b"])
        density = ag.reshape(density, (n, self.cfg.input_size, self.cfg.input_size))
        return FocusNetOutput(
            density=density,
            seg_probs=seg_probs,
            level_probs=level_probs,
            focus_seg=v_s,
            focus_density=v_d,
        )


def build_network(cfg: FocusNetConfig) -> FocusNet:
    return FocusNet(cfg)


def predict_count(model: FocusNet, image) -> float:
    """Sum of the predicted density map (raw, no clamping)."""
    out = model.forward(image)
    return float(out.density.data.sum())


def make_dataset(scenes, num_levels: int, k: int = 5, beta: float = 0.3):
    """Turn (image, PointSet) scenes into full supervision tuples.

    Sigmas come from the non-uniform estimator; the global-density step size is
    computed over the whole set with the full image as the patch.  Returns
    (dataset, GlobalDensitySpec).
    """
    from .geometry import estimate_sigma_nonuniform
    from .supervision import compute_step_size, density_label, rasterize_density, rasterize_segmentation

    scenes = list(scenes)
    if not scenes:
        raise NoData("no scenes to build a dataset from")
    patches = [(ps, ps.image_width * ps.image_height) for _, ps in scenes]
    spec = compute_step_size(patches, num_levels)
    dataset = []
    for image, ps in scenes:
        sigmas = estimate_sigma_nonuniform(ps, k=k, beta=beta)
        dataset.append(
            (
                np.asarray(image, dtype=np.float32),
                rasterize_density(ps, sigmas),
                rasterize_segmentation(ps, sigmas),
                density_label(ps, spec),
            )
        )
    return dataset, spec


# --- training ---------------------------------------------------------------


def batch_losses(model: FocusNet, images, targets, ablate="none"):
    """Forward a batch and assemble the multi-level loss.

    ``targets`` is a list of (DensityMap, SegmentationMap, GlobalDensityLabel)
    parallel to ``images``.  Returns (total loss Tensor, component dict).
    Ablated branches drop out of both the fusion and the loss.
    """
    out = model.forward(images, ablate=ablate)
    n = len(targets)
    cfg = model.cfg

    def density_fn(pred):
        values, grads = 0.0, np.empty_like(pred)
        for i, (dm, _, _) in enumerate(targets):
            lv = density_regression_loss(pred[i], dm)
            values += lv.value
            grads[i] = lv.gradient
        return values, grads

    loss_r = ag.apply_loss(out.density, density_fn)

    parts = {"loss_r": float(loss_r.data)}
    terms = [ag.scale(loss_r, cfg.weights.lambda_r)]

    if ablate in ("none", "no-density"):
        def seg_fn(pred):
            values, grads = 0.0, np.empty_like(pred)
            for i, (_, sm, _) in enumerate(targets):
                # (2, H, W) -> (H, W, 2) for the per-pixel loss
                lv = seg_focal_loss(pred[i].transpose(1, 2, 0), sm, gamma_s=cfg.gamma_s)
                values += lv.value
                grads[i] = lv.gradient.transpose(2, 0, 1)
            return values, grads

        loss_s = ag.apply_loss(out.seg_probs, seg_fn)
        parts["loss_s"] = float(loss_s.data)
        terms.append(ag.scale(loss_s, cfg.weights.lambda_s))
    else:
        parts["loss_s"] = 0.0

    if ablate in ("none", "no-seg"):
        def level_fn(pred):
            values, grads = 0.0, np.empty_like(pred)
            for i, (_, _, label) in enumerate(targets):
                lv = global_density_loss(pred[i], label, gamma_c=cfg.gamma_c)
                values += lv.value
                grads[i] = lv.gradient
            return values, grads

        loss_c = ag.apply_loss(out.level_probs, level_fn)
        parts["loss_c"] = float(loss_c.data)
        terms.append(ag.scale(loss_c, cfg.weights.lambda_c))
    else:
        parts["loss_c"] = 0.0

    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    parts["total"] = total_loss(
        parts["loss_r"],
        parts["loss_s"] if ablate in ("none", "no-density") else 0.0,
        parts["loss_c"] if ablate in ("none", "no-seg") else 0.0,
        cfg.weights,
    )
    parts["n"] = n
    return total, parts


def train(
    model: FocusNet,
    dataset,
    cfg: FocusNetConfig,
    epochs: int,
    lr: float = 1e-4,
    batch_size: int = 4,
    val_fraction: float = 0.2,
    ablate: str = "none",
):
    """Train on (image, DensityMap, SegmentationMap, GlobalDensityLabel) tuples.

    Deterministic given cfg.seed.  Returns a per-epoch log of loss components
    and held-out MAE; the split is an 80/20 seeded shuffle.
    """
    dataset = list(dataset)
    if not dataset:
        raise NoData("training dataset is empty")
    if ablate not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablate!r}")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(len(dataset) * val_fraction))) if len(dataset) > 1 else 0
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        train_idx = order
    val_set = [dataset[i] for i in val_idx]
    train_set = [dataset[i] for i in train_idx]

    optimizer = ag.Adam(model.parameters(), lr=lr)
    log = []
    for epoch in range(epochs):
        perm = rng.permutation(len(train_set))
        sums = {"loss_r": 0.0, "loss_s": 0.0, "loss_c": 0.0, "total": 0.0}
        seen = 0
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            images = np.stack([train_set[i][0] for i in idx])
            targets = [train_set[i][1:] for i in idx]
            total, parts = batch_losses(model, images, targets, ablate=ablate)
            optimizer.zero_grad()
            ag.backward(total)
            optimizer.step()
            for key in sums:
                sums[key] += parts[key]
            seen += len(idx)
        val_mae = validation_mae(model, val_set if val_set else train_set, ablate=ablate)
        log.append(
            {
                "epoch": epoch,
                "loss_r": sums["loss_r"] / seen,
                "loss_s": sums["loss_s"] / seen,
                "loss_c": sums["loss_c"] / seen,
                "total": sums["total"] / seen,
                "val_mae": val_mae,
            }
        )
    return log


def validation_mae(model: FocusNet, subset, batch_size: int = 8, ablate: str = "none") -> float:
    """Mean absolute count error over a held-out split."""
    if not subset:
        return 0.0
    errors = []
    for start in range(0, len(subset), batch_size):
        chunk = subset[start : start + batch_size]
        images = np.stack([item[0] for item in chunk])
        out = model.forward(images, ablate=ablate)
        pred = out.density.data.sum(axis=(1, 2))
        truth = np.array([item[1].count() for item in chunk])
        errors.extend(np.abs(pred - truth).tolist())
    return float(np.mean(errors))


def write_training_log(path, log) -> None:
    """Training log as CSV: epoch,loss_r,loss_s,loss_c,total,val_mae."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss_r", "loss_s", "loss_c", "total", "val_mae"])
        for row in log:
            writer.writerow(
                [
                    row["epoch"],
                    f"{row['loss_r']:.8g}",
                    f"{row['loss_s']:.8g}",
                    f"{row['loss_c']:.8g}",
                    f"{row['total']:.8g}",
                    f"{row['val_mae']:.8g}",
                ]
            )
