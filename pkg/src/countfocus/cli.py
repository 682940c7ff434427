"""Command-line pipeline: ground-truth synthesis, evaluation, toy training.

Every run writes a ``manifest.json`` echoing the fully resolved configuration,
so result tables can be reconstructed from disk alone.  Exit codes: 0 success,
2 input error, 3 file-pairing error, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import focusnet as fn
from .errors import CountFocusError
from .geometry import (
    estimate_sigma_gak,
    estimate_sigma_nonuniform,
    fixed_sigma,
    load_annotations,
    save_annotations,
    sigma_from_boxes,
)
from .metrics import evaluate_maps, stratify
from .supervision import (
    compute_step_size,
    density_label,
    rasterize_density,
    rasterize_segmentation,
    read_density,
    segmentation_to_png,
    write_density,
)
from .synthdata import generate, parse_scene_spec

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PAIRING = 3
EXIT_INTERNAL = 4


class PairingError(Exception):
    pass


def _write_manifest(out_dir: Path, command: str, config: dict) -> None:
    manifest = {"command": command, "config": config}
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _resolve_sigmas(ps, kernel: str, beta: float, k: int, region_frac: float):
    if kernel.startswith("fixed:"):
        return fixed_sigma(ps, float(kernel.split(":", 1)[1]))
    if kernel == "gak":
        return estimate_sigma_gak(ps, k=k, beta=beta)
    if kernel == "nonuniform":
        return estimate_sigma_nonuniform(ps, k=k, beta=beta, region_fraction=region_frac)
    if kernel == "boxes":
        return sigma_from_boxes(ps)
    raise ValueError(f"unknown kernel {kernel!r}")


def cmd_synth_gt(args) -> int:
    out_dir = Path(args.out or args.out_dir or "out")
    out_dir.mkdir(parents=True, exist_ok=True)

    if bool(args.annotations) == bool(args.synth):
        print("synth-gt: exactly one of --annotations or --synth is required", file=sys.stderr)
        return EXIT_INPUT

    if args.annotations:
        try:
            items = load_annotations(args.annotations)
        except (json.JSONDecodeError, KeyError, ValueError, OSError) as exc:
            print(f"synth-gt: cannot read annotations {args.annotations}: {exc}", file=sys.stderr)
            return EXIT_INPUT
    else:
        try:
            spec = parse_scene_spec(args.synth, seed=args.seed)
        except ValueError as exc:
            print(f"synth-gt: bad scene spec: {exc}", file=sys.stderr)
            return EXIT_INPUT
        items = []
        for i in range(args.num_scenes):
            _, ps = generate(spec, i)
            items.append((f"scene_{i:04d}", ps))
        save_annotations(out_dir / "annotations.json", items)

    def process(item):
        image_id, ps = item
        sigmas = _resolve_sigmas(ps, args.kernel, args.beta, args.k, args.region_frac)
        dm = rasterize_density(ps, sigmas)
        sm = rasterize_segmentation(ps, sigmas)
        return image_id, ps, sigmas, dm, sm

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(process, items))
    else:
        results = [process(item) for item in items]

    gd_spec = compute_step_size(
        [(ps, ps.image_width * ps.image_height) for _, ps in items], args.levels
    )
    with open(out_dir / "labels.csv", "w", newline="") as labels_f, open(
        out_dir / "sigmas.csv", "w", newline=""
    ) as sigmas_f:
        labels = csv.writer(labels_f)
        labels.writerow(["image", "count", "level"])
        sig_writer = csv.writer(sigmas_f)
        sig_writer.writerow(["image", "point", "sigma"])
        for image_id, ps, sigmas, dm, sm in results:
            write_density(out_dir / f"{image_id}.ffdm", dm)
            segmentation_to_png(out_dir / f"{image_id}_seg.png", sm)
            labels.writerow([image_id, len(ps), density_label(ps, gd_spec).level])
            for i, s in enumerate(sigmas.sigmas):
                sig_writer.writerow([image_id, i, f"{s:.9g}"])

    _write_manifest(
        out_dir,
        "synth-gt",
        {
            "annotations": args.annotations,
            "synth": args.synth,
            "num_scenes": args.num_scenes,
            "kernel": args.kernel,
            "beta": args.beta,
            "k": args.k,
            "region_frac": args.region_frac,
            "levels": args.levels,
            "step_size": gd_spec.step_size,
            "seed": args.seed,
        },
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    truth_dir = Path(args.truth)
    pred_dir = Path(args.pred)
    out_dir = Path(args.out or args.out_dir or "out")
    out_dir.mkdir(parents=True, exist_ok=True)

    truth_files = {p.stem: p for p in sorted(truth_dir.glob("*.ffdm"))}
    pred_files = {p.stem: p for p in sorted(pred_dir.glob("*.ffdm"))}
    orphans = sorted(set(truth_files) ^ set(pred_files))
    if orphans:
        print("evaluate: unpaired density files: " + ", ".join(orphans), file=sys.stderr)
        return EXIT_PAIRING
    if not truth_files:
        print("evaluate: no density files found", file=sys.stderr)
        return EXIT_INPUT

    pairs = [
        (stem, read_density(truth_files[stem]), read_density(pred_files[stem]))
        for stem in sorted(truth_files)
    ]
    report = evaluate_maps(pairs, game_max=args.game_max)

    strata = None
    if args.stratify != "none":
        if not args.annotations:
            print("evaluate: --stratify requires --annotations with boxes", file=sys.stderr)
            return EXIT_INPUT
        try:
            annotations = load_annotations(args.annotations)
        except (json.JSONDecodeError, KeyError, ValueError, OSError) as exc:
            print(f"evaluate: cannot read annotations: {exc}", file=sys.stderr)
            return EXIT_INPUT
        strata = stratify(annotations, args.stratify)

    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        game_cols = [f"game{L}" for L in range(1, args.game_max + 1)]
        writer.writerow(["image", "truth", "pred", "abs_err", *game_cols])
        for row in report.per_image:
            writer.writerow(
                [row["image"], f"{row['truth']:.9g}", f"{row['pred']:.9g}", f"{row['abs_err']:.9g}"]
                + [f"{row[c]:.9g}" for c in game_cols]
            )

    payload = {"aggregate": report.aggregate}
    if strata is not None:
        payload["strata"] = [
            {"image": s.image_id, "index": s.index, "stratum": s.stratum} for s in strata
        ]
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")

    _write_manifest(
        out_dir,
        "evaluate",
        {
            "truth": str(truth_dir),
            "pred": str(pred_dir),
            "game_max": args.game_max,
            "stratify": args.stratify,
            "annotations": args.annotations,
        },
    )
    return EXIT_OK


def cmd_train_toy(args) -> int:
    out_dir = Path(args.out or args.out_dir or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.scenes < 20:
        print("train-toy: need at least 20 scenes", file=sys.stderr)
        return EXIT_INPUT

    cfg = fn.FocusNetConfig(input_size=args.size, num_levels=args.levels, seed=args.seed)
    spec = parse_scene_spec(args.synth, seed=args.seed)
    spec = dataclasses.replace(spec, size=args.size)
    scenes = [generate(spec, i) for i in range(args.scenes)]
    dataset, _ = fn.make_dataset(scenes, cfg.num_levels)
    model = fn.build_network(cfg)
    log = fn.train(model, dataset, cfg, epochs=args.epochs, lr=args.lr, ablate=args.ablate)
    ag.save_checkpoint(out_dir / "checkpoint.ffck", model.params)
    fn.write_training_log(out_dir / "training_log.csv", log)

    _write_manifest(
        out_dir,
        "train-toy",
        {
            "scenes": args.scenes,
            "epochs": args.epochs,
            "ablate": args.ablate,
            "seed": args.seed,
            "size": args.size,
            "levels": args.levels,
            "lr": args.lr,
            "synth": args.synth,
            "final_val_mae": log[-1]["val_mae"] if log else None,
        },
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="countfocus")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out-dir", default=None, help="default output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gt", help="rasterize density/segmentation/label supervision")
    p.add_argument("--annotations", default=None, help="dataset annotation JSON")
    p.add_argument("--synth", default=None, help='scene spec, e.g. "uniform,count=10"')
    p.add_argument("--num-scenes", type=int, default=1)
    p.add_argument("--kernel", default="nonuniform", help="fixed:SIGMA | gak | nonuniform | boxes")
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--region-frac", type=float, default=1.0 / 8.0)
    p.add_argument("--M", dest="levels", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth_gt)

    p = sub.add_parser("evaluate", help="metric report over paired density maps")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--game-max", type=int, default=4)
    p.add_argument("--stratify", choices=["none", "scale", "crowding"], default="none")
    p.add_argument("--annotations", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-toy", help="train the toy focus network on synthetic scenes")
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--ablate", choices=list(fn.ABLATIONS), default="none")
    p.add_argument("--synth", default="bimodal,count_min=5,count_max=25")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PairingError as exc:
        print(f"countfocus: {exc}", file=sys.stderr)
        return EXIT_PAIRING
    except CountFocusError as exc:
        print(f"countfocus: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
