"""JSON-over-stdio bridge exposing the supervision and metric operations.

One request per invocation: a JSON object ``{"op": ..., "args": {...}}`` on
stdin, one JSON response on stdout — ``{"ok": true, "result": ...}`` or
``{"ok": false, "error": "<ErrorClassName>", "message": ...}``.  Arrays cross
the boundary as ``{"shape": [...], "dtype": "f8"|"f4"|"u1", "data": <base64
of the little-endian buffer>}`` so every element round-trips bit-exactly.

The bridge only marshals; all numerics live in the library modules.
"""

from __future__ import annotations

import base64
import json
import sys

import numpy as np

from .errors import CountFocusError
from .geometry import (
    PointSet,
    SigmaAssignment,
    estimate_sigma_gak,
    estimate_sigma_nonuniform,
)
from .metrics import count_errors, game, psnr_ssim
from .supervision import DensityMap, rasterize_density, rasterize_segmentation

_DTYPES = {"f8": "<f8", "f4": "<f4", "u1": "|u1"}


def encode_array(arr: np.ndarray, dtype: str) -> dict:
    data = np.ascontiguousarray(arr).astype(_DTYPES[dtype])
    return {
        "shape": list(arr.shape),
        "dtype": dtype,
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def decode_array(obj: dict) -> np.ndarray:
    buf = base64.b64decode(obj["data"])
    return np.frombuffer(buf, dtype=_DTYPES[obj["dtype"]]).reshape(obj["shape"]).copy()


def _pointset(args: dict) -> PointSet:
    return PointSet(
        image_width=int(args["width"]),
        image_height=int(args["height"]),
        points=tuple((p[0], p[1]) for p in args.get("points", [])),
        boxes=tuple(tuple(b) for b in args["boxes"]) if args.get("boxes") else None,
    )


def _sigmas(args: dict) -> SigmaAssignment:
    return SigmaAssignment(sigmas=tuple(args["sigmas"]))


def _density(obj: dict) -> DensityMap:
    return DensityMap(values=decode_array(obj))


def _finite(x: float):
    # JSON has no Infinity; the identical-map PSNR sentinel crosses as a string
    return "Infinity" if np.isinf(x) else float(x)


def handle(request: dict):
    op = request["op"]
    args = request.get("args", {})
    if op == "estimate_sigma_gak":
        sa = estimate_sigma_gak(_pointset(args), k=int(args.get("k", 5)), beta=float(args.get("beta", 0.3)))
        return {"sigmas": encode_array(sa.as_array(), "f8"), "estimator_tag": sa.estimator_tag}
    if op == "estimate_sigma_nonuniform":
        sa = estimate_sigma_nonuniform(
            _pointset(args),
            k=int(args.get("k", 5)),
            beta=float(args.get("beta", 0.3)),
            region_fraction=float(args.get("region_fraction", 1.0 / 8.0)),
        )
        return {"sigmas": encode_array(sa.as_array(), "f8"), "estimator_tag": sa.estimator_tag}
    if op == "rasterize_density":
        dm = rasterize_density(_pointset(args), _sigmas(args))
        return {"map": encode_array(dm.values, "f8")}
    if op == "rasterize_segmentation":
        sm = rasterize_segmentation(_pointset(args), _sigmas(args))
        return {"map": encode_array(sm.values, "u1")}
    if op == "count_errors":
        mae, rmse, nmae = count_errors(args["truth"], args["pred"])
        return {"mae": mae, "rmse": rmse, "nmae": nmae}
    if op == "game":
        return {"value": game(_density(args["truth"]), _density(args["pred"]), int(args["level"]))}
    if op == "psnr_ssim":
        psnr, ssim = psnr_ssim(_density(args["truth"]), _density(args["pred"]))
        return {"psnr": _finite(psnr), "ssim": ssim}
    if op == "echo":
        # marshaling self-test: return the array untouched
        obj = args["array"]
        return {"array": encode_array(decode_array(obj), obj["dtype"])}
    raise ValueError(f"unknown op {op!r}")


def main() -> int:
    try:
        request = json.load(sys.stdin)
        result = handle(request)
        payload = {"ok": True, "result": result}
    except CountFocusError as exc:
        payload = {"ok": False, "error": type(exc).__name__, "message": str(exc)}
    except (ValueError, KeyError, TypeError) as exc:
        payload = {"ok": False, "error": type(exc).__name__, "message": str(exc)}
    json.dump(payload, sys.stdout)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
