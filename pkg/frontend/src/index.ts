/**
 * Bindings for the countfocus supervision/metric library.
 *
 * Seven functions mirror the library contracts exactly: the two sigma
 * estimators, both rasterizers, count errors, grid-based GAME, and
 * PSNR/SSIM.  Arrays round-trip bit-exactly; library errors surface as
 * {@link BridgeError} carrying the original error class name.
 */

import { BoundArray, BridgeError, call, float64View, fromWire, toWire } from "./bridge.js";

export { BoundArray, BridgeError } from "./bridge.js";
export { float32View, float64View, fromFloat64 } from "./bridge.js";

export interface PointSet {
  width: number;
  height: number;
  /** [x, y] pairs in pixels */
  points: [number, number][];
  /** optional [x, y, w, h] boxes, parallel to points */
  boxes?: [number, number, number, number][];
}

export interface SigmaAssignment {
  sigmas: Float64Array;
  estimatorTag: string;
}

function sigmaResult(result: any): SigmaAssignment {
  const arr = fromWire(result.sigmas);
  return {
    sigmas: new Float64Array(arr.data.buffer, arr.data.byteOffset, arr.shape[0]),
    estimatorTag: result.estimator_tag,
  };
}

export function estimateSigmaGak(ps: PointSet, k = 5, beta = 0.3): SigmaAssignment {
  return sigmaResult(call("estimate_sigma_gak", { ...ps, k, beta }));
}

export function estimateSigmaNonuniform(
  ps: PointSet,
  k = 5,
  beta = 0.3,
  regionFraction = 1 / 8,
): SigmaAssignment {
  return sigmaResult(
    call("estimate_sigma_nonuniform", { ...ps, k, beta, region_fraction: regionFraction }),
  );
}

/** Height x width float64 density map whose sum equals the point count. */
export function rasterizeDensity(ps: PointSet, sigmas: ArrayLike<number>): BoundArray {
  return fromWire(call("rasterize_density", { ...ps, sigmas: Array.from(sigmas) }).map);
}

/** Height x width uint8 foreground mask. */
export function rasterizeSegmentation(ps: PointSet, sigmas: ArrayLike<number>): BoundArray {
  return fromWire(call("rasterize_segmentation", { ...ps, sigmas: Array.from(sigmas) }).map);
}

export interface CountErrors {
  mae: number;
  rmse: number;
  nmae: number;
}

export function countErrors(truth: number[], pred: number[]): CountErrors {
  return call("count_errors", { truth, pred });
}

/** Sum of absolute per-cell count differences over a 2^L x 2^L grid. */
export function game(truth: BoundArray, pred: BoundArray, level: number): number {
  return call("game", { truth: toWire(truth), pred: toWire(pred), level }).value;
}

export interface PsnrSsim {
  /** dB; Infinity for identical maps */
  psnr: number;
  ssim: number;
}

export function psnrSsim(truth: BoundArray, pred: BoundArray): PsnrSsim {
  const result = call("psnr_ssim", { truth: toWire(truth), pred: toWire(pred) });
  return { psnr: result.psnr === "Infinity" ? Infinity : result.psnr, ssim: result.ssim };
}

/** Marshaling self-test: send an array across the boundary and back. */
export function echo(arr: BoundArray): BoundArray {
  return fromWire(call("echo", { array: toWire(arr) }).array);
}

/**
 * Serialize a density map in the library's binary FFDM file layout
 * (float32 payload; IEEE round-to-nearest matches the native writer bit
 * for bit).
 */
export function toFfdmBytes(map: BoundArray): Buffer {
  if (map.shape.length !== 2) throw new Error(`density map must be 2-D, got ${map.shape}`);
  const [h, w] = map.shape;
  const header = Buffer.alloc(12);
  header.write("FFDM", 0, "ascii");
  header.writeUInt32LE(w, 4);
  header.writeUInt32LE(h, 8);
  const payload =
    map.dtype === "f4" ? map.data : Buffer.from(Float32Array.from(float64View(map)).buffer);
  return Buffer.concat([header, payload]);
}
