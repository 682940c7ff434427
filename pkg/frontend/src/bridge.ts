import { spawnSync } from "node:child_process";

/** Row-major n-dimensional float/byte buffer crossing the process boundary. */
export interface BoundArray {
  shape: number[];
  dtype: "f8" | "f4" | "u1";
  /** little-endian raw buffer */
  data: Buffer;
}

/** Error re-raised from the backing library, carrying its class name. */
export class BridgeError extends Error {
  constructor(public readonly errorName: string, message: string) {
    super(message);
    this.name = errorName;
  }
}

interface WireArray {
  shape: number[];
  dtype: "f8" | "f4" | "u1";
  data: string; // base64
}

export function toWire(arr: BoundArray): WireArray {
  return { shape: arr.shape, dtype: arr.dtype, data: arr.data.toString("base64") };
}

export function fromWire(obj: WireArray): BoundArray {
  return { shape: obj.shape, dtype: obj.dtype, data: Buffer.from(obj.data, "base64") };
}

export function float64View(arr: BoundArray): Float64Array {
  if (arr.dtype !== "f8") throw new Error(`expected f8 array, got ${arr.dtype}`);
  return new Float64Array(arr.data.buffer, arr.data.byteOffset, arr.data.byteLength / 8);
}

export function float32View(arr: BoundArray): Float32Array {
  if (arr.dtype !== "f4") throw new Error(`expected f4 array, got ${arr.dtype}`);
  return new Float32Array(arr.data.buffer, arr.data.byteOffset, arr.data.byteLength / 4);
}

export function fromFloat64(values: ArrayLike<number>, shape: number[]): BoundArray {
  const view = Float64Array.from(values as ArrayLike<number>);
  return { shape, dtype: "f8", data: Buffer.from(view.buffer) };
}

const PYTHON = process.env.COUNTFOCUS_PYTHON ?? "python3";

/** Run one library call in a fresh bridge subprocess. */
export function call(op: string, args: Record<string, unknown>): any {
  const request = JSON.stringify({ op, args });
  const proc = spawnSync(PYTHON, ["-m", "countfocus.bridge"], {
    input: request,
    encoding: "utf-8",
    maxBuffer: 256 * 1024 * 1024,
  });
  if (proc.error) throw proc.error;
  if (proc.status !== 0) {
    throw new Error(`bridge exited with status ${proc.status}: ${proc.stderr}`);
  }
  const response = JSON.parse(proc.stdout);
  if (!response.ok) {
    throw new BridgeError(response.error, response.message);
  }
  return response.result;
}
