/**
 * Segmentation backends behind a single interface: encode an image once,
 * decode any number of prompts against the cached embedding.
 *
 * The stub backend ("echo-box") exists for transport tests: it answers every
 * prompt with the prompt box filled, byte-deterministically. A real model is
 * wired in by implementing SegModel over its runtime; loading is fatal if the
 * weights are unreachable.
 */

import * as fs from "node:fs";
import { readPngHeader } from "./png.js";

export interface MaskResult {
  width: number;
  height: number;
  /** 0/255 grayscale pixels, row-major. */
  pixels: Uint8Array;
  confidence: number;
}

export interface SegModel {
  /** Cacheable per-image state (Enc_I(I) for a real model). */
  encode(imagePath: string): Embedding;
  decode(
    embedding: Embedding,
    points: Array<[number, number]>,
    box: [number, number, number, number] | null,
  ): MaskResult;
}

export interface Embedding {
  imagePath: string;
  width: number;
  height: number;
  /** Backend-specific payload; the stub keeps none. */
  data?: unknown;
}

export class EchoBoxModel implements SegModel {
  encode(imagePath: string): Embedding {
    const header = readPngHeader(fs.readFileSync(imagePath));
    return { imagePath, width: header.width, height: header.height };
  }

  decode(
    embedding: Embedding,
    points: Array<[number, number]>,
    box: [number, number, number, number] | null,
  ): MaskResult {
    const { width, height } = embedding;
    const pixels = new Uint8Array(width * height);
    let [x0, y0, x1, y1] = box ?? boxAroundPoints(points);
    x0 = Math.max(0, Math.floor(x0));
    y0 = Math.max(0, Math.floor(y0));
    x1 = Math.min(width, Math.ceil(x1));
    y1 = Math.min(height, Math.ceil(y1));
    for (let y = y0; y < y1; y++) {
      pixels.fill(255, y * width + x0, y * width + x1);
    }
    return { width, height, pixels, confidence: 1.0 };
  }
}

function boxAroundPoints(
  points: Array<[number, number]>,
): [number, number, number, number] {
  if (points.length === 0) {
    throw new Error("echo-box needs a box or at least one point");
  }
  const xs = points.map((p) => p[0]);
  const ys = points.map((p) => p[1]);
  return [
    Math.min(...xs),
    Math.min(...ys),
    Math.max(...xs) + 1,
    Math.max(...ys) + 1,
  ];
}

export function loadModel(opts: {
  model: string;
  weights?: string;
  device?: string;
  stub: boolean;
}): SegModel {
  if (opts.stub || opts.model === "echo-box") {
    return new EchoBoxModel();
  }
  // Real backends plug in here; without reachable weights this is a fatal
  // startup error by contract.
  if (!opts.weights || !fs.existsSync(opts.weights)) {
    throw new Error(
      `model "${opts.model}": weights not reachable at ${opts.weights ?? "(unset)"}`,
    );
  }
  throw new Error(`model "${opts.model}" has no backend in this build`);
}
