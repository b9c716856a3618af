/**
 * The JSON-lines request loop: handshake first, then one response line per
 * request line, in order, until stdin closes. Malformed requests produce an
 * error response and the loop continues.
 */

import * as readline from "node:readline";
import { LruCache } from "./cache.js";
import { Embedding, SegModel } from "./model.js";
import { encodeGrayPng } from "./png.js";
import {
  PROTOCOL,
  SegError,
  SegResponse,
  parseRequest,
  requestIdOf,
} from "./protocol.js";

export interface ServeOptions {
  cacheSize: number;
}

export function handleLine(
  line: string,
  model: SegModel,
  cache: LruCache<string, Embedding>,
): SegResponse | SegError {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch {
    return { request_id: null, error: "invalid JSON" };
  }
  const requestId = requestIdOf(raw);
  try {
    const req = parseRequest(raw);
    let embedding = cache.get(req.image_path);
    const cacheHit = embedding !== undefined;
    if (embedding === undefined) {
      embedding = model.encode(req.image_path);
      cache.set(req.image_path, embedding);
    }
    const result = model.decode(embedding, req.points, req.box);
    const png = encodeGrayPng(result.width, result.height, result.pixels);
    return {
      request_id: req.request_id,
      mask_png_base64: png.toString("base64"),
      confidence: result.confidence,
      cache_hit: cacheHit,
    };
  } catch (err) {
    return { request_id: requestId, error: String((err as Error).message ?? err) };
  }
}

export async function serve(
  model: SegModel,
  options: ServeOptions,
  input: NodeJS.ReadableStream = process.stdin,
  output: NodeJS.WritableStream = process.stdout,
): Promise<void> {
  const cache = new LruCache<string, Embedding>(options.cacheSize);
  output.write(JSON.stringify({ protocol: PROTOCOL }) + "\n");
  const rl = readline.createInterface({ input, crlfDelay: Infinity });
  for await (const line of rl) {
    if (line.trim() === "") continue;
    output.write(JSON.stringify(handleLine(line, model, cache)) + "\n");
  }
}
