/**
 * OLFEAT1 feature-map files and the stub feature generator behind the
 * dump-features CLI mode.
 *
 * Layout: magic "OLFEAT1", little-endian u32 width/height/channels, then
 * float32 values row-major channel-last.
 */

import * as fs from "node:fs";

export const FEATURE_MAGIC = "OLFEAT1";
export const FEATURE_MAP_SIZE = 256;

export function writeFeatureMap(
  path: string,
  width: number,
  height: number,
  channels: number,
  values: Float32Array,
): void {
  if (values.length !== width * height * channels) {
    throw new Error(
      `feature buffer is ${values.length}, want ${width * height * channels}`,
    );
  }
  const header = Buffer.alloc(FEATURE_MAGIC.length + 12);
  header.write(FEATURE_MAGIC, 0, "ascii");
  header.writeUInt32LE(width, FEATURE_MAGIC.length);
  header.writeUInt32LE(height, FEATURE_MAGIC.length + 4);
  header.writeUInt32LE(channels, FEATURE_MAGIC.length + 8);
  const body = Buffer.from(values.buffer, values.byteOffset, values.byteLength);
  fs.writeFileSync(path, Buffer.concat([header, body]));
}

export function readFeatureMap(path: string): {
  width: number;
  height: number;
  channels: number;
  values: Float32Array;
} {
  const buf = fs.readFileSync(path);
  if (buf.toString("ascii", 0, FEATURE_MAGIC.length) !== FEATURE_MAGIC) {
    throw new Error("bad feature-map magic");
  }
  const width = buf.readUInt32LE(FEATURE_MAGIC.length);
  const height = buf.readUInt32LE(FEATURE_MAGIC.length + 4);
  const channels = buf.readUInt32LE(FEATURE_MAGIC.length + 8);
  const start = FEATURE_MAGIC.length + 12;
  const values = new Float32Array(width * height * channels);
  for (let i = 0; i < values.length; i++) {
    values[i] = buf.readFloatLE(start + 4 * i);
  }
  return { width, height, channels, values };
}

/**
 * Deterministic stand-in for encoder features in stub mode: a seeded
 * pseudo-random projection keyed by the image file's bytes, so identical
 * images always produce identical maps and different images diverge.
 */
export function stubFeatures(imagePath: string, channels: number): Float32Array {
  const bytes = fs.readFileSync(imagePath);
  let seed = 0x811c9dc5; // FNV-1a over the file contents
  for (const b of bytes) {
    seed = Math.imul(seed ^ b, 0x01000193) >>> 0;
  }
  const n = FEATURE_MAP_SIZE * FEATURE_MAP_SIZE * channels;
  const out = new Float32Array(n);
  let state = seed || 1;
  for (let i = 0; i < n; i++) {
    // xorshift32
    state ^= state << 13;
    state ^= state >>> 17;
    state ^= state << 5;
    state >>>= 0;
    out[i] = state / 0xffffffff - 0.5;
  }
  return out;
}
