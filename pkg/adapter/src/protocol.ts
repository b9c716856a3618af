/** occulift-seg/1 wire types and request validation. */

export const PROTOCOL = "occulift-seg/1";

export interface SegRequest {
  view_id: number;
  image_path: string;
  points: Array<[number, number]>;
  box: [number, number, number, number] | null;
  request_id: string | number;
}

export interface SegResponse {
  request_id: string | number;
  mask_png_base64: string;
  confidence: number;
  cache_hit: boolean;
}

export interface SegError {
  request_id: string | number | null;
  error: string;
}

function isPair(p: unknown): p is [number, number] {
  return (
    Array.isArray(p) &&
    p.length === 2 &&
    p.every((v) => typeof v === "number" && Number.isFinite(v))
  );
}

/** Throws with a human-readable message on any shape violation. */
export function parseRequest(raw: unknown): SegRequest {
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new Error("request must be a JSON object");
  }
  const obj = raw as Record<string, unknown>;
  const { view_id, image_path, points, box, request_id } = obj;
  if (request_id === undefined || request_id === null) {
    throw new Error("missing request_id");
  }
  if (typeof request_id !== "string" && typeof request_id !== "number") {
    throw new Error("request_id must be a string or number");
  }
  if (typeof view_id !== "number" || !Number.isInteger(view_id)) {
    throw new Error("view_id must be an integer");
  }
  if (typeof image_path !== "string" || image_path.length === 0) {
    throw new Error("image_path must be a non-empty string");
  }
  if (!Array.isArray(points) || !points.every(isPair)) {
    throw new Error("points must be an array of [x, y] pairs");
  }
  let parsedBox: SegRequest["box"] = null;
  if (box !== undefined && box !== null) {
    if (
      !Array.isArray(box) ||
      box.length !== 4 ||
      !box.every((v) => typeof v === "number" && Number.isFinite(v))
    ) {
      throw new Error("box must be [x0, y0, x1, y1]");
    }
    parsedBox = box as [number, number, number, number];
  }
  return {
    view_id,
    image_path,
    points: points as Array<[number, number]>,
    box: parsedBox,
    request_id,
  };
}

/** Best-effort request_id extraction from an arbitrary parsed line. */
export function requestIdOf(raw: unknown): string | number | null {
  if (typeof raw === "object" && raw !== null && !Array.isArray(raw)) {
    const id = (raw as Record<string, unknown>).request_id;
    if (typeof id === "string" || typeof id === "number") return id;
  }
  return null;
}
