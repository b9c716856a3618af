"""Pluggable promptable segmentation: (image, prompts) -> binary mask.

Two implementations ship here: an oracle that rasterizes ground-truth
silhouettes from an analytic scene (with optional seeded corruption, the test
double for a real model), and a client speaking newline-delimited JSON to an
external segmenter process.

Wire protocol (one JSON object per line over the child's stdio):
  handshake (child -> parent, first line): {"protocol": "occulift-seg/1"}
  request:  {"view_id", "image_path", "points": [[x, y], ...],
             "box": [x0, y0, x1, y1], "request_id"}
  response: {"request_id", "mask_png_base64", "confidence"}
Responses carrying an "error" field mark a failed segmentation.
"""

from __future__ import annotations

import base64
import io
import json
import subprocess
import threading
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .fields import AnalyticScene
from .geometry import Camera
from .masks import Mask
from .prompts import PromptSet
from .scenes import render_ground_truth

PROTOCOL = "occulift-seg/1"


class SegmenterUnavailable(Exception):
    """Transport failure talking to an external segmenter."""


class SegmentationFailed(Exception):
    """The segmenter returned an empty or degenerate mask."""


@dataclass(frozen=True)
class SegmentRequest:
    view_id: int
    prompt: PromptSet
    image_ref: str

    def __post_init__(self):
        if self.prompt.view_id != self.view_id:
            raise ValueError("prompt.view_id disagrees with request view_id")


@dataclass(frozen=True)
class SegmentResponse:
    mask: Mask
    confidence: float
    latency_ms: float


@dataclass(frozen=True)
class CorruptionModel:
    """Seeded degradations applied to oracle masks, mimicking model error."""

    erode_radius: int = 0  # negative values dilate
    flip_prob: float = 0.0
    dropout_prob: float = 0.0
    seed: int = 0

    @property
    def is_identity(self):
        return self.erode_radius == 0 and self.flip_prob == 0 and self.dropout_prob == 0


def _disk(radius: int) -> np.ndarray:
    r = abs(int(radius))
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def apply_corruption(binary: np.ndarray, model: CorruptionModel, view_id: int) -> np.ndarray:
    """Erosion/dilation, then per-pixel flips, then one-component dropout.

    Deterministic per (model.seed, view_id) so identical requests reproduce
    identical masks.
    """
    out = binary.copy()
    if model.erode_radius > 0:
        out = ndimage.binary_erosion(out, structure=_disk(model.erode_radius))
    elif model.erode_radius < 0:
        out = ndimage.binary_dilation(out, structure=_disk(model.erode_radius))
    rng = np.random.default_rng([model.seed, view_id])
    if model.flip_prob > 0:
        flips = rng.random(out.shape) < model.flip_prob
        out = out ^ flips
    if model.dropout_prob > 0 and rng.random() < model.dropout_prob:
        labels, count = ndimage.label(out)
        if count > 0:
            out = out & (labels != rng.integers(1, count + 1))
    return out


class OracleSegmenter:
    """Ground-truth silhouettes of the object under the prompt points.

    The silhouette rasterization is the same code path used by
    render_ground_truth, so zero-corruption oracle masks match dataset
    ground-truth masks bit for bit.
    """

    def __init__(self, scene: AnalyticScene, cameras: dict, corruption=None,
                 supersample: int = 2):
        self.scene = scene
        self.cameras = dict(cameras)  # view_id -> Camera
        self.corruption = corruption or CorruptionModel()
        self.supersample = supersample
        self._cache = {}  # view_id -> (silhouettes, object_map)

    def _render(self, view_id: int):
        if view_id not in self._cache:
            cam = self.cameras[view_id]
            _, sils, _, obj = render_ground_truth(self.scene, cam, self.supersample)
            self._cache[view_id] = (sils, obj)
        return self._cache[view_id]

    def segment(self, request: SegmentRequest) -> SegmentResponse:
        t0 = time.perf_counter()
        mask = oracle_segment(self.scene, self.cameras[request.view_id],
                              request.prompt, self.corruption,
                              _render_cache=self._render(request.view_id))
        dt = (time.perf_counter() - t0) * 1e3
        return SegmentResponse(mask=mask, confidence=1.0, latency_ms=dt)


def oracle_segment(scene: AnalyticScene, camera: Camera, prompts: PromptSet,
                   corruption: CorruptionModel | None = None,
                   supersample: int = 2, _render_cache=None) -> Mask:
    """Analytic silhouette of the prompted object, then corruption.

    The object is chosen by majority object id among the prompt points;
    prompts landing only on background raise :class:`SegmentationFailed`.
    """
    corruption = corruption or CorruptionModel()
    if _render_cache is None:
        _, silhouettes, _, object_map = render_ground_truth(scene, camera, supersample)
    else:
        silhouettes, object_map = _render_cache
    ids = []
    for x, y in prompts.points:
        if 0 <= int(y) < object_map.shape[0] and 0 <= int(x) < object_map.shape[1]:
            k = int(object_map[int(y), int(x)])
            if k >= 0:
                ids.append(k)
    if not ids:
        raise SegmentationFailed("prompt points hit only background")
    target = int(np.bincount(ids).argmax())
    binary = apply_corruption(silhouettes[target], corruption, prompts.view_id)
    if not binary.any():
        raise SegmentationFailed("corrupted mask is empty")
    return Mask.from_binary(binary)


def decode_mask_png(b64: str) -> np.ndarray:
    img = Image.open(io.BytesIO(base64.b64decode(b64)))
    arr = np.asarray(img.convert("L"))
    return arr >= 128


def encode_mask_png(binary: np.ndarray) -> str:
    img = Image.fromarray(np.where(binary, 255, 0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class ExternalSegmenter:
    """Client for a segmenter child process speaking the JSON-lines protocol.

    Requests are serialized per child (the protocol is strictly one response
    per request line); close() terminates the child.
    """

    def __init__(self, command: list, timeout: float = 120.0):
        self.command = list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._counter = 0
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1,
            )
        except OSError as e:
            raise SegmenterUnavailable(f"cannot launch segmenter: {e}") from e
        hello = self._read_line()
        if hello.get("protocol") != PROTOCOL:
            self.close()
            raise SegmenterUnavailable(f"bad handshake: {hello!r}")

    def _read_line(self):
        line = self._proc.stdout.readline()
        if not line:
            raise SegmenterUnavailable("segmenter closed its stdout")
        try:
            return json.loads(line)
        except json.JSONDecodeError as e:
            raise SegmenterUnavailable(f"invalid protocol line: {line!r}") from e

    def segment(self, request: SegmentRequest) -> SegmentResponse:
        with self._lock:
            self._counter += 1
            rid = self._counter
            payload = {
                "view_id": request.view_id,
                "image_path": request.image_ref,
                "points": [[int(x), int(y)] for x, y in request.prompt.points],
                "box": (None if request.prompt.box is None
                        else [int(v) for v in request.prompt.box]),
                "request_id": rid,
            }
            t0 = time.perf_counter()
            try:
                self._proc.stdin.write(json.dumps(payload) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                raise SegmenterUnavailable(f"segmenter pipe broken: {e}") from e
            resp = self._read_line()
        if resp.get("request_id") != rid:
            raise SegmenterUnavailable(
                f"response id {resp.get('request_id')} != request id {rid}")
        if "error" in resp:
            raise SegmentationFailed(resp["error"])
        binary = decode_mask_png(resp["mask_png_base64"])
        if not binary.any():
            raise SegmentationFailed("external segmenter returned an empty mask")
        dt = (time.perf_counter() - t0) * 1e3
        return SegmentResponse(mask=Mask.from_binary(binary),
                               confidence=float(resp.get("confidence", 0.0)),
                               latency_ms=dt)

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
