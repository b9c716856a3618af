"""2D feature maps: the distillation targets rendered features train against.

Feature maps are fixed 256x256 regardless of image resolution; per-ray
targets come from a bilinear lookup at the ray's pixel mapped into map
coordinates. Files use the OLFEAT1 layout: magic, little-endian u32
width/height/channels, float32 values row-major channel-last.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FEATURE_MAP_SIZE = 256
MAGIC = b"OLFEAT1"


@dataclass
class FeatureMap:
    values: np.ndarray  # (H, W, F) float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("feature map must be H x W x F")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    def lookup(self, px, py, image_width, image_height):
        """Bilinear sample at image pixels (px, py) mapped into map coords.

        Pixel centers map proportionally: image pixel (px+0.5)/W lands at the
        same normalized position in the map. Returns (N, F).
        """
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        u = (px + 0.5) / image_width * self.width - 0.5
        v = (py + 0.5) / image_height * self.height - 0.5
        return self._bilinear(u, v)

    def _bilinear(self, u, v):
        u = np.clip(u, 0, self.width - 1)
        v = np.clip(v, 0, self.height - 1)
        x0 = np.minimum(np.floor(u).astype(int), self.width - 2)
        y0 = np.minimum(np.floor(v).astype(int), self.height - 2)
        fx = (u - x0)[:, None]
        fy = (v - y0)[:, None]
        vals = self.values
        top = vals[y0, x0] * (1 - fx) + vals[y0, x0 + 1] * fx
        bot = vals[y0 + 1, x0] * (1 - fx) + vals[y0 + 1, x0 + 1] * fx
        return top * (1 - fy) + bot * fy


def save_feature_map(fmap: FeatureMap, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<3I", fmap.width, fmap.height, fmap.channels))
        f.write(np.ascontiguousarray(fmap.values.astype("<f4")).tobytes())


def load_feature_map(path) -> FeatureMap:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"bad feature-map magic {magic!r}")
        w, h, c = struct.unpack("<3I", f.read(12))
        data = np.frombuffer(f.read(w * h * c * 4), dtype="<f4")
    return FeatureMap(values=data.reshape(h, w, c).copy())
