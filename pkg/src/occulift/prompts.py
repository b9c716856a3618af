"""Turn a coarse mask into segmenter prompts.

The prompt recipe: keep the largest 4-connected foreground component, take
k-means centers of its pixels (snapped onto foreground so concave shapes
cannot emit background points), and add the tight bounding rectangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .masks import EmptyMask, Mask

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class PromptSet:
    points: tuple  # ((x, y), ...) foreground pixel coordinates
    box: tuple | None  # (x_min, y_min, x_max, y_max); None for points-only
    view_id: int

    def __post_init__(self):
        if self.box is None:
            return
        x0, y0, x1, y1 = self.box
        for x, y in self.points:
            if not (x0 <= x <= x1 and y0 <= y <= y1):
                raise ValueError(f"prompt point ({x},{y}) outside box {self.box}")


def largest_component(binary: np.ndarray) -> np.ndarray:
    """Largest 4-connected foreground component, or the empty mask."""
    labels, count = ndimage.label(binary, structure=FOUR_CONNECTED)
    if count == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def _foreground_xy(binary: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(binary)
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def kmeans_centers(mask: Mask, k: int, seed: int,
                   n_init: int = 10, snap: bool = True):
    """Lloyd's algorithm with k-means++ seeding on foreground pixel
    coordinates; centers snap to the nearest foreground pixel unless
    ``snap`` is off (raw centroids, useful for inspecting the clustering).

    ``n_init`` independent k-means++ restarts are run and the lowest-objective
    result kept (Lloyd from a single seeding is only locally optimal).
    Fewer than k foreground pixels returns them all; an empty mask raises
    :class:`EmptyMask`.
    """
    pts = _foreground_xy(mask.binary)
    if len(pts) == 0:
        raise EmptyMask()
    if len(pts) <= k:
        return [(int(x), int(y)) for x, y in pts]

    if len(pts) <= 18 and k ** len(pts) <= 262144:
        # small instance: enumerate every assignment for the exact optimum
        best = _exact_kmeans(pts, k)
    else:
        rng = np.random.default_rng(seed)
        best, best_obj = None, np.inf
        for _ in range(n_init):
            centers = _lloyd(pts, _kmeans_pp_init(pts, k, rng), k)
            obj = kmeans_objective(pts, centers)
            if obj < best_obj:
                best, best_obj = centers, obj
    if not snap:
        return best

    # snap each center onto foreground
    out = []
    for c in best:
        nearest = pts[np.argmin(((pts - c) ** 2).sum(-1))]
        out.append((int(nearest[0]), int(nearest[1])))
    return out


def _exact_kmeans(pts, k):
    """Globally optimal k-means on a small point set by enumerating every
    assignment of points to clusters (feasible when k ** n is small)."""
    n = len(pts)
    labels = np.indices((k,) * n).reshape(n, -1).T  # every assignment, rows
    # skip assignments that leave a cluster empty (they duplicate smaller k)
    onehot = labels[:, :, None] == np.arange(k)[None, None, :]
    counts = onehot.sum(axis=1)  # (m, k)
    valid = (counts > 0).all(axis=1)
    onehot, counts = onehot[valid], counts[valid]
    sums = np.einsum("mnk,nd->mkd", onehot.astype(np.float64), pts)
    total_sq = (pts ** 2).sum()
    # within-cluster SS = total SS - sum_j |sum_j|^2 / count_j
    obj = total_sq - ((sums ** 2).sum(-1) / counts).sum(-1)
    best = np.argmin(obj)
    return sums[best] / counts[best][:, None]


def _lloyd(pts, centers, k):
    for _ in range(50):
        d2 = ((pts[:, None, :] - centers[None]) ** 2).sum(-1)
        assign = np.argmin(d2, axis=1)
        new = centers.copy()
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # re-seed a dead cluster at the point farthest from its center
                new[j] = pts[np.argmax(d2.min(axis=1))]
        shift = np.linalg.norm(new - centers, axis=-1).max()
        centers = new
        if shift < 0.5:
            break
    return centers


def _kmeans_pp_init(pts, k, rng):
    centers = [pts[rng.integers(len(pts))]]
    for _ in range(1, k):
        d2 = np.min(((pts[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(pts[rng.integers(len(pts))])
            continue
        centers.append(pts[rng.choice(len(pts), p=d2 / total)])
    return np.array(centers, dtype=np.float64)


def kmeans_objective(pts: np.ndarray, centers: np.ndarray) -> float:
    """Total within-cluster squared distance (the quantity Lloyd minimizes)."""
    d2 = ((pts[:, None, :] - centers[None]) ** 2).sum(-1)
    return float(d2.min(axis=1).sum())


def min_bounding_rect(mask: Mask) -> tuple[int, int, int, int]:
    """Tight axis-aligned bounds (x_min, y_min, x_max, y_max) of foreground."""
    ys, xs = np.nonzero(mask.binary)
    if len(xs) == 0:
        raise EmptyMask()
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def make_prompts(mask: Mask, k: int, seed: int, view_id: int,
                 keep_largest_component: bool = True) -> PromptSet:
    """K-means points + bounding box of the (component-filtered) mask."""
    binary = mask.binary
    if keep_largest_component:
        binary = largest_component(binary)
    filtered = Mask.from_binary(binary)
    points = kmeans_centers(filtered, k, seed)
    box = min_bounding_rect(filtered)
    return PromptSet(points=tuple(points), box=box, view_id=view_id)
