"""Stage 2 losses and training: photometric + Eikonal finetuning of the
SDF/color grids on masked images, plus L1 distillation of 2D encoder feature
maps into the 3D feature field.

Total objective: L_c + lambda_eik * L_eik + lambda_f * L_f + lambda_v * L_v,
where L_v is the occupancy BCE refresh. Pretraining (stage 0) uses
L_c + lambda_eik * L_eik on full, unmasked images.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .features import FeatureMap
from .fields import BoundaryGradient, VoxelGrid
from .lifting import (ViewRays, bce_backward, bce_loss, occupancy_forward_backward,
                      occupancy_forward_batch, ray_bank, _sample_positions)
from .masks import Mask
from .optim import Adam, ScalarParam, lr_schedule
from .render import (compose_weights_backward, render_along_ray,
                     render_along_ray_backward, render_weights_from_sdf,
                     sdf_to_alpha_backward)
from .scenes import SceneDataset


class NonFiniteLoss(Exception):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite-loss: {term} = {value}")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    lambda_eik: float = 0.1
    lambda_f: float = 0.1
    lambda_v: float = 0.01

    def __post_init__(self):
        if min(self.lambda_eik, self.lambda_f, self.lambda_v) < 0:
            raise ValueError("loss weights must be nonnegative")


# -- loss terms (forward + explicit backward) ---------------------------------


def photometric_loss(rendered, target) -> float:
    """(1/R) sum_r ||C_hat(r) - C(r)||_2^2."""
    diff = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def photometric_backward(rendered, target):
    diff = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return 2.0 * diff / len(diff)


def eikonal_loss(sdf_grid: VoxelGrid, points) -> float:
    """Mean squared deviation of |grad sdf| from 1 at interior points."""
    g = sdf_grid.position_gradient(points)
    norms = np.linalg.norm(g, axis=-1)
    return float(np.mean((norms - 1.0) ** 2))


def eikonal_backward(sdf_grid: VoxelGrid, points, scale=1.0):
    """Accumulate d(eikonal)/d(grid values) * scale; returns the loss.

    Computes the interpolation context once and shares it between the spatial
    gradient and its backward pass.
    """
    pts = np.atleast_2d(points)
    if not np.all(sdf_grid.interior_mask(pts)):
        raise BoundaryGradient()
    vid, _, frac, _ = sdf_grid._context(pts)
    dw = sdf_grid._weight_position_jacobian(frac)  # (N,8,3)
    corner_vals = sdf_grid.values.reshape(-1)[vid]  # (N,8)
    g = np.einsum("nk,nka->na", corner_vals, dw)
    norms = np.linalg.norm(g, axis=-1)
    safe = np.maximum(norms, 1e-12)
    upstream = (2.0 * (norms - 1.0) / safe / len(pts) * scale)[:, None] * g
    contrib = np.einsum("nka,na->nk", dw, upstream)[:, :, None]
    sdf_grid._scatter(vid, contrib)
    return float(np.mean((norms - 1.0) ** 2))


def feature_loss(rendered, target) -> float:
    """(1/R) sum_r ||F_hat(r) - F_target(r)||_1."""
    diff = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(np.sum(np.abs(diff), axis=-1)))


def feature_backward(rendered, target):
    diff = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.sign(diff) / len(diff)


def total_loss(parts: dict, weights: LossWeights) -> float:
    """Weighted sum; raises NonFiniteLoss naming the offending term."""
    for name, value in parts.items():
        if not np.isfinite(value):
            raise NonFiniteLoss(name, value)
    return (parts.get("photometric", 0.0)
            + weights.lambda_eik * parts.get("eikonal", 0.0)
            + weights.lambda_f * parts.get("feature", 0.0)
            + weights.lambda_v * parts.get("occupancy", 0.0))


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 4000
    rays_per_batch: int = 4096
    samples_per_ray: int = 80
    lr_peak: float = 1e-3
    lr_final: float = 1e-5
    warmup_frac: float = 0.25  # the reference run warms up 5k of 20k steps
    weights: LossWeights = field(default_factory=LossWeights)
    mask_dilation: int = 8
    seed: int = 0
    prune_weight: float = 1e-9  # skip value-branch scatter below this w_i


class _PixelPool:
    """Flattened (view, pixel) sampling domain with per-ray targets."""

    def __init__(self):
        self.entries = []  # (bank, idx array, rgb (N,3), feat target or None,
                           #  mask bit or None)

    def add(self, bank, idx, rgb, feat=None, bit=None):
        self.entries.append((bank, idx, rgb, feat, bit))
        return self

    def totals(self):
        return np.array([len(e[1]) for e in self.entries])

    def draw(self, count, rng):
        counts = self.totals()
        offsets = np.concatenate([[0], np.cumsum(counts)])
        pick = rng.integers(0, offsets[-1], size=count)
        out = []
        for j, (bank, idx, rgb, feat, bit) in enumerate(self.entries):
            sel = pick[(pick >= offsets[j]) & (pick < offsets[j + 1])] - offsets[j]
            if len(sel) == 0:
                continue
            ids = idx[sel]
            out.append((bank, ids, rgb[sel],
                        None if feat is None else feat[sel],
                        None if bit is None else bit[sel]))
        return out


def _pool_from_views(dataset: SceneDataset, banks, view_ids, masks=None,
                     feature_maps=None, dilation=0):
    pool = _PixelPool()
    struct = None
    if dilation > 0:
        y, x = np.ogrid[-dilation:dilation + 1, -dilation:dilation + 1]
        struct = x * x + y * y <= dilation * dilation
    for vid in view_ids:
        bank = banks[vid]
        view = dataset.view(vid)
        img = dataset.load_image(view)
        idx = np.arange(len(bank))
        bit = None
        if masks is not None:
            binary = masks[vid].binary
            img = img * binary[:, :, None]
            allowed = ndimage.binary_dilation(binary, structure=struct) if struct is not None else binary
            keep = allowed[bank.py, bank.px]
            idx = idx[keep]
            bit = binary[bank.py[idx], bank.px[idx]].astype(np.float64)
        rgb = img[bank.py[idx], bank.px[idx]]
        feat = None
        if feature_maps is not None:
            fmap = feature_maps[vid]
            feat = fmap.lookup(bank.px[idx], bank.py[idx],
                               bank.camera.width, bank.camera.height)
        pool.add(bank, idx, rgb, feat, bit)
    return pool


def train_step(sdf: VoxelGrid, color: VoxelGrid, s_param: ScalarParam,
               pool: _PixelPool, optimizer: Adam, lr: float, rng,
               config: TrainConfig, feature: VoxelGrid = None,
               occupancy: VoxelGrid = None) -> dict:
    """One optimization step of the stage-2 objective (feature and occupancy
    branches are active only when those grids are passed)."""
    n = config.samples_per_ray
    w = config.weights
    batch = pool.draw(config.rays_per_batch, rng)
    optimizer.zero_grad()
    parts = {"photometric": 0.0, "eikonal": 0.0, "feature": 0.0, "occupancy": 0.0}

    total_rays = sum(len(e[1]) for e in batch)
    # each view contributes its sub-batch; upstream scales use the full-batch
    # ray count so per-view chunking leaves the batch-mean losses unchanged.
    # Positions and upstreams accumulate across views so every grid sees one
    # scatter per step instead of one per view.
    acc = {"flat": [], "sdf": [], "col": [], "col_w": [], "feat": [],
           "feat_w": [], "feat_flat": [], "occ": [], "occ_flat": [], "eik": []}
    for bank, ids, rgb, feat_t, bit in batch:
        R = len(ids)
        frac = R / total_rays
        pos, _ = _sample_positions(bank, ids, n, rng)
        flat = pos.reshape(-1, 3)
        sdf_vals = sdf.sample(flat)[:, 0].reshape(R, n)
        s = s_param.item
        weights = render_weights_from_sdf(sdf_vals, s)

        col = color.sample(flat).reshape(R, n, 3)
        rendered = render_along_ray(weights, col)
        parts["photometric"] += photometric_loss(rendered, rgb) * frac
        d_render = photometric_backward(rendered, rgb) * frac
        d_w, d_col = render_along_ray_backward(weights, col, d_render)

        if feature is not None and w.lambda_f > 0 and feat_t is not None:
            fvals = feature.sample(flat).reshape(R, n, -1)
            f_hat = render_along_ray(weights, fvals)
            parts["feature"] += feature_loss(f_hat, feat_t) * frac
            d_fhat = feature_backward(f_hat, feat_t) * w.lambda_f * frac
            d_w_f, d_f = render_along_ray_backward(weights, fvals, d_fhat)
            d_w = d_w + d_w_f
            acc["feat"].append(d_f.reshape(-1, d_f.shape[-1]))
            acc["feat_w"].append(weights.weights.reshape(-1))
            acc["feat_flat"].append(flat)

        acc["flat"].append(flat)
        acc["col"].append(d_col.reshape(-1, 3))
        acc["col_w"].append(weights.weights.reshape(-1))

        d_alpha = compose_weights_backward(weights, d_w)
        d_sdf, d_s = sdf_to_alpha_backward(sdf_vals, s, d_alpha)
        acc["sdf"].append(d_sdf.reshape(-1, 1))
        s_param.accumulate(d_s)

        interior = sdf.interior_mask(flat)
        if interior.any():
            acc["eik"].append(flat[interior])

        if occupancy is not None and w.lambda_v > 0 and bit is not None:
            logits = occupancy.sample(flat)[:, 0].reshape(R, n)
            probs, cache = occupancy_forward_batch(logits, weights.weights)
            parts["occupancy"] += bce_loss(probs, bit) * frac
            d_p = bce_backward(probs, bit) * w.lambda_v * frac
            acc["occ"].append(occupancy_forward_backward(cache, weights.weights,
                                                         d_p).reshape(-1, 1))
            acc["occ_flat"].append(flat)

    all_flat = np.concatenate(acc["flat"])
    sdf.backprop(all_flat, np.concatenate(acc["sdf"]), with_position_grad=False)
    _pruned_backprop(color, all_flat, np.concatenate(acc["col_w"]),
                     np.concatenate(acc["col"]), config.prune_weight)
    if acc["feat"]:
        _pruned_backprop(feature, np.concatenate(acc["feat_flat"]),
                         np.concatenate(acc["feat_w"]),
                         np.concatenate(acc["feat"]), config.prune_weight)
    if acc["occ"]:
        occupancy.backprop(np.concatenate(acc["occ_flat"]),
                           np.concatenate(acc["occ"]), with_position_grad=False)
    if acc["eik"]:
        pts = np.concatenate(acc["eik"])
        parts["eikonal"] = eikonal_backward(sdf, pts, scale=w.lambda_eik)

    total = total_loss(parts, w)  # raises on non-finite terms
    parts["total"] = total
    optimizer.step(lr=lr)
    return parts


def _pruned_backprop(grid: VoxelGrid, flat_pos, ray_weights, upstream, threshold):
    """Scatter only samples whose rendering weight clears the threshold; the
    skipped contributions are upstream-scaled by those weights and therefore
    numerically negligible."""
    if threshold > 0:
        keep = (ray_weights.reshape(-1) > threshold)
        if not keep.all():
            grid.backprop(flat_pos[keep], upstream[keep], with_position_grad=False)
            return
    grid.backprop(flat_pos, upstream, with_position_grad=False)


def resample_grid(dst: VoxelGrid, src: VoxelGrid):
    """Trilinearly resample src onto dst's nodes (both share bounds)."""
    ax = [np.linspace(dst.bounds_min[i], dst.bounds_max[i], dst.resolution[i])
          for i in range(3)]
    X, Y, Z = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    dst.values[...] = src.sample(pts).reshape(*dst.resolution, dst.channels)


# Coarse-to-fine resolution schedule: (downsample factor, fraction of steps).
# A grid too coarse to represent thin floating surfaces settles the gross
# geometry first; the ghost geometry that plagues direct full-resolution
# fits (a spurious sheet whose rendered color happens to match every
# training view) never gets a chance to form.
PRETRAIN_STAGES = ((4, 0.2), (2, 0.2), (1, 0.6))
_MIN_STAGE_RES = 12
_MIN_STAGED_STEPS = 150


def _pretrain_stage_plan(resolution, steps):
    if steps < _MIN_STAGED_STEPS:
        return [(tuple(resolution), steps)]
    plan = []
    used = 0
    for i, (div, frac) in enumerate(PRETRAIN_STAGES):
        res = tuple(max(_MIN_STAGE_RES, r // div) for r in resolution)
        n = steps - used if i == len(PRETRAIN_STAGES) - 1 else int(round(frac * steps))
        used += n
        if plan and plan[-1][0] == res:
            plan[-1] = (res, plan[-1][1] + n)
        else:
            plan.append((res, n))
    return plan


def pretrain(sdf: VoxelGrid, color: VoxelGrid, s_param: ScalarParam,
             dataset: SceneDataset, config: TrainConfig, view_ids=None,
             banks=None):
    """Stage 0: fit the neural field to full multi-view images with
    L_c + lambda_eik * L_eik, growing the grids coarse-to-fine.
    Returns the per-step loss trace."""
    view_ids = view_ids if view_ids is not None else [v.view_id for v in dataset.views]
    banks = banks or ray_bank(dataset, view_ids)
    cfg = replace(config, weights=replace(config.weights, lambda_f=0.0, lambda_v=0.0))
    pool = _pool_from_views(dataset, banks, view_ids)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    step_no = 0
    prev = None
    for res, n_steps in _pretrain_stage_plan(sdf.resolution, cfg.steps):
        if res == tuple(sdf.resolution):
            cur_sdf, cur_color = sdf, color
        else:
            cur_sdf = VoxelGrid(res, sdf.bounds_min, sdf.bounds_max, channels=1)
            cur_color = VoxelGrid(res, color.bounds_min, color.bounds_max,
                                  channels=color.channels)
        if prev is not None:
            resample_grid(cur_sdf, prev[0])
            resample_grid(cur_color, prev[1])
        elif cur_sdf is not sdf:
            resample_grid(cur_sdf, sdf)
            resample_grid(cur_color, color)
        optimizer = Adam([cur_sdf, cur_color, s_param])
        for _ in range(n_steps):
            step_no += 1
            lr = lr_schedule(step_no, cfg.steps, cfg.lr_peak, cfg.lr_final,
                             cfg.warmup_frac)
            parts = train_step(cur_sdf, cur_color, s_param, pool, optimizer,
                               lr, rng, cfg)
            trace.append(parts["total"])
        prev = (cur_sdf, cur_color)
    if prev is not None and prev[0] is not sdf:
        resample_grid(sdf, prev[0])
        resample_grid(color, prev[1])
    return trace


def finetune(sdf: VoxelGrid, color: VoxelGrid, feature: VoxelGrid,
             occupancy: VoxelGrid, s_param: ScalarParam,
             dataset: SceneDataset, masks: dict, feature_maps: dict,
             config: TrainConfig, view_ids=None, banks=None):
    """Stage 2: finetune on masked images, distill features, refresh the
    occupancy field. Rays are restricted to a dilation of the converged mask.
    Returns the per-step loss trace."""
    view_ids = view_ids if view_ids is not None else sorted(masks)
    banks = banks or ray_bank(dataset, view_ids)
    fmaps = feature_maps if config.weights.lambda_f > 0 else None
    pool = _pool_from_views(dataset, banks, view_ids, masks=masks,
                            feature_maps=fmaps, dilation=config.mask_dilation)
    params = [sdf, color, s_param]
    if config.weights.lambda_f > 0:
        params.append(feature)
    if config.weights.lambda_v > 0 and occupancy is not None:
        params.append(occupancy)
    optimizer = Adam(params)
    rng = np.random.default_rng(config.seed)
    trace = []
    for step in range(1, config.steps + 1):
        lr = lr_schedule(step, config.steps, config.lr_peak, config.lr_final,
                         config.warmup_frac)
        parts = train_step(
            sdf, color, s_param, pool, optimizer, lr, rng, config,
            feature=feature if config.weights.lambda_f > 0 else None,
            occupancy=occupancy if config.weights.lambda_v > 0 else None)
        trace.append(parts["total"])
    return trace


# -- deterministic full-view rendering (evaluation) ----------------------------


def render_color_view(sdf: VoxelGrid, color: VoxelGrid, s: float,
                      bank: ViewRays, n_samples: int, chunk=20000):
    """Composited color image (H,W,3); black background."""
    cam = bank.camera
    out = np.zeros((cam.height * cam.width, 3))
    flat_px = bank.py * cam.width + bank.px
    rng = np.random.default_rng(0)
    vals = np.empty((len(bank), 3))
    for lo in range(0, len(bank), chunk):
        idx = np.arange(lo, min(lo + chunk, len(bank)))
        pos, _ = _sample_positions(bank, idx, n_samples, rng, jitter=False)
        flat = pos.reshape(-1, 3)
        sdf_vals = sdf.sample(flat)[:, 0].reshape(len(idx), n_samples)
        weights = render_weights_from_sdf(sdf_vals, s)
        col = color.sample(flat).reshape(len(idx), n_samples, 3)
        vals[idx] = render_along_ray(weights, col)
    out[flat_px] = vals
    return np.clip(out.reshape(cam.height, cam.width, 3), 0.0, 1.0)


def render_feature_view(sdf: VoxelGrid, feature: VoxelGrid, s: float,
                        bank: ViewRays, n_samples: int, chunk=20000):
    """Composited feature image (H,W,F)."""
    cam = bank.camera
    F = feature.channels
    out = np.zeros((cam.height * cam.width, F))
    flat_px = bank.py * cam.width + bank.px
    rng = np.random.default_rng(0)
    vals = np.empty((len(bank), F))
    for lo in range(0, len(bank), chunk):
        idx = np.arange(lo, min(lo + chunk, len(bank)))
        pos, _ = _sample_positions(bank, idx, n_samples, rng, jitter=False)
        flat = pos.reshape(-1, 3)
        sdf_vals = sdf.sample(flat)[:, 0].reshape(len(idx), n_samples)
        weights = render_weights_from_sdf(sdf_vals, s)
        fv = feature.sample(flat).reshape(len(idx), n_samples, F)
        vals[idx] = render_along_ray(weights, fv)
    out[flat_px] = vals
    return out.reshape(cam.height, cam.width, F)
