"""Stage 1: lift 2D segmenter masks into the 3D occupancy field.

Per ray, the rendered mask probability is sigmoid(max_i logit_i * w_i) where
w_i are the volume-rendering weights of the frozen SDF field (stop-gradient);
training minimizes binary cross-entropy against segmenter masks. The round
loop alternates occupancy training with prompt regeneration until rendered
and segmenter masks agree.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .fields import VoxelGrid
from .geometry import Camera, RaySamples, generate_rays_batch, sample_stratified_batch
from .masks import Mask, mask_iou
from .optim import Adam
from .prompts import make_prompts
from .render import RenderWeights, render_weights_from_sdf, sigmoid
from .masks import EmptyMask
from .scenes import SceneDataset, save_mask_u8
from .segmenter import SegmentationFailed, SegmenterUnavailable, SegmentRequest

log = logging.getLogger(__name__)

BCE_EPS = 1e-7

# Samples whose rendering weight falls at or below this floor are invisible
# along the ray and do not participate in the max-aggregation. Without the
# floor, the mandatory zero weight of the final sample pins the max at
# logit*0 = 0 whenever all logits are negative, freezing training at init;
# near-zero weights likewise scale the argmax subgradient below Adam's
# epsilon. A sample below 1e-4 contributes under 0.01% of the pixel.
WEIGHT_FLOOR = 1e-4


class InitialSegmentationFailed(Exception):
    """The user's initial view could not be segmented; nothing to lift."""


@dataclass
class LiftingConfig:
    rays_per_batch: int = 4096
    samples_per_ray: int = 80
    steps_per_round: int = 1000
    max_rounds: int = 10
    converge_iou: float = 0.98
    k_prompts: int = 3
    lr: float = 0.1
    seed: int = 0
    soft_max_temperature: float = 0.0  # 0 = hard max (argmax subgradient)
    background_logit: float = -3.0
    occupancy_resolution: tuple = (96, 96, 96)
    # Candidate masks that barely overlap the rendered coarse mask are almost
    # always mis-prompted (the prompts fell on a distractor); accept only when
    # IoU(coarse, candidate) clears this floor, else retry the view next round.
    accept_iou: float = 0.2
    # Training burst after each newly accepted mask, so views further from the
    # prompt see an occupancy field already shaped by their nearer neighbours.
    view_interval_steps: int = 1000


@dataclass
class LiftingState:
    occupancy: VoxelGrid
    per_view_sam: dict = field(default_factory=dict)  # view_id -> Mask
    iteration: int = 0
    convergence_iou: float = 0.0
    per_view_iou: dict = field(default_factory=dict)
    iou_trace: list = field(default_factory=list)
    converged: bool = False


# -- forward / backward of the max-aggregation -------------------------------


def occupancy_forward_batch(logits, omega, soft_temperature=0.0):
    """sigmoid(max_i logit_i * w_i) per ray, over visible samples only.

    Samples with weight at or below WEIGHT_FLOOR are excluded from the max.
    Returns (probs (R,), cache for the backward pass). Rays with no visible
    samples come out at exactly 0.5 with zero gradient.
    """
    omega = np.asarray(omega, dtype=np.float64)
    visible = omega > WEIGHT_FLOOR
    z = np.where(visible, np.asarray(logits, dtype=np.float64) * omega, -np.inf)
    degenerate = ~visible.any(axis=-1)
    if soft_temperature > 0:
        tau = soft_temperature
        zmax = np.where(degenerate, 0.0, z.max(axis=-1))
        e = np.where(visible, np.exp((z - zmax[:, None]) / tau), 0.0)
        lse = np.where(degenerate, 0.0,
                       zmax + tau * np.log(np.maximum(e.sum(axis=-1), 1e-300)))
        probs = sigmoid(lse)
        return probs, ("soft", e, tau, probs, degenerate)
    arg = np.argmax(z, axis=-1)
    agg = np.where(degenerate, 0.0, np.take_along_axis(z, arg[:, None], axis=-1)[:, 0])
    probs = sigmoid(agg)
    return probs, ("hard", arg, probs, degenerate)


def occupancy_forward_backward(cache, omega, upstream):
    """dL/dlogits given dL/dprob; the stop-gradient keeps omega constant."""
    kind = cache[0]
    if kind == "hard":
        _, arg, probs, degenerate = cache
        dz = np.where(degenerate, 0.0, upstream * probs * (1.0 - probs))  # (R,)
        dlogits = np.zeros_like(omega)
        np.put_along_axis(dlogits, arg[:, None],
                          (dz * np.take_along_axis(omega, arg[:, None], axis=-1)[:, 0])[:, None],
                          axis=-1)
        return dlogits
    _, e, tau, probs, degenerate = cache
    dagg = np.where(degenerate, 0.0, upstream * probs * (1.0 - probs))
    soft = e / np.maximum(e.sum(axis=-1, keepdims=True), 1e-300)
    return dagg[:, None] * soft * omega


def occupancy_forward(samples: RaySamples, occupancy: VoxelGrid,
                      sdf_weights: RenderWeights, soft_temperature=0.0) -> float:
    """Single-ray mask probability (the spec-level operation)."""
    logits = occupancy.sample(samples.positions)[:, 0][None]
    omega = np.atleast_2d(sdf_weights.weights)
    probs, cache = occupancy_forward_batch(logits, omega, soft_temperature)
    p = float(probs[0])
    if cache[-1][0]:
        log.debug("degenerate ray: no sample has visible rendering weight")
    return p


def bce_loss(prediction, target) -> float:
    """Mean binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    p = np.clip(np.asarray(prediction, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(target, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))


def bce_backward(prediction, target):
    """dL/dprediction for the batch-mean BCE (zero outside the clamp)."""
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return np.where(inside, (pc - t) / (pc * (1.0 - pc)), 0.0) / p.size


# -- ray banks ----------------------------------------------------------------


class ViewRays:
    """Cached per-pixel rays for one view (valid pixels only)."""

    def __init__(self, camera: Camera, bounds_min, bounds_max):
        xs, ys = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
        o, d, t0, t1, valid = generate_rays_batch(camera, xs.ravel(), ys.ravel(),
                                                  bounds_min, bounds_max)
        self.camera = camera
        self.valid = valid
        self.px = xs.ravel()[valid]
        self.py = ys.ravel()[valid]
        self.origins = o[valid]
        self.dirs = d[valid]
        self.t0 = t0[valid]
        self.t1 = t1[valid]

    def __len__(self):
        return len(self.px)


def ray_bank(dataset: SceneDataset, view_ids=None):
    ids = view_ids if view_ids is not None else [v.view_id for v in dataset.views]
    return {vid: ViewRays(dataset.view(vid).camera, dataset.bounds_min,
                          dataset.bounds_max) for vid in ids}


def _sample_positions(rays: ViewRays, idx, n, rng, jitter=True):
    t, _ = sample_stratified_batch(rays.t0[idx], rays.t1[idx], n, rng, jitter=jitter)
    pos = rays.origins[idx, None, :] + t[:, :, None] * rays.dirs[idx, None, :]
    return pos, t


class FrozenView:
    """Per-view sample positions and rendering weights, fixed for all of
    Stage 1, stored ragged (CSR) over the visible samples only.

    The SDF field is frozen during lifting, so the weights never change;
    computing them once per view keeps the SDF out of the training loop.
    Samples at or below WEIGHT_FLOOR can never win the max-aggregation, so
    dropping them changes nothing downstream while cutting the occupancy
    lookups per step to the visible band (typically a small fraction of the
    ray), which lets the freeze sample densely.
    """

    def __init__(self, bank: ViewRays, sdf_grid: VoxelGrid, s: float,
                 n_samples: int, chunk=20000):
        rng = np.random.default_rng(0)  # unused with jitter off
        self.bank = bank
        counts = np.zeros(len(bank), dtype=np.int64)
        pos_parts, om_parts = [], []
        for lo in range(0, len(bank), chunk):
            idx = np.arange(lo, min(lo + chunk, len(bank)))
            pos, _ = _sample_positions(bank, idx, n_samples, rng, jitter=False)
            sdf = sdf_grid.sample(pos.reshape(-1, 3))[:, 0].reshape(len(idx), n_samples)
            omega = render_weights_from_sdf(sdf, s).weights
            visible = omega > WEIGHT_FLOOR
            counts[idx] = visible.sum(axis=1)
            pos_parts.append(pos[visible].astype(np.float32))
            om_parts.append(omega[visible].astype(np.float32))
        self.counts = counts
        self.ptr = np.concatenate([[0], np.cumsum(counts)])
        self.pos = np.concatenate(pos_parts) if pos_parts else np.zeros((0, 3), np.float32)
        self.omega = np.concatenate(om_parts) if om_parts else np.zeros(0, np.float32)

    @classmethod
    def from_dense(cls, positions, omega, bank=None):
        """Build from dense (R, n, 3) positions and (R, n) weights."""
        fv = cls.__new__(cls)
        fv.bank = bank
        omega = np.asarray(omega)
        visible = omega > WEIGHT_FLOOR
        fv.counts = visible.sum(axis=1).astype(np.int64)
        fv.ptr = np.concatenate([[0], np.cumsum(fv.counts)])
        fv.pos = np.asarray(positions)[visible].astype(np.float32)
        fv.omega = omega[visible].astype(np.float32)
        return fv

    def gather(self, sel):
        """Visible samples of the selected rays.

        Returns (positions (K,3) float64, omega (K,), ray_id (K,) indexing
        into sel, counts (len(sel),)).
        """
        cnt = self.counts[sel]
        total = int(cnt.sum())
        ray_id = np.repeat(np.arange(len(sel)), cnt)
        ends = np.cumsum(cnt)
        offs = np.arange(total) - np.repeat(ends - cnt, cnt)
        flat = np.repeat(self.ptr[sel], cnt) + offs
        return (self.pos[flat].astype(np.float64),
                self.omega[flat].astype(np.float64), ray_id, cnt)

    def __len__(self):
        return len(self.counts)


def freeze_views(banks, sdf_grid: VoxelGrid, s: float, n_samples: int):
    return {vid: FrozenView(bank, sdf_grid, s, n_samples)
            for vid, bank in banks.items()}


def lifting_step(occupancy: VoxelGrid, frozen, supervised, optimizer: Adam,
                 rng, config: LiftingConfig) -> float:
    """One BCE gradient step on the occupancy grid; SDF stays frozen.

    ``frozen`` maps view_id -> FrozenView; ``supervised`` maps view_id ->
    target bit array aligned with the view's ray bank. Returns the batch
    mean BCE.
    """
    view_ids = sorted(supervised)
    counts = np.array([len(frozen[v]) for v in view_ids])
    total = counts.sum()
    pick = rng.integers(0, total, size=config.rays_per_batch)
    offsets = np.concatenate([[0], np.cumsum(counts)])

    pos_all, omega_all, ray_all, targets_all = [], [], [], []
    rays_so_far = 0
    for j, vid in enumerate(view_ids):
        sel = pick[(pick >= offsets[j]) & (pick < offsets[j + 1])] - offsets[j]
        if len(sel) == 0:
            continue
        pos, omega, ray_id, _ = frozen[vid].gather(sel)
        pos_all.append(pos)
        omega_all.append(omega)
        ray_all.append(ray_id + rays_so_far)
        targets_all.append(supervised[vid][sel].astype(np.float64))
        rays_so_far += len(sel)

    pos = np.concatenate(pos_all)
    omega = np.concatenate(omega_all)
    ray_id = np.concatenate(ray_all)
    targets = np.concatenate(targets_all)
    logits = occupancy.sample(pos)[:, 0]
    probs, arg, degenerate = _ragged_forward(
        logits, omega, ray_id, rays_so_far, config.soft_max_temperature)
    loss = bce_loss(probs, targets)
    dprob = bce_backward(probs, targets)

    optimizer.zero_grad()
    dz = np.where(degenerate, 0.0, dprob * probs * (1.0 - probs))
    live = arg[~degenerate]
    occupancy.backprop(pos[live],
                       (dz[~degenerate] * omega[live])[:, None],
                       with_position_grad=False)
    optimizer.step(lr=config.lr)
    return loss


def _ragged_forward(logits, omega, ray_id, n_rays, soft_temperature=0.0):
    """Max-aggregation over CSR visible samples; same math as
    occupancy_forward_batch on the padded layout (hard max only).

    Returns (probs (n_rays,), argmax flat index per ray, degenerate mask).
    Rays without visible samples come out at 0.5 with zero gradient.
    """
    if soft_temperature > 0:
        raise NotImplementedError("soft aggregation requires the dense path")
    z = logits * omega
    agg = np.full(n_rays, -np.inf)
    np.maximum.at(agg, ray_id, z)
    degenerate = ~np.isfinite(agg)
    # first flat sample index attaining each ray's max (dense-argmax tie rule)
    arg = np.full(n_rays, np.iinfo(np.int64).max, dtype=np.int64)
    idx = np.flatnonzero(z == agg[ray_id])
    np.minimum.at(arg, ray_id[idx], idx)
    probs = sigmoid(np.where(degenerate, 0.0, agg))
    return probs, arg, degenerate


def render_coarse_mask(occupancy: VoxelGrid, frozen: FrozenView,
                       soft_temperature=0.0, chunk=20000) -> Mask:
    """Full-image occupancy forward; pixels whose rays miss the scene box or
    see no visible sample render as 0."""
    bank = frozen.bank
    cam = bank.camera
    values = np.zeros(cam.height * cam.width, dtype=np.float64)
    flat_px = bank.py * cam.width + bank.px
    out = np.empty(len(bank))
    for lo in range(0, len(bank), chunk):
        idx = np.arange(lo, min(lo + chunk, len(bank)))
        pos, omega, ray_id, _ = frozen.gather(idx)
        logits = occupancy.sample(pos)[:, 0]
        probs, _, degenerate = _ragged_forward(logits, omega, ray_id,
                                               len(idx), soft_temperature)
        out[idx] = np.where(degenerate, 0.0, probs)  # degenerate rays render 0
    values[flat_px] = out
    return Mask(values=values.reshape(cam.height, cam.width))


# -- the iterative loop --------------------------------------------------------


def view_order_from(dataset: SceneDataset, initial_view: int, view_ids):
    """View ids sorted by ascending angular distance of camera centers about
    the scene center (initial view first)."""
    center = 0.5 * (dataset.bounds_min + dataset.bounds_max)

    def unit(vid):
        v = dataset.view(vid).camera.translation - center
        return v / np.linalg.norm(v)

    u0 = unit(initial_view)
    ang = {vid: float(np.arccos(np.clip(unit(vid) @ u0, -1, 1))) for vid in view_ids}
    return sorted(view_ids, key=lambda vid: (ang[vid], vid))


def iterate_lifting(dataset: SceneDataset, sdf_grid: VoxelGrid, s: float,
                    segmenter, initial_prompt, config: LiftingConfig,
                    run_dir=None, view_ids=None) -> LiftingState:
    """Alternate occupancy training and prompt regeneration to convergence.

    Convergence: mean IoU between rendered and segmenter masks at or above
    config.converge_iou for two consecutive rounds, or the round limit.
    """
    view_ids = view_ids if view_ids is not None else [v.view_id for v in dataset.views]
    banks = ray_bank(dataset, view_ids)
    frozen = freeze_views(banks, sdf_grid, s, config.samples_per_ray)
    occupancy = VoxelGrid(config.occupancy_resolution, dataset.bounds_min,
                          dataset.bounds_max, channels=1,
                          fill=config.background_logit)
    state = LiftingState(occupancy=occupancy)
    optimizer = Adam([occupancy], lr=config.lr)
    rng = np.random.default_rng(config.seed)

    init_view = initial_prompt.view_id
    try:
        resp = segmenter.segment(SegmentRequest(
            view_id=init_view, prompt=initial_prompt,
            image_ref=dataset.image_path_of(dataset.view(init_view))))
    except (SegmentationFailed, SegmenterUnavailable) as e:
        raise InitialSegmentationFailed(str(e)) from e
    state.per_view_sam[init_view] = resp.mask

    order = view_order_from(dataset, init_view, view_ids)
    converged_views = set()
    prev_ok = False

    for rnd in range(1, config.max_rounds + 1):
        state.iteration = rnd
        supervised = {vid: _targets(banks[vid], m)
                      for vid, m in state.per_view_sam.items()}
        for _ in range(config.steps_per_round):
            lifting_step(occupancy, frozen, supervised, optimizer, rng, config)

        # Query views nearest-first, training after each accepted mask: views
        # far from the prompt then render against an occupancy field already
        # carved by their nearer neighbours instead of round-start noise.
        for vid in order:
            if vid in converged_views:
                continue
            coarse_v = render_coarse_mask(occupancy, frozen[vid],
                                          config.soft_max_temperature)
            try:
                prompt = make_prompts(coarse_v, config.k_prompts,
                                      seed=config.seed + 1000 * rnd + vid,
                                      view_id=vid)
                resp = segmenter.segment(SegmentRequest(
                    view_id=vid, prompt=prompt,
                    image_ref=dataset.image_path_of(dataset.view(vid))))
            except EmptyMask:
                log.info("round %d view %d: empty coarse mask, retry next round",
                         rnd, vid)
                continue
            except (SegmentationFailed, SegmenterUnavailable) as e:
                log.warning("round %d view %d: segmenter failed (%s), retrying",
                            rnd, vid, e)
                continue
            if mask_iou(coarse_v, resp.mask) < config.accept_iou:
                log.info("round %d view %d: mask rejected (low agreement), "
                         "retry next round", rnd, vid)
                continue
            previous = state.per_view_sam.get(vid)
            state.per_view_sam[vid] = resp.mask
            changed = (previous is None
                       or mask_iou(previous, resp.mask) < config.converge_iou)
            if changed:
                supervised[vid] = _targets(banks[vid], resp.mask)
                for _ in range(config.view_interval_steps):
                    lifting_step(occupancy, frozen, supervised, optimizer,
                                 rng, config)

        coarse = {vid: render_coarse_mask(occupancy, frozen[vid],
                                          config.soft_max_temperature)
                  for vid in order}
        ious = {vid: mask_iou(coarse[vid], state.per_view_sam[vid])
                for vid in state.per_view_sam}
        converged_views = {vid for vid, v in ious.items()
                           if v >= config.converge_iou}
        state.per_view_iou = ious
        state.convergence_iou = float(np.mean(list(ious.values())))
        state.iou_trace.append(state.convergence_iou)

        if run_dir is not None:
            _write_round_artifacts(run_dir, rnd, coarse, state)

        ok = (state.convergence_iou >= config.converge_iou
              and len(state.per_view_sam) == len(view_ids))
        if ok and prev_ok:
            state.converged = True
            break
        prev_ok = ok
    return state


def _targets(bank: ViewRays, mask: Mask):
    return mask.binary[bank.py, bank.px]


def _write_round_artifacts(run_dir, rnd, coarse, state: LiftingState):
    d = os.path.join(run_dir, f"round_{rnd}")
    os.makedirs(d, exist_ok=True)
    for vid, m in coarse.items():
        save_mask_u8(os.path.join(d, f"view_{vid}_coarse.png"), m.binary)
    for vid, m in state.per_view_sam.items():
        save_mask_u8(os.path.join(d, f"view_{vid}_sam.png"), m.binary)
    with open(os.path.join(d, "metrics.json"), "w") as f:
        json.dump({"convergence_iou": state.convergence_iou,
                   "per_view_iou": {str(k): v for k, v in
                                    sorted(state.per_view_iou.items())}},
                  f, indent=1)
