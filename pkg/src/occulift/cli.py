"""Command-line pipeline driver.

Subcommands compose through on-disk artifacts under the run directory:

  synth    -> posed synthetic dataset (images, gt masks, feature maps)
  pretrain -> sdf.olgrid, color.olgrid, s.json, pretrain_trace.json
  lift     -> occupancy.olgrid, round_k/ artifacts, masks_final/
  distill  -> *_finetuned.olgrid, feature.olgrid
  extract  -> mesh.obj
  eval     -> metrics.json

Configuration is one JSON file plus dot-path ``--set`` overrides; every
command drops a manifest.json (config snapshot, seed, git describe, wall
time). Exit codes: 0 ok, 2 config error, 3 segmenter failure, 4 non-finite
loss.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import subprocess
import sys
import time


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "dataset": None,
    "out": None,
    "seed": 0,
    "s_init": 30.0,
    "rays_per_batch": 4096,
    "samples_per_ray": 80,
    "grids": {
        "sdf": [128, 128, 128],
        "color": [128, 128, 128],
        "occupancy": [96, 96, 96],
        "feature": [64, 64, 64],
        "feature_channels": 32,
    },
    "pretrain": {
        "steps": 2000, "lr_peak": 1e-3, "lr_final": 1e-5,
        "warmup_frac": 0.25, "lambda_eik": 0.1,
    },
    "stage1": {
        "steps_per_round": 1000, "rounds": 10, "converge_iou": 0.98,
        "k_prompts": 3, "lr": 0.1, "soft_max_temperature": 0.0,
        "background_logit": -3.0, "accept_iou": 0.2,
        "view_interval_steps": 1000,
    },
    "stage2": {
        "steps": 4000, "lr_peak": 1e-3, "lr_final": 1e-5, "warmup_frac": 0.25,
        "lambda_eik": 0.1, "lambda_f": 0.1, "lambda_v": 0.01,
        "mask_dilation": 8,
    },
    "segmenter": {"oracle": {"erode_radius": 0, "flip_prob": 0.0,
                             "dropout_prob": 0.0, "seed": 0}},
    "prompt": {"view": 0, "points": [], "box": None},
    "heldout_views": [],
    "eval": {"mesh_samples": 100000, "iso": 0.0},
}


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_set(config, expr):
    if "=" not in expr:
        raise ConfigError(f"--set needs key=value, got {expr!r}")
    path, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    keys = path.split(".")
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def load_config(path, sets=()):
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                config = _deep_merge(config, json.load(f))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
    for expr in sets:
        _apply_set(config, expr)
    validate_config(config)
    return config


def validate_config(c):
    def positive(path, v):
        if not (isinstance(v, (int, float)) and v > 0):
            raise ConfigError(f"{path} must be positive, got {v!r}")

    positive("rays_per_batch", c["rays_per_batch"])
    positive("samples_per_ray", c["samples_per_ray"])
    positive("s_init", c["s_init"])
    positive("pretrain.steps", c["pretrain"]["steps"])
    positive("stage1.steps_per_round", c["stage1"]["steps_per_round"])
    positive("stage1.rounds", c["stage1"]["rounds"])
    if not (0 < c["stage1"]["converge_iou"] <= 1):
        raise ConfigError("stage1.converge_iou must lie in (0, 1]")
    for key in ("lambda_eik", "lambda_f", "lambda_v"):
        if c["stage2"][key] < 0:
            raise ConfigError(f"stage2.{key} must be nonnegative")
    seg = c["segmenter"]
    if sum(k in seg for k in ("oracle", "external")) != 1:
        raise ConfigError("segmenter must name exactly one of: oracle, external")


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(out_dir, command, config, seed, t0):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "git_describe": git_describe(),
        "wall_time_s": round(time.time() - t0, 3),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


# -- shared loading helpers ----------------------------------------------------


def _require(config, key):
    if not config.get(key):
        raise ConfigError(f"config.{key} is required for this command")
    return config[key]


def _load_dataset(config):
    from . import scenes

    path = _require(config, "dataset")
    try:
        return scenes.load_dataset(path)
    except scenes.DatasetError as e:
        raise ConfigError(str(e))


def _train_view_ids(dataset, config):
    held = set(config.get("heldout_views") or [])
    return [v.view_id for v in dataset.views if v.view_id not in held]


def _build_segmenter(config, dataset):
    from . import scenes
    from .segmenter import CorruptionModel, ExternalSegmenter, OracleSegmenter

    seg = config["segmenter"]
    if "external" in seg:
        cmd = seg["external"].get("command")
        if not cmd:
            raise ConfigError("segmenter.external.command is required")
        return ExternalSegmenter(cmd)
    scene, _ = scenes.load_scene(config["dataset"])
    if scene is None:
        raise ConfigError("oracle segmenter needs scene.json in the dataset")
    corr = CorruptionModel(
        erode_radius=int(seg["oracle"].get("erode_radius", 0)),
        flip_prob=float(seg["oracle"].get("flip_prob", 0.0)),
        dropout_prob=float(seg["oracle"].get("dropout_prob", 0.0)),
        seed=int(seg["oracle"].get("seed", 0)),
    )
    cams = {v.view_id: v.camera for v in dataset.views}
    return OracleSegmenter(scene, cams, corruption=corr)


def _grid_path(out, name):
    return os.path.join(out, f"{name}.olgrid")


def _load_s(out, name="s.json"):
    with open(os.path.join(out, name)) as f:
        return float(json.load(f)["s"])


def _save_s(out, value, name="s.json"):
    with open(os.path.join(out, name), "w") as f:
        json.dump({"s": float(value)}, f)


def _stage2_config(config):
    from .distill import LossWeights, TrainConfig

    s2 = config["stage2"]
    return TrainConfig(
        steps=int(s2["steps"]),
        rays_per_batch=int(config["rays_per_batch"]),
        samples_per_ray=int(config["samples_per_ray"]),
        lr_peak=float(s2["lr_peak"]), lr_final=float(s2["lr_final"]),
        warmup_frac=float(s2["warmup_frac"]),
        weights=LossWeights(lambda_eik=float(s2["lambda_eik"]),
                            lambda_f=float(s2["lambda_f"]),
                            lambda_v=float(s2["lambda_v"])),
        mask_dilation=int(s2["mask_dilation"]),
        seed=int(config["seed"]),
    )


# -- commands --------------------------------------------------------------------


def cmd_synth(args):
    from . import scenes

    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ConfigError(f"output dir {out!r} exists and is non-empty "
                          "(use --force to overwrite)")
    t0 = time.time()
    scenes.generate_synthetic_dataset(
        preset=args.preset, out_dir=out, views=args.views,
        width=args.width, height=args.height,
        feature_channels=args.feature_channels,
        feature_seed=args.seed + 1234,
        with_features=not args.no_features,
    )
    write_manifest(out, "synth", vars(args) | {"preset": args.preset},
                   args.seed, t0)
    print(f"synth: wrote {args.views} views to {out}")
    return 0


def cmd_pretrain(config):
    import numpy as np

    from .distill import LossWeights, TrainConfig, pretrain
    from .fields import make_sphere_sdf_grid, VoxelGrid
    from .optim import LogScalarParam

    t0 = time.time()
    dataset = _load_dataset(config)
    out = _require(config, "out")
    os.makedirs(out, exist_ok=True)
    g = config["grids"]
    sdf = make_sphere_sdf_grid(g["sdf"], dataset.bounds_min, dataset.bounds_max)
    color = VoxelGrid(g["color"], dataset.bounds_min, dataset.bounds_max,
                      channels=3, fill=0.5)
    s_param = LogScalarParam(config["s_init"])
    p = config["pretrain"]
    cfg = TrainConfig(
        steps=int(p["steps"]), rays_per_batch=int(config["rays_per_batch"]),
        samples_per_ray=int(config["samples_per_ray"]),
        lr_peak=float(p["lr_peak"]), lr_final=float(p["lr_final"]),
        warmup_frac=float(p["warmup_frac"]),
        weights=LossWeights(lambda_eik=float(p["lambda_eik"]),
                            lambda_f=0.0, lambda_v=0.0),
        seed=int(config["seed"]),
    )
    trace = pretrain(sdf, color, s_param, dataset, cfg,
                     view_ids=_train_view_ids(dataset, config))
    sdf.save(_grid_path(out, "sdf"))
    color.save(_grid_path(out, "color"))
    _save_s(out, s_param.item)
    with open(os.path.join(out, "pretrain_trace.json"), "w") as f:
        json.dump({"loss": [round(float(x), 8) for x in trace]}, f)
    write_manifest(out, "pretrain", config, config["seed"], t0)
    print(f"pretrain: {cfg.steps} steps, final loss {trace[-1]:.5f}")
    return 0


def cmd_lift(config):
    from .fields import VoxelGrid
    from .lifting import LiftingConfig, iterate_lifting
    from .prompts import PromptSet
    from .scenes import save_mask_u8

    t0 = time.time()
    dataset = _load_dataset(config)
    out = _require(config, "out")
    sdf = VoxelGrid.load(_grid_path(out, "sdf"))
    s = _load_s(out)
    prompt_cfg = config["prompt"]
    if not prompt_cfg.get("points"):
        raise ConfigError("prompt.points is required for lift")
    prompt = PromptSet(points=tuple(tuple(p) for p in prompt_cfg["points"]),
                       box=tuple(prompt_cfg["box"]) if prompt_cfg.get("box") else None,
                       view_id=int(prompt_cfg["view"]))
    s1 = config["stage1"]
    cfg = LiftingConfig(
        rays_per_batch=int(config["rays_per_batch"]),
        samples_per_ray=int(config["samples_per_ray"]),
        steps_per_round=int(s1["steps_per_round"]),
        max_rounds=int(s1["rounds"]),
        converge_iou=float(s1["converge_iou"]),
        k_prompts=int(s1["k_prompts"]), lr=float(s1["lr"]),
        seed=int(config["seed"]),
        soft_max_temperature=float(s1["soft_max_temperature"]),
        background_logit=float(s1["background_logit"]),
        occupancy_resolution=tuple(config["grids"]["occupancy"]),
        accept_iou=float(s1["accept_iou"]),
        view_interval_steps=int(s1["view_interval_steps"]),
    )
    segmenter = _build_segmenter(config, dataset)
    try:
        state = iterate_lifting(dataset, sdf, s, segmenter, prompt, cfg,
                                run_dir=out,
                                view_ids=_train_view_ids(dataset, config))
    finally:
        if hasattr(segmenter, "close"):
            segmenter.close()
    state.occupancy.save(_grid_path(out, "occupancy"))
    mask_dir = os.path.join(out, "masks_final")
    os.makedirs(mask_dir, exist_ok=True)
    for vid, mask in sorted(state.per_view_sam.items()):
        save_mask_u8(os.path.join(mask_dir, f"view_{vid}.png"), mask.binary)
    with open(os.path.join(out, "lift_metrics.json"), "w") as f:
        json.dump({
            "converged": state.converged,
            "rounds": state.iteration,
            "convergence_iou": round(state.convergence_iou, 8),
            "iou_trace": [round(x, 8) for x in state.iou_trace],
        }, f, indent=1, sort_keys=True)
    write_manifest(out, "lift", config, config["seed"], t0)
    print(f"lift: {'converged' if state.converged else 'round limit'} after "
          f"{state.iteration} rounds, iou {state.convergence_iou:.4f}")
    return 0


def _load_final_masks(out, dataset, view_ids):
    import numpy as np
    from PIL import Image

    from .masks import Mask

    masks = {}
    for vid in view_ids:
        path = os.path.join(out, "masks_final", f"view_{vid}.png")
        if os.path.exists(path):
            masks[vid] = Mask.from_binary(np.asarray(Image.open(path)) >= 128)
    if not masks:
        raise ConfigError("no masks_final/ found; run lift first")
    return masks


def cmd_distill(config):
    from .distill import finetune
    from .features import load_feature_map
    from .fields import VoxelGrid

    from .optim import LogScalarParam

    t0 = time.time()
    dataset = _load_dataset(config)
    out = _require(config, "out")
    sdf = VoxelGrid.load(_grid_path(out, "sdf"))
    color = VoxelGrid.load(_grid_path(out, "color"))
    occupancy = VoxelGrid.load(_grid_path(out, "occupancy"))
    s_param = LogScalarParam(_load_s(out))
    g = config["grids"]
    feature = VoxelGrid(g["feature"], dataset.bounds_min, dataset.bounds_max,
                        channels=int(g["feature_channels"]), fill=0.0)
    view_ids = _train_view_ids(dataset, config)
    masks = _load_final_masks(out, dataset, view_ids)
    cfg = _stage2_config(config)
    fmaps = {}
    if cfg.weights.lambda_f > 0:
        for vid in masks:
            view = dataset.view(vid)
            if view.feature_path is None:
                raise ConfigError(f"view {vid} has no feature map but "
                                  "stage2.lambda_f > 0")
            fmaps[vid] = load_feature_map(dataset._resolve(view.feature_path))
    trace = finetune(sdf, color, feature, occupancy, s_param, dataset, masks,
                     fmaps, cfg, view_ids=sorted(masks))
    sdf.save(_grid_path(out, "sdf_finetuned"))
    color.save(_grid_path(out, "color_finetuned"))
    feature.save(_grid_path(out, "feature"))
    occupancy.save(_grid_path(out, "occupancy_finetuned"))
    _save_s(out, s_param.item, "s_finetuned.json")
    with open(os.path.join(out, "distill_trace.json"), "w") as f:
        json.dump({"loss": [round(float(x), 8) for x in trace]}, f)
    write_manifest(out, "distill", config, config["seed"], t0)
    print(f"distill: {cfg.steps} steps, final loss {trace[-1]:.5f}")
    return 0


def _pick_grids(out, finetuned=True):
    from .fields import VoxelGrid

    suffix = "_finetuned" if finetuned and os.path.exists(
        _grid_path(out, "sdf_finetuned")) else ""
    sdf = VoxelGrid.load(_grid_path(out, "sdf" + suffix))
    s_name = "s_finetuned.json" if suffix and os.path.exists(
        os.path.join(out, "s_finetuned.json")) else "s.json"
    return sdf, _load_s(out, s_name), suffix


def cmd_extract(config, iso, masked):
    from .fields import VoxelGrid
    from .meshmetrics import marching_cubes, save_obj

    t0 = time.time()
    out = _require(config, "out")
    sdf, _, suffix = _pick_grids(out)
    mask_grid = None
    if masked:
        occ_name = ("occupancy_finetuned" if os.path.exists(
            _grid_path(out, "occupancy_finetuned")) else "occupancy")
        mask_grid = VoxelGrid.load(_grid_path(out, occ_name))
    mesh = marching_cubes(sdf, iso=iso, mask_grid=mask_grid)
    path = os.path.join(out, "mesh.obj")
    save_obj(mesh, path)
    if mesh.is_empty:
        print("extract: WARNING empty mesh (no zero crossings)", file=sys.stderr)
    write_manifest(out, "extract", config, config["seed"], t0)
    print(f"extract: {len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} triangles -> {path}")
    return 0


def cmd_eval(config):
    import numpy as np

    from . import scenes
    from .fields import VoxelGrid
    from .lifting import ray_bank
    from .distill import render_color_view
    from .masks import Mask, mask_iou
    from .meshmetrics import (MetricReport, chamfer, marching_cubes, psnr,
                              sample_mesh_points, ssim)

    t0 = time.time()
    dataset = _load_dataset(config)
    out = _require(config, "out")
    report = MetricReport()

    # mask quality on training views
    view_ids = _train_view_ids(dataset, config)
    masks = _load_final_masks(out, dataset, view_ids)
    ious = {}
    for vid, mask in masks.items():
        view = dataset.view(vid)
        if view.mask_path is None:
            continue
        gt = Mask.from_binary(dataset.load_mask(view))
        ious[vid] = mask_iou(mask, gt)
        report.per_view.setdefault(vid, {})["iou"] = ious[vid]
    if ious:
        report.iou = float(np.mean(list(ious.values())))

    # rendering quality on held-out views
    sdf, s, suffix = _pick_grids(out)
    color = VoxelGrid.load(_grid_path(out, "color" + suffix))
    held = config.get("heldout_views") or []
    if held:
        banks = ray_bank(dataset, held)
        psnrs, ssims = [], []
        for vid in held:
            view = dataset.view(vid)
            gt_mask = Mask.from_binary(dataset.load_mask(view))
            target = dataset.load_image(view) * gt_mask.binary[:, :, None]
            pred = render_color_view(sdf, color, s, banks[vid],
                                     int(config["samples_per_ray"]))
            p = psnr(pred, target, gt_mask)
            q = ssim(pred, target, gt_mask)
            psnrs.append(p)
            ssims.append(q)
            report.per_view.setdefault(vid, {})["psnr_db"] = p
            report.per_view.setdefault(vid, {})["ssim"] = q
        report.psnr_db = float(np.mean(psnrs))
        report.ssim = float(np.mean(ssims))

        # held-out feature distillation quality (masked L1 vs reference maps)
        feat_path = _grid_path(out, "feature")
        if os.path.exists(feat_path):
            from .distill import render_feature_view
            from .features import load_feature_map

            feature = VoxelGrid.load(feat_path)
            l1s = []
            for vid in held:
                view = dataset.view(vid)
                if view.feature_path is None:
                    continue
                fmap = load_feature_map(
                    os.path.join(dataset.root, view.feature_path))
                gt_mask = dataset.load_mask(view)
                ys, xs = np.nonzero(gt_mask)
                target = fmap.lookup(xs, ys, view.camera.width,
                                     view.camera.height)
                pred = render_feature_view(sdf, feature, s, banks[vid],
                                           int(config["samples_per_ray"]))
                l1 = float(np.mean(np.abs(pred[ys, xs] - target)))
                l1s.append(l1)
                report.per_view.setdefault(vid, {})["feature_l1"] = l1
            if l1s:
                report.feature_l1 = float(np.mean(l1s))

    # geometry: masked mesh vs analytic target surface
    scene, target_id = scenes.load_scene(config["dataset"])
    if scene is not None and target_id is not None:
        occ_name = ("occupancy_finetuned" if os.path.exists(
            _grid_path(out, "occupancy_finetuned")) else "occupancy")
        if os.path.exists(_grid_path(out, occ_name)):
            occupancy = VoxelGrid.load(_grid_path(out, occ_name))
            mesh = marching_cubes(sdf, iso=float(config["eval"]["iso"]),
                                  mask_grid=occupancy)
            if not mesh.is_empty:
                n_pts = int(config["eval"]["mesh_samples"])
                pred_pts = sample_mesh_points(mesh, n_pts, seed=config["seed"])
                target = next(p for p in scene.primitives
                              if p.object_id == target_id)
                gt_pts = scenes.sample_primitive_surface(target, n_pts,
                                                         seed=config["seed"] + 1)
                report.chamfer = chamfer(pred_pts, gt_pts)

    report.save(os.path.join(out, "metrics.json"))
    write_manifest(out, "eval", config, config["seed"], t0)
    summary = ", ".join(f"{k}={v}" for k, v in report.to_dict().items()
                        if k != "per_view" and v is not None)
    print(f"eval: {summary}")
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="occulift",
                                 description="Target-object reconstruction "
                                             "from posed images")
    ap.add_argument("--threads", type=int, default=0,
                    help="cap numeric worker threads (0 = library default)")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic posed dataset")
    sp.add_argument("--preset", default="duo")
    sp.add_argument("--views", type=int, default=16)
    sp.add_argument("--width", type=int, default=200)
    sp.add_argument("--height", type=int, default=150)
    sp.add_argument("--feature-channels", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-features", action="store_true")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("-o", "--out", required=True)

    for name, help_text in [
        ("pretrain", "stage 0: fit SDF/color on full images"),
        ("lift", "stage 1: iterative occupancy lifting"),
        ("distill", "stage 2: masked finetune + feature distillation"),
        ("extract", "marching-cubes mesh extraction"),
        ("eval", "metric report against ground truth"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL")
        if name == "lift":
            p.add_argument("--prompt-view", type=int, default=None)
            p.add_argument("--prompt-point", action="append", default=[],
                           metavar="X,Y")
            p.add_argument("--prompt-box", default=None, metavar="X0,Y0,X1,Y1")
        if name == "extract":
            p.add_argument("--iso", type=float, default=0.0)
            p.add_argument("--masked", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        config = load_config(args.config, args.set)
        if args.command == "lift":
            if args.prompt_view is not None:
                config["prompt"]["view"] = args.prompt_view
            for pt in args.prompt_point:
                x, y = (int(v) for v in pt.split(","))
                config["prompt"].setdefault("points", [])
                config["prompt"]["points"].append([x, y])
            if args.prompt_box is not None:
                config["prompt"]["box"] = [int(v) for v in
                                           args.prompt_box.split(",")]
        if args.command == "pretrain":
            return cmd_pretrain(config)
        if args.command == "lift":
            return cmd_lift(config)
        if args.command == "distill":
            return cmd_distill(config)
        if args.command == "extract":
            return cmd_extract(config, args.iso, args.masked)
        if args.command == "eval":
            return cmd_eval(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # classified exit codes for pipeline failures
        from .lifting import InitialSegmentationFailed
        from .segmenter import SegmentationFailed, SegmenterUnavailable
        from .distill import NonFiniteLoss

        if isinstance(e, (InitialSegmentationFailed, SegmentationFailed,
                          SegmenterUnavailable)):
            print(f"segmenter failure: {e}", file=sys.stderr)
            return 3
        if isinstance(e, NonFiniteLoss):
            print(f"training aborted: {e}", file=sys.stderr)
            return 4
        raise


if __name__ == "__main__":
    sys.exit(main())
