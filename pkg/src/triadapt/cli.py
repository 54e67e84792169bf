"""Command-line entry points: pretrain, adapt, render, invert, edit, eval.

Exit codes: 0 success, 2 configuration or input error, 3 I/O error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .adaptation import NonFiniteLossError, load_generator, pretrain_source, run_adaptation
from .camera import sample_poses
from .benchmark import load_domains, render_at_poses
from .config import ConfigError, RunConfig
from .datasets import load_dataset, read_png, write_npy, write_png
from .generator import render_generator, sample_latents
from .inversion import (InversionConfig, edit, find_edit_direction, invert, load_directions,
                        load_inversion, novel_view, save_directions, save_inversion)
from .metrics import extract_features, fid, geometry_error, kid
from .renderer import normals_from_depth

log = logging.getLogger("triadapt")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _parse_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", type=Path, help="TOML run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--resolution", type=int, help="overrides model.resolution")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. loss.alpha=0")
        if out:
            p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("pretrain", help="pretrain G/D/P on the source domain")
    common(p)
    p.add_argument("--dataset", type=Path, help="source dataset directory (needs index.json poses); "
                   "default: synthetic source domain")
    p.add_argument("--iters", type=int, help="generator iterations (default from config)")
    p.add_argument("--pose-iters", type=int, help="pose network iterations (default from config)")

    p = sub.add_parser("adapt", help="alternating adaptation to a target domain")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="source checkpoint")
    p.add_argument("--dataset", type=Path, help="target image directory; default: synthetic target domain")
    p.add_argument("--iters", type=int, help="total iterations (default from config)")
    p.add_argument("--resume", type=Path, help="adaptation checkpoint to resume from")

    p = sub.add_parser("render", help="multi-view image/depth/normal sweep")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--z-seed", type=int, default=0)
    p.add_argument("--latent", type=Path, help=".npy file with z (z_dim) or z followed by z_d")
    p.add_argument("--yaw", type=_floats, default=[-0.5, 0.0, 0.5])
    p.add_argument("--pitch", type=float, default=0.0)
    p.add_argument("--source-path", action="store_true", help="render without the deformation branch")

    p = sub.add_parser("invert", help="invert an image and render novel views")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--latent-steps", type=int, default=300)
    p.add_argument("--pivotal-steps", type=int, default=300)
    p.add_argument("--yaw", type=_floats, default=[-0.5, -0.25, 0.0, 0.25, 0.5])

    p = sub.add_parser("edit", help="apply an edit direction to an inversion")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint the inversion was made with")
    p.add_argument("--inversion", type=Path, required=True, help="inversion.ckpt written by 'invert'")
    p.add_argument("--directions", type=Path, required=True,
                   help="direction file; created with --fit-attribute when it does not exist")
    p.add_argument("--name", default=None, help="direction name (default: the only one in the file)")
    p.add_argument("--fit-attribute", choices=["brightness", "width"],
                   help="fit a direction from rendered samples of the unadapted generator")
    p.add_argument("--strengths", type=_floats, default=[-2.0, -1.0, 0.0, 1.0, 2.0])

    p = sub.add_parser("eval", help="FID/KID and depth/pose errors as a JSON report")
    common(p)
    p.add_argument("--checkpoint", type=Path, help="generator to evaluate")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--against", type=Path, help="compare --dataset with another dataset instead of a generator")
    p.add_argument("--n-samples", type=int, default=256)
    p.add_argument("--extractor-seed", type=int, default=0)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value.strip())
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.resolution is not None:
        overrides["model.resolution"] = args.resolution
    return cfg.with_overrides(overrides) if overrides else cfg


def _write_json(path: Path, payload) -> None:
    ckpt.atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True))


def _normal_image(normals: torch.Tensor) -> np.ndarray:
    return (0.5 * (normals + 1.0)).clamp(0, 1).numpy()


# commands -------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    if args.dataset:
        ds = load_dataset(args.dataset, cfg.model.resolution)
        if ds.poses is None:
            raise ConfigError(f"{args.dataset} has no poses in index.json; pretraining needs known poses")
        images, poses = ds.images, ds.poses
    else:
        images, poses, _ = load_domains(cfg)["source"]
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt.atomic_write_text(args.out / "config.toml", cfg.dumps())
    pretrain_source(cfg, images, poses, args.out / "source.ckpt", args.iters, args.pose_iters,
                    log_path=args.out / "pretrain.jsonl")
    print(args.out / "source.ckpt")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = load_config(args)
    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    if args.dataset:
        images = load_dataset(args.dataset, cfg.model.resolution).images
    else:
        images = load_domains(cfg)["target"][0]
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt.atomic_write_text(args.out / "config.toml", cfg.dumps())
    final, _ = run_adaptation(cfg, args.checkpoint, images, args.out, n_iters=args.iters, resume=args.resume)
    print(final)
    return EXIT_OK


def _generator_from(args):
    _, header = ckpt.load(args.checkpoint)
    cfg = RunConfig.from_dict(header["config"])
    if args.resolution is not None:
        cfg = cfg.with_overrides({"model.resolution": args.resolution})
    G, P, cfg = load_generator(args.checkpoint, cfg)
    G.eval()
    return G, P, cfg


def cmd_render(args) -> int:
    G, _, cfg = _generator_from(args)
    if args.latent:
        vec = torch.as_tensor(np.load(args.latent), dtype=torch.float32).reshape(1, -1)
        z = vec[:, :G.cfg.z_dim]
        z_d = vec[:, G.cfg.z_dim:] if vec.shape[1] > G.cfg.z_dim else None
        if z_d is not None and z_d.shape[1] != G.cfg.zd_dim:
            raise ConfigError(f"latent file must hold {G.cfg.z_dim} or {G.cfg.z_dim + G.cfg.zd_dim} values")
        if z_d is None and G.deformation is not None and not args.source_path:
            z_d = torch.zeros(1, G.cfg.zd_dim)
    else:
        lat = sample_latents(np.random.default_rng(args.z_seed), 1, G.cfg)
        z, z_d = lat.z, lat.z_d
    if args.source_path or G.deformation is None:
        z_d = None
    args.out.mkdir(parents=True, exist_ok=True)
    n = len(args.yaw)
    yaw = torch.tensor(args.yaw, dtype=torch.float32)
    pitch = torch.full((n,), args.pitch, dtype=torch.float32)
    with torch.no_grad():
        out = G.generate(z.expand(n, -1), None if z_d is None else z_d.expand(n, -1), yaw, pitch,
                         render_generator(cfg.seed))
        normals = normals_from_depth(out.depth.double(), G.camera).float()
    views = []
    for i in range(n):
        stem = f"view_{i:02d}"
        write_png(args.out / f"{stem}.png", out.image[i].numpy())
        write_npy(args.out / f"{stem}_depth.npy", out.depth[i].numpy())
        write_png(args.out / f"{stem}_normal.png", _normal_image(normals[i]))
        views.append({"yaw": float(yaw[i]), "pitch": float(pitch[i]), "image": f"{stem}.png",
                      "depth": f"{stem}_depth.npy", "normal": f"{stem}_normal.png"})
    grid = torch.cat([torch.cat(list(out.image), 2), torch.cat(list(_to_t(normals)), 2)], 1)
    write_png(args.out / "grid.png", grid.numpy())
    _write_json(args.out / "manifest.json", {"checkpoint": str(args.checkpoint), "z_seed": args.z_seed,
                                             "views": views, "render_seed": cfg.seed})
    return EXIT_OK


def _to_t(normals):
    return torch.as_tensor(_normal_image(normals))


def cmd_invert(args) -> int:
    G, P, cfg = _generator_from(args)
    image = read_png(args.image, G.resolution)
    icfg = InversionConfig(latent_steps=args.latent_steps, pivotal_steps=args.pivotal_steps,
                           render_seed=cfg.seed)
    result = invert(image, G, P, icfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_inversion(args.out / "inversion.ckpt", result)
    write_png(args.out / "reconstruction.png", result.reconstruction.image[0].numpy())
    views = []
    for i, y in enumerate(args.yaw):
        out = novel_view(result, y, result.pose[1])
        write_png(args.out / f"novel_{i:02d}.png", out.image[0].numpy())
        views.append({"yaw": y, "pitch": float(result.pose[1]), "image": f"novel_{i:02d}.png"})
    _write_json(args.out / "report.json", {
        "pose": result.pose.tolist(), "latent_error": result.latent_error, "final_error": result.final_error,
        "latent_trace": result.latent_trace, "pivotal_trace": result.pivotal_trace, "views": views})
    print(json.dumps({"latent_error": result.latent_error, "final_error": result.final_error}))
    return EXIT_OK


def attribute_samples(G, attribute: str, n: int = 400, seed: int = 0):
    """``(w, label)`` pairs labelled by a rendered attribute of the source path (median split)."""
    lat = sample_latents(np.random.default_rng(seed), n, G.cfg)
    with torch.no_grad():
        w = G.map_latent(lat.z)
        zeros = torch.zeros(n)
        out = G.render_w(w, None, zeros, zeros, render_generator(seed))
    if attribute == "brightness":
        score = out.image.mean(dim=(1, 2, 3))
    elif attribute == "width":
        score = out.opacity.gt(0.5).float().sum(dim=1).amax(dim=1)
    else:
        raise ConfigError(f"unknown attribute {attribute!r}")
    labels = (score > score.median()).long()
    return list(zip(w, labels.tolist()))


def cmd_edit(args) -> int:
    G, _, cfg = _generator_from(args)
    result = load_inversion(args.inversion, G)
    if args.fit_attribute and not args.directions.exists():
        samples = attribute_samples(G, args.fit_attribute, seed=cfg.seed)
        save_directions(args.directions, {args.fit_attribute: find_edit_direction(samples, args.fit_attribute)})
    directions = load_directions(args.directions)
    name = args.name or (next(iter(directions)) if len(directions) == 1 else None)
    if name not in directions:
        raise ConfigError(f"choose a direction with --name from {sorted(directions)}")
    direction = directions[name]
    args.out.mkdir(parents=True, exist_ok=True)
    entries = []
    base_w = result.w
    for i, s in enumerate(args.strengths):
        result.w = edit(base_w, direction, s)
        out = novel_view(result, result.pose[0], result.pose[1])
        write_png(args.out / f"edit_{i:02d}.png", out.image[0].numpy())
        entries.append({"strength": s, "image": f"edit_{i:02d}.png"})
    result.w = base_w
    _write_json(args.out / "manifest.json", {"direction": name, "low_confidence": direction.low_confidence,
                                             "edits": entries})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    ds = load_dataset(args.dataset, cfg.model.resolution if args.resolution else None)
    report = {"extractor": "random-conv", "extractor_seed": args.extractor_seed, "n_dataset": len(ds)}
    real = extract_features(ds.images, args.extractor_seed)
    if args.against is not None:
        other = load_dataset(args.against, ds.images.shape[-1])
        fake = extract_features(other.images, args.extractor_seed)
        report.update(fid=fid(real, fake), kid=kid(real, fake))
    else:
        if args.checkpoint is None:
            raise ConfigError("eval needs --checkpoint or --against")
        G, P, gcfg = _generator_from(args)
        if ds.images.shape[-1] != G.resolution:
            ds = load_dataset(args.dataset, G.resolution)
            real = extract_features(ds.images, args.extractor_seed)
        if ds.poses is not None:
            poses = ds.poses
        else:
            poses = sample_poses(np.random.default_rng(gcfg.seed), args.n_samples, gcfg.prior())
        images, depths = render_at_poses(G, poses, seed=gcfg.seed)
        fake = extract_features(images, args.extractor_seed)
        report.update(fid=fid(real, fake), kid=kid(real, fake), n_generated=len(images))
        if ds.poses is not None:
            with torch.no_grad():
                pred = P.estimate(torch.as_tensor(ds.images)).double().numpy()
            report["pose_mse"] = float(np.mean(np.sum((pred - ds.poses) ** 2, axis=1)))
            if ds.depths is not None:
                report["depth_mse"], _ = geometry_error(list(zip(depths, poses)), list(zip(ds.depths, poses)))
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "report.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "render": cmd_render, "invert": cmd_invert,
            "edit": cmd_edit, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
