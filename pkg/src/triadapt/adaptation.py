"""Alternating adaptation of the generator and the pose network, plus source pretraining.

Every stochastic draw comes from a generator derived from
``(seed, stream, iteration, substream)``. A run resumed from a checkpoint at
iteration ``k`` therefore replays exactly the draws an uninterrupted run
would make from ``k`` on.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .camera import PosePrior, sample_poses
from .config import RunConfig
from .generator import LatentBundle, TriPlaneGenerator, sample_latents
from .losses import (LossWeights, PoseConditionedDiscriminator, adversarial_losses, geometric_loss,
                     r1_penalty)
from .pose import PoseNet, flip_augment, make_pose_optimizer, train_pose_step

log = logging.getLogger(__name__)

STREAMS = {"latents": 1, "poses": 2, "stratification": 3, "augmentation": 4, "data": 5}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def stream_rng(seed: int, stream: str, iteration: int, sub: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[stream], int(iteration), int(sub)])


def stream_torch(seed: int, stream: str, iteration: int, sub: int = 0) -> torch.Generator:
    derived = int(stream_rng(seed, stream, iteration, sub).integers(0, 2**62))
    return torch.Generator().manual_seed(derived)


def parameter_hash(*modules) -> str:
    h = hashlib.sha256()
    for module in modules:
        for name, tensor in module.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def tensor_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Temporarily disable gradients for ``module``'s parameters (restored afterwards)."""
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def _adam(params, lr, cfg: RunConfig):
    o = cfg.optim
    return torch.optim.Adam(params, lr=lr, betas=(o.beta1, o.beta2), eps=o.eps)


def build_models(cfg: RunConfig, with_deformation: bool, seed: int | None = None):
    """Fresh ``(G, D, P)`` for ``cfg``; initialisation is seeded and does not touch the global RNG."""
    seed = cfg.seed if seed is None else seed
    m = cfg.model
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        G = TriPlaneGenerator(cfg.generator_config(), cfg.camera_config(), m.resolution, m.n_samples,
                              with_deformation=with_deformation)
        D = PoseConditionedDiscriminator(m.resolution, tuple(m.disc_channels),
                                         freeze_depth=0)
        P = PoseNet(m.resolution, tuple(m.pose_channels), cfg.prior())
    return G, D, P


@dataclass
class PseudoSample:
    pose: torch.Tensor  # (2,)
    image: torch.Tensor  # (3, H, W)


@dataclass
class PseudoBatch:
    """Generator-labelled training pairs for the pose network."""

    poses: torch.Tensor  # (n, 2)
    images: torch.Tensor  # (n, 3, H, W)
    latents: LatentBundle
    render_seed_iteration: int

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i) -> PseudoSample:
        return PseudoSample(self.poses[i], self.images[i])


@dataclass
class AdaptationState:
    config: RunConfig
    G: TriPlaneGenerator
    G_photo: TriPlaneGenerator
    D: PoseConditionedDiscriminator
    P: PoseNet
    opt_G: torch.optim.Optimizer
    opt_D: torch.optim.Optimizer
    opt_P: torch.optim.Optimizer
    weights: LossWeights
    iteration: int = 0
    d_steps: int = 0
    seed: int = 0
    photo_hash: str = field(default="", repr=False)

    @property
    def prior(self) -> PosePrior:
        return self.config.prior()

    @property
    def seeds(self) -> dict[str, int]:
        return {name: self.seed for name in STREAMS}


def init_adaptation(cfg: RunConfig, source: dict) -> AdaptationState:
    """Build the trainer state from a loaded source checkpoint (see :func:`load_source`).

    ``G`` receives a zero-initialised deformation branch, so before the first
    update it reproduces the source generator exactly.
    """
    G, D, P = build_models(cfg, with_deformation=False)
    ckpt.load_module("G", G, source["arrays"])
    ckpt.load_module("D", D, source["arrays"])
    ckpt.load_module("P", P, source["arrays"])
    G_photo = G.frozen_copy()
    G.attach_deformation(seed=cfg.seed + 7919)
    D.set_freeze_depth(cfg.train.freeze_depth)
    state = AdaptationState(
        config=cfg, G=G, G_photo=G_photo, D=D, P=P,
        opt_G=_adam(G.parameters(), cfg.optim.lr_g, cfg),
        opt_D=_adam(D.trainable_parameters(), cfg.optim.lr_d, cfg),
        opt_P=make_pose_optimizer(P, cfg.optim.lr_p, (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps),
        weights=cfg.loss_weights(),
        seed=cfg.seed,
    )
    state.photo_hash = parameter_hash(G_photo)
    return state


def build_pseudo_batch(state: AdaptationState, n: int, iteration: int | None = None) -> PseudoBatch:
    """Render ``n`` prior-sampled (pose, image) pairs with the current generator, no gradients."""
    if n < 1:
        raise ValueError("n must be >= 1")
    it = state.iteration if iteration is None else iteration
    lat = sample_latents(stream_rng(state.seed, "latents", it, 1), n, state.G.cfg)
    poses = torch.as_tensor(sample_poses(stream_rng(state.seed, "poses", it, 1), n, state.prior),
                            dtype=torch.float32)
    gen = stream_torch(state.seed, "stratification", it, 1)
    with torch.no_grad():
        out = state.G.generate(lat.z, lat.z_d, poses[:, 0], poses[:, 1], gen)
    return PseudoBatch(poses=poses, images=out.image, latents=lat, render_seed_iteration=it)


def adapt_p_step(state: AdaptationState) -> dict:
    """Update P on a fresh pseudo batch while G stays fixed."""
    cfg = state.config
    batch = build_pseudo_batch(state, cfg.train.batch_size)
    images, poses = batch.images, batch.poses
    if cfg.train.flip_p > 0:
        images, poses = flip_augment(images, poses, stream_rng(state.seed, "augmentation", state.iteration, 1),
                                     cfg.train.flip_p)
    if not torch.isfinite(images).all():
        raise NonFiniteLossError(f"non-finite pseudo images at iteration {state.iteration}",
                                 {"iteration": state.iteration, "stage": "P"})
    loss = train_pose_step(state.P, state.opt_P, poses, images)
    _check_finite({"loss_P": loss}, state)
    return {"loss_P": loss}


def _check_finite(metrics: dict, state: AdaptationState) -> None:
    bad = [k for k, v in metrics.items() if isinstance(v, float) and not math.isfinite(v)]
    if bad:
        snapshot = dict(metrics, iteration=state.iteration)
        raise NonFiniteLossError(f"non-finite loss components {bad} at iteration {state.iteration}", snapshot)


def adapt_g_step(state: AdaptationState, real_images: torch.Tensor) -> dict:
    """One generator and one discriminator update on a batch of target images.

    Poses of the real images come from the (frozen) pose network; fakes are
    rendered at those poses. The generator minimises
    ``L_a + alpha*L_d + beta*L_n + gamma*L_p``.
    """
    cfg, it, w = state.config, state.iteration, state.weights
    G, D, P = state.G, state.D, state.P
    real = real_images.to(torch.float32)
    if cfg.train.flip_p > 0:
        flip = torch.as_tensor(stream_rng(state.seed, "augmentation", it, 0).random(len(real)) < cfg.train.flip_p)
        real = torch.where(flip[:, None, None, None], real.flip(-1), real)
    P.eval()
    theta = P.estimate(real)
    if not torch.isfinite(theta).all():
        raise NonFiniteLossError(f"non-finite pose estimates at iteration {it}", {"iteration": it, "stage": "G"})

    lat = sample_latents(stream_rng(state.seed, "latents", it, 0), len(real), G.cfg)
    out = G.generate(lat.z, lat.z_d, theta[:, 0], theta[:, 1], stream_torch(state.seed, "stratification", it, 0))

    # generator update -------------------------------------------------
    with frozen(D), frozen(P):
        logit_fake = D(out.image, theta)
        loss_g_adv = F.softplus(-logit_fake).mean()
        d_photo = None
        if w.alpha > 0:
            with torch.no_grad():
                d_photo = state.G_photo.generate(lat.z, None, theta[:, 0], theta[:, 1],
                                                 stream_torch(state.seed, "stratification", it, 0)).depth
        theta_pred = P(out.image) if w.gamma > 0 else None
        geo = geometric_loss(out.depth, d_photo, None, theta, theta_pred, w, G.camera)
        l_d = geo.depth.double() if d_photo is not None else None
        l_p = geo.pose.double() if theta_pred is not None else None
        total = loss_g_adv.double() + w.beta * geo.normal.double()
        if l_d is not None:
            total = total + w.alpha * l_d
        if l_p is not None:
            total = total + w.gamma * l_p
        l_g = total - loss_g_adv.double()
        metrics = {
            "L_a": loss_g_adv.item(), "L_d": None if l_d is None else l_d.item(),
            "L_n": geo.normal.item(), "L_p": None if l_p is None else l_p.item(),
            "L_g": l_g.item(), "total": total.item(),
        }
        _check_finite(metrics, state)
        state.opt_G.zero_grad(set_to_none=True)
        total.backward()
    state.opt_G.step()

    # discriminator update ---------------------------------------------
    logit_real = D(real, theta)
    logit_fake_d = D(out.image.detach(), theta)
    loss_d, _ = adversarial_losses(logit_real, logit_fake_d)
    r1 = None
    if w.r1_weight > 0 and state.d_steps % cfg.loss.r1_interval == 0:
        r1_t = r1_penalty(D, real, theta)
        loss_d = loss_d + w.r1_weight * r1_t
        r1 = r1_t.item()
    state.opt_D.zero_grad(set_to_none=True)
    loss_d.backward()
    metrics.update(loss_D=loss_d.item(), R1=r1, logit_real=logit_real.mean().item(),
                   logit_fake=logit_fake_d.mean().item())
    _check_finite(metrics, state)
    state.opt_D.step()
    state.d_steps += 1
    return metrics


def sample_real_batch(state: AdaptationState, images: torch.Tensor) -> torch.Tensor:
    n = len(images)
    if n == 0:
        raise ValueError("empty target dataset")
    rng = stream_rng(state.seed, "data", state.iteration)
    idx = rng.choice(n, size=min(state.config.train.batch_size, n), replace=False)
    return images[torch.as_tensor(np.sort(idx))]


def adaptation_iteration(state: AdaptationState, target_images: torch.Tensor) -> dict:
    """P step(s) then G/D step(s); advances the iteration counter by one."""
    cfg = state.config
    t0 = time.perf_counter()
    record = {"iteration": state.iteration}
    for _ in range(cfg.train.p_steps_per_iter):
        record.update(adapt_p_step(state))
    for _ in range(cfg.train.g_steps_per_iter):
        record.update(adapt_g_step(state, sample_real_batch(state, target_images)))
    record.update(lr_G=state.opt_G.param_groups[0]["lr"], lr_D=state.opt_D.param_groups[0]["lr"],
                  lr_P=state.opt_P.param_groups[0]["lr"],
                  alpha=state.weights.alpha, beta=state.weights.beta, gamma=state.weights.gamma,
                  wall_time=time.perf_counter() - t0)
    state.iteration += 1
    return record


# checkpoints ----------------------------------------------------------------

def state_arrays(state: AdaptationState) -> tuple[dict, dict]:
    arrays = {}
    arrays.update(ckpt.module_arrays("G", state.G))
    arrays.update(ckpt.module_arrays("G_photo", state.G_photo))
    arrays.update(ckpt.module_arrays("D", state.D))
    arrays.update(ckpt.module_arrays("P", state.P))
    meta = {}
    for name in ("G", "D", "P"):
        opt_arrays, opt_meta = ckpt.optimizer_arrays(f"opt/{name}", getattr(state, f"opt_{name}"))
        arrays.update(opt_arrays)
        meta[name] = opt_meta
    header = {
        "kind": "adaptation",
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "d_steps": state.d_steps,
        "seeds": state.seeds,
        "optimizers": meta,
        "has_deformation": True,
        "photo_hash": state.photo_hash,
    }
    return arrays, header


def save_state(state: AdaptationState, path) -> None:
    arrays, header = state_arrays(state)
    ckpt.save(path, arrays, header)


def load_state(path, cfg: RunConfig | None = None) -> AdaptationState:
    arrays, header = ckpt.load(path)
    if header.get("kind") != "adaptation":
        raise ckpt.CheckpointError(f"{path} is not an adaptation checkpoint")
    cfg = cfg or RunConfig.from_dict(header["config"])
    G, D, P = build_models(cfg, with_deformation=True)
    G_photo, _, _ = build_models(cfg, with_deformation=False)
    ckpt.load_module("G", G, arrays)
    ckpt.load_module("G_photo", G_photo, arrays)
    ckpt.load_module("D", D, arrays)
    ckpt.load_module("P", P, arrays)
    G_photo.requires_grad_(False)
    G_photo.eval()
    D.set_freeze_depth(cfg.train.freeze_depth)
    state = AdaptationState(
        config=cfg, G=G, G_photo=G_photo, D=D, P=P,
        opt_G=_adam(G.parameters(), cfg.optim.lr_g, cfg),
        opt_D=_adam(D.trainable_parameters(), cfg.optim.lr_d, cfg),
        opt_P=make_pose_optimizer(P, cfg.optim.lr_p, (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps),
        weights=cfg.loss_weights(), iteration=header["iteration"], d_steps=header["d_steps"],
        seed=cfg.seed, photo_hash=header["photo_hash"],
    )
    for name in ("G", "D", "P"):
        ckpt.load_optimizer(f"opt/{name}", getattr(state, f"opt_{name}"), arrays, header["optimizers"][name])
    return state


def save_source(path, cfg: RunConfig, G, D, P, extra: dict | None = None) -> None:
    arrays = {}
    arrays.update(ckpt.module_arrays("G", G))
    arrays.update(ckpt.module_arrays("D", D))
    arrays.update(ckpt.module_arrays("P", P))
    header = {"kind": "source", "config": cfg.to_dict(), "has_deformation": False, "iteration": 0}
    header.update(extra or {})
    ckpt.save(path, arrays, header)


def load_source(path) -> dict:
    arrays, header = ckpt.load(path)
    if header.get("kind") != "source":
        raise ckpt.CheckpointError(f"{path} is not a source checkpoint")
    return {"arrays": arrays, "header": header}


def load_generator(path, cfg: RunConfig | None = None) -> tuple[TriPlaneGenerator, PoseNet, RunConfig]:
    """Generator and pose net from either checkpoint kind."""
    arrays, header = ckpt.load(path)
    cfg = cfg or RunConfig.from_dict(header["config"])
    G, _, P = build_models(cfg, with_deformation=header.get("has_deformation", False))
    ckpt.load_module("G", G, arrays)
    ckpt.load_module("P", P, arrays)
    return G, P, cfg


# full runs ------------------------------------------------------------------

def run_adaptation(cfg: RunConfig, source_checkpoint, target_images, out_dir, n_iters: int | None = None,
                   resume: str | Path | None = None, callback=None):
    """Alternate P and G/D updates for ``n_iters`` iterations (default ``cfg.train.adapt_iters``).

    Writes ``metrics.jsonl`` (one record per iteration, appended), periodic
    ``checkpoint_XXXXXX.ckpt`` files and ``final.ckpt`` under ``out_dir``.
    With ``resume`` the state (including the iteration counter) is restored
    from that checkpoint and logging continues from the next iteration.
    Returns ``(final_checkpoint_path, records)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = torch.as_tensor(np.asarray(target_images), dtype=torch.float32)
    if len(target) == 0:
        raise ValueError("empty target dataset")
    if resume is not None:
        state = load_state(resume, cfg)
    else:
        state = init_adaptation(cfg, load_source(source_checkpoint))
    total = cfg.train.adapt_iters if n_iters is None else n_iters
    log_path = out_dir / "metrics.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    elif resume is not None and log_path.exists():
        _truncate_log(log_path, state.iteration)
    records = []
    with open(log_path, "a") as fh:
        while state.iteration < total:
            try:
                record = adaptation_iteration(state, target)
            except NonFiniteLossError as exc:
                ckpt.atomic_write_text(out_dir / "diagnostic.json", json.dumps(exc.snapshot, indent=2))
                raise
            records.append(record)
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            if state.iteration % 50 == 0:
                log.info("iter %d total=%.4f L_a=%.4f loss_D=%.4f loss_P=%.5f", record["iteration"],
                         record["total"], record["L_a"], record["loss_D"], record["loss_P"])
            if cfg.train.checkpoint_every and state.iteration % cfg.train.checkpoint_every == 0:
                save_state(state, out_dir / f"checkpoint_{state.iteration:06d}.ckpt")
            if callback is not None:
                callback(state, record)
    final = out_dir / "final.ckpt"
    save_state(state, final)
    return final, records


def _truncate_log(path: Path, iteration: int) -> None:
    """Drop log records at or beyond ``iteration`` (they will be regenerated)."""
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    kept = [ln for ln in lines if json.loads(ln)["iteration"] < iteration]
    ckpt.atomic_write_text(path, "".join(ln + "\n" for ln in kept))


def pretrain_source(cfg: RunConfig, images, poses, out_path, n_iters: int | None = None,
                    n_p_iters: int | None = None, log_path=None):
    """Adversarial pretraining of G/D with known poses plus supervised training of P.

    Returns the fitted ``(G, D, P)`` and writes the source checkpoint.
    """
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    poses = torch.as_tensor(np.asarray(poses), dtype=torch.float32)
    if len(images) == 0:
        raise ValueError("empty source dataset")
    G, D, P = build_models(cfg, with_deformation=False)
    tr = cfg.train
    n_iters = tr.pretrain_iters if n_iters is None else n_iters
    n_p_iters = tr.pretrain_p_iters if n_p_iters is None else n_p_iters
    seed = cfg.seed
    batch = min(tr.batch_size, len(images))

    opt_P = make_pose_optimizer(P, tr.pretrain_lr_p, (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps)
    for it in range(n_p_iters):
        rng = stream_rng(seed, "data", it, 7)
        idx = torch.as_tensor(np.sort(rng.choice(len(images), batch, replace=False)))
        xb, yb = flip_augment(images[idx], poses[idx], stream_rng(seed, "augmentation", it, 7), tr.flip_p)
        loss_p = train_pose_step(P, opt_P, yb, xb)
        if it % 500 == 0:
            log.info("pretrain P iter %d loss %.5f", it, loss_p)

    opt_G = _adam(G.parameters(), tr.pretrain_lr_g, cfg)
    opt_D = _adam(D.parameters(), tr.pretrain_lr_d, cfg)
    logf = open(log_path, "w") if log_path else None
    try:
        for it in range(n_iters):
            rng = stream_rng(seed, "data", it, 8)
            idx = torch.as_tensor(np.sort(rng.choice(len(images), batch, replace=False)))
            real, theta = flip_augment(images[idx], poses[idx], stream_rng(seed, "augmentation", it, 8), tr.flip_p)
            lat = sample_latents(stream_rng(seed, "latents", it, 8), batch, G.cfg)
            out = G.generate(lat.z, None, theta[:, 0], theta[:, 1], stream_torch(seed, "stratification", it, 8))
            with frozen(D):
                loss_g = F.softplus(-D(out.image, theta)).mean()
                opt_G.zero_grad(set_to_none=True)
                loss_g.backward()
            opt_G.step()
            logit_real = D(real, theta)
            logit_fake = D(out.image.detach(), theta)
            loss_d, _ = adversarial_losses(logit_real, logit_fake)
            r1 = None
            if cfg.loss.r1_weight > 0 and it % cfg.loss.r1_interval == 0:
                r1_t = r1_penalty(D, real, theta)
                loss_d = loss_d + cfg.loss.r1_weight * r1_t
                r1 = r1_t.item()
            opt_D.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_D.step()
            record = {"iteration": it, "loss_G": loss_g.item(), "loss_D": loss_d.item(), "R1": r1}
            if not all(math.isfinite(v) for v in (record["loss_G"], record["loss_D"])):
                raise NonFiniteLossError(f"non-finite pretraining loss at iteration {it}", record)
            if logf:
                logf.write(json.dumps(record) + "\n")
                logf.flush()
            if it % 100 == 0:
                log.info("pretrain G iter %d loss_G %.4f loss_D %.4f", it, record["loss_G"], record["loss_D"])
    finally:
        if logf:
            logf.close()
    if out_path is not None:
        save_source(out_path, cfg, G, D, P)
    return G, D, P
