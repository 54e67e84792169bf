"""Two-stage (latent, then pivotal generator tuning) inversion, linear edit directions, novel views."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin

from . import checkpoint as ckpt
from .generator import TriPlaneGenerator, render_generator
from .pose import PoseNet
from .renderer import RenderOutput
from .validation import check_images


@dataclass
class InversionConfig:
    latent_steps: int = 300
    pivotal_steps: int = 300
    latent_lr: float = 0.02
    pivotal_lr: float = 3e-4
    optimize_deformation: bool = True  # optimise z_d jointly with w in stage 1
    tune_deformation: bool = True  # pivotal stage also updates the deformation branch
    render_seed: int = 0
    n_samples: int | None = None
    mean_w_samples: int = 1000

    def __post_init__(self):
        if self.latent_steps < 0 or self.pivotal_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.latent_lr <= 0 or self.pivotal_lr <= 0:
            raise ValueError("learning rates must be > 0")


@dataclass
class InversionResult:
    w: torch.Tensor  # (1, w_dim)
    z_d: torch.Tensor | None  # (1, zd_dim)
    pose: torch.Tensor  # (2,) yaw, pitch
    generator: TriPlaneGenerator  # pivotally tuned copy
    latent_trace: list[float] = field(default_factory=list)  # best-so-far MSE per stage-1 step
    pivotal_trace: list[float] = field(default_factory=list)  # best-so-far MSE per stage-2 step
    latent_error: float = math.nan
    final_error: float = math.nan
    render_seed: int = 0
    n_samples: int | None = None

    @property
    def reconstruction(self) -> RenderOutput:
        return novel_view(self, self.pose[0], self.pose[1])


def _render(G, w, z_d, pose, seed, n_samples=None) -> RenderOutput:
    return G.render_w(w, z_d, pose[None, 0], pose[None, 1], render_generator(seed), n_samples)


def _mse(G, w, z_d, pose, target, seed, n_samples):
    return F.mse_loss(_render(G, w, z_d, pose, seed, n_samples).image, target)


def _check_finite(value: float, stage: str, step: int) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite reconstruction error in {stage} at step {step}")


def invert(image, generator: TriPlaneGenerator, pose_net: PoseNet | None = None,
           config: InversionConfig | None = None, pose=None) -> InversionResult:
    """Invert one image ``(3, H, W)``.

    The pose comes from ``pose_net`` unless given explicitly. Stage 1
    optimises ``(w, z_d)`` from the mean style code with the generator frozen;
    stage 2 fixes the pivot and finetunes a copy of the generator. Both stages
    keep their best-so-far iterate, so stage 2 never ends above stage 1.
    """
    cfg = config or InversionConfig()
    G = generator
    target = torch.as_tensor(check_images(image, G.resolution))
    if len(target) != 1:
        raise ValueError("invert expects a single image")
    if pose is None:
        if pose_net is None:
            raise ValueError("either pose_net or pose is required")
        pose = pose_net.estimate(target)[0]
    pose = torch.as_tensor(pose, dtype=torch.float32).reshape(2).detach()
    seed, ns = cfg.render_seed, cfg.n_samples

    # stage 1: latent optimisation -----------------------------------------
    w = G.mean_w(cfg.mean_w_samples, seed=cfg.render_seed).detach().clone().requires_grad_(True)
    z_d = None
    params = [w]
    if G.deformation is not None:
        z_d = torch.zeros(1, G.cfg.zd_dim)
        if cfg.optimize_deformation:
            z_d.requires_grad_(True)
            params.append(z_d)
    with torch.no_grad():
        best = _mse(G, w, z_d, pose, target, seed, ns).item()
    _check_finite(best, "latent stage", 0)
    best_w, best_zd = w.detach().clone(), None if z_d is None else z_d.detach().clone()
    trace = [best]
    flags = [p.requires_grad for p in G.parameters()]
    G.requires_grad_(False)
    try:
        opt = torch.optim.Adam(params, lr=cfg.latent_lr)
        for step in range(cfg.latent_steps):
            loss = _mse(G, w, z_d, pose, target, seed, ns)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            with torch.no_grad():
                err = _mse(G, w, z_d, pose, target, seed, ns).item()
            _check_finite(err, "latent stage", step + 1)
            if err < best:
                best = err
                best_w = w.detach().clone()
                best_zd = None if z_d is None else z_d.detach().clone()
            trace.append(best)
    finally:
        for p, flag in zip(G.parameters(), flags):
            p.requires_grad_(flag)
    latent_error = best

    # stage 2: pivotal tuning ----------------------------------------------
    tuned = copy.deepcopy(G)
    tuned.requires_grad_(False)
    tuned_params = [p for name, p in tuned.named_parameters()
                    if cfg.tune_deformation or not name.startswith("deformation.")]
    for p in tuned_params:
        p.requires_grad_(True)
    best_state = copy.deepcopy(tuned.state_dict())
    pivot_trace = [best]
    if cfg.pivotal_steps:
        opt = torch.optim.Adam(tuned_params, lr=cfg.pivotal_lr)
        for step in range(cfg.pivotal_steps):
            loss = _mse(tuned, best_w, best_zd, pose, target, seed, ns)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            with torch.no_grad():
                err = _mse(tuned, best_w, best_zd, pose, target, seed, ns).item()
            _check_finite(err, "pivotal stage", step + 1)
            if err < best:
                best = err
                best_state = copy.deepcopy(tuned.state_dict())
            pivot_trace.append(best)
        tuned.load_state_dict(best_state)
    tuned.requires_grad_(False)
    tuned.eval()
    return InversionResult(w=best_w, z_d=best_zd, pose=pose, generator=tuned, latent_trace=trace,
                           pivotal_trace=pivot_trace, latent_error=latent_error, final_error=best,
                           render_seed=seed, n_samples=ns)


@torch.no_grad()
def novel_view(result: InversionResult, yaw, pitch) -> RenderOutput:
    """Render the inverted latent with the tuned generator at a new pose (same render seed)."""
    pose = torch.stack([torch.as_tensor(yaw, dtype=torch.float32), torch.as_tensor(pitch, dtype=torch.float32)])
    return _render(result.generator, result.w, result.z_d, pose, result.render_seed, result.n_samples)


def save_inversion(path, result: InversionResult) -> None:
    arrays = {"w": result.w.numpy(), "pose": result.pose.numpy()}
    if result.z_d is not None:
        arrays["z_d"] = result.z_d.numpy()
    arrays.update(ckpt.module_arrays("G", result.generator))
    header = {"kind": "inversion", "latent_trace": result.latent_trace, "pivotal_trace": result.pivotal_trace,
              "latent_error": result.latent_error, "final_error": result.final_error,
              "render_seed": result.render_seed, "n_samples": result.n_samples,
              "has_deformation": result.generator.deformation is not None}
    ckpt.save(path, arrays, header)


def load_inversion(path, template: TriPlaneGenerator) -> InversionResult:
    """Restore an inversion; ``template`` supplies the generator architecture."""
    arrays, header = ckpt.load(path)
    if header.get("kind") != "inversion":
        raise ckpt.CheckpointError(f"{path} is not an inversion artifact")
    G = copy.deepcopy(template)
    if header["has_deformation"] and G.deformation is None:
        G.attach_deformation()
    elif not header["has_deformation"]:
        G.deformation = None
    ckpt.load_module("G", G, arrays)
    G.requires_grad_(False)
    G.eval()
    z_d = torch.from_numpy(arrays["z_d"]) if "z_d" in arrays else None
    return InversionResult(w=torch.from_numpy(arrays["w"]), z_d=z_d, pose=torch.from_numpy(arrays["pose"]),
                           generator=G, latent_trace=header["latent_trace"],
                           pivotal_trace=header["pivotal_trace"], latent_error=header["latent_error"],
                           final_error=header["final_error"], render_seed=header["render_seed"],
                           n_samples=header["n_samples"])


# editing --------------------------------------------------------------------

@dataclass
class EditDirection:
    direction: np.ndarray  # (w_dim,), unit norm
    attribute: str = "attribute"
    accuracy: float = math.nan  # held-out classifier accuracy
    low_confidence: bool = False

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(d)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("direction must be a non-zero finite vector")
        self.direction = d / norm


def fit_logistic(X, y, l2: float = 1e-4, tol: float = 1e-6, max_iter: int = 20000):
    """Full-batch gradient descent on the L2-regularised logistic loss.

    Stops when the gradient norm drops below ``tol``. The step size is the
    inverse Lipschitz constant of the gradient, so the iteration is monotone.
    Returns ``(weights, bias, n_iter)``.
    """
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(y, dtype=np.float64)
    n = len(X)
    Xb = np.hstack([X, np.ones((n, 1))])
    lip = 0.25 * np.linalg.eigvalsh(Xb.T @ Xb / n).max() + l2
    step = 1.0 / lip
    theta = np.zeros(Xb.shape[1])
    reg = np.full(Xb.shape[1], l2)
    reg[-1] = 0.0
    for it in range(1, max_iter + 1):
        p = 0.5 * (1.0 + np.tanh(0.5 * (Xb @ theta)))
        grad = Xb.T @ (p - t) / n + reg * theta
        if np.linalg.norm(grad) < tol:
            break
        theta -= step * grad
    return theta[:-1], theta[-1], it


class EditDirectionFinder(ClassifierMixin, BaseEstimator):
    """Linear attribute boundary in w-space; the unit normal is the edit direction."""

    def __init__(self, l2: float = 1e-4, tol: float = 1e-6, max_iter: int = 20000,
                 holdout: float = 0.25, min_per_class: int = 10, seed: int = 0, attribute: str = "attribute"):
        self.l2 = l2
        self.tol = tol
        self.max_iter = max_iter
        self.holdout = holdout
        self.min_per_class = min_per_class
        self.seed = seed
        self.attribute = attribute

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y).astype(int).reshape(-1)
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError("expected X of shape (N, D) and y of length N")
        if not np.isfinite(X).all():
            raise ValueError("X contains non-finite values")
        classes = np.unique(y)
        if len(classes) != 2 or set(classes) != {0, 1}:
            raise ValueError("labels must contain both classes 0 and 1")
        counts = np.bincount(y, minlength=2)
        if counts.min() < self.min_per_class:
            raise ValueError(f"need at least {self.min_per_class} samples per class, got {counts.tolist()}")
        self.classes_ = np.array([0, 1])
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(X))
        n_hold = int(round(self.holdout * len(X)))
        hold, train = order[:n_hold], order[n_hold:]
        if n_hold and len(np.unique(y[train])) == 2:
            w, b, _ = fit_logistic(X[train], y[train], self.l2, self.tol, self.max_iter)
            acc = float(np.mean(((X[hold] @ w + b) > 0).astype(int) == y[hold]))
            # one-sided binomial bound: chance-level accuracy stays below 0.5 + 2 sigma
            self.heldout_accuracy_ = acc
            self.low_confidence_ = acc < 0.5 + 2.0 * math.sqrt(0.25 / n_hold)
        else:
            self.heldout_accuracy_ = math.nan
            self.low_confidence_ = True
        self.coef_, self.intercept_, self.n_iter_ = fit_logistic(X, y, self.l2, self.tol, self.max_iter)
        if np.linalg.norm(self.coef_) == 0:
            raise ValueError("degenerate classifier (zero weight vector)")
        return self

    def decision_function(self, X):
        return np.asarray(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    @property
    def direction_(self) -> EditDirection:
        return EditDirection(self.coef_, self.attribute, self.heldout_accuracy_, self.low_confidence_)


def find_edit_direction(samples, attribute: str = "attribute", **kwargs) -> EditDirection:
    """``samples`` is a sequence of ``(w, label)`` pairs with binary labels."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    X = np.stack([np.asarray(torch.as_tensor(w).detach().reshape(-1), np.float64) for w, _ in samples])
    y = np.array([int(lbl) for _, lbl in samples])
    return EditDirectionFinder(attribute=attribute, **kwargs).fit(X, y).direction_


def edit(w, direction, strength: float):
    """``w + strength * direction`` (direction is an :class:`EditDirection` or a unit vector)."""
    d = direction.direction if isinstance(direction, EditDirection) else direction
    if isinstance(w, torch.Tensor):
        return w + strength * torch.as_tensor(d, dtype=w.dtype).reshape(w.shape[-1])
    return np.asarray(w) + strength * np.asarray(d)


def save_directions(path, directions: dict[str, EditDirection]) -> None:
    arrays = {f"direction/{name}": d.direction for name, d in directions.items()}
    meta = {name: {"attribute": d.attribute, "accuracy": None if math.isnan(d.accuracy) else d.accuracy,
                   "low_confidence": d.low_confidence} for name, d in directions.items()}
    ckpt.save(path, arrays, {"kind": "directions", "directions": meta})


def load_directions(path) -> dict[str, EditDirection]:
    arrays, header = ckpt.load(path)
    if header.get("kind") != "directions":
        raise ckpt.CheckpointError(f"{path} is not a direction file")
    out = {}
    for name, meta in header["directions"].items():
        acc = meta["accuracy"]
        out[name] = EditDirection(arrays[f"direction/{name}"], meta["attribute"],
                                  math.nan if acc is None else acc, meta["low_confidence"])
    return out
