"""Optimization loops for the three-branch domain-adaptive regime and the
single-branch baseline: classic Adam with L2 weight decay, step-decay learning
rate, per-step component logging, and epoch-end checkpoints.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError, Tensor, zero_grads
from .data import (ImageCache, PreprocessConfig, SplitManifest, batch_iter,
                   make_triplet, preprocess)
from .losses import BTConfig, DA_COMPONENTS, pose_loss, total_da_loss
from .model import AprModel, BranchOutput
from .scene import load_png


class NumericError(RuntimeError):
    """Training hit a non-finite value; the last epoch checkpoint is retained."""


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "da"                 # "da" | "sb"
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    step_size: int = 20
    gamma: float = 0.5
    bt: BTConfig = field(default_factory=BTConfig)
    seed: int = 0
    short_side: int = 72
    crop: int = 64

    def validate(self) -> None:
        if self.regime not in ("da", "sb"):
            raise ContractError(f"regime must be 'da' or 'sb', got {self.regime!r}")
        if self.lr <= 0 or not (0 < self.gamma <= 1) or self.epochs < 1:
            raise ContractError("need lr > 0, 0 < gamma <= 1, epochs >= 1")
        if self.regime == "da" and self.batch_size < 2:
            raise ContractError(
                "domain-adaptive training needs batch_size >= 2 for the "
                "batch-standardized twin loss")
        self.bt.validate()

    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(short_side=self.short_side, crop=self.crop)


#: named presets; the desk preset trains in minutes on a laptop CPU, the paper
#: presets document the full-scale schedules
PRESETS = {
    "desk": dict(epochs=60, batch_size=16, lr=1e-3, weight_decay=1e-4,
                 step_size=20, gamma=0.5, short_side=72, crop=64),
    "paper-indoor": dict(epochs=120, batch_size=32, lr=1e-3, weight_decay=1e-4,
                         step_size=20, gamma=0.5, short_side=256, crop=224),
    "paper-outdoor": dict(epochs=600, batch_size=64, lr=1e-3, weight_decay=1e-4,
                          step_size=150, gamma=0.1, short_side=256, crop=224),
}


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr * gamma ** floor(epoch / step_size)."""
    return cfg.lr * cfg.gamma ** (epoch // cfg.step_size)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr_t: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    """One bias-corrected Adam update; weight decay adds w*p to the gradient."""
    beta1, beta2 = betas
    state.t += 1
    t = state.t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if weight_decay:
            g = g + weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * (g * g)
        m_hat = state.m[name] / (1 - beta1 ** t)
        v_hat = state.v[name] / (1 - beta2 ** t)
        p.data = p.data - lr_t * m_hat / (np.sqrt(v_hat) + eps)
    return state


# -- batch assembly -------------------------------------------------------------


def load_triplet_batch(records, manifest: SplitManifest, pre: PreprocessConfig,
                       mode: str, rng: np.random.Generator | None,
                       loader=load_png):
    """Stack per-style image arrays and labels for one batch of records."""
    triplets = [make_triplet(r, manifest, pre, mode, rng, loader=loader)
                for r in records]
    images = {
        "real": np.stack([t.image_real for t in triplets]),
        "fog": np.stack([t.image_fog for t in triplets]),
        "night": np.stack([t.image_night for t in triplets]),
    }
    gt_t = np.stack([t.label_t for t in triplets])
    gt_q = np.stack([t.label_q for t in triplets])
    return images, gt_t, gt_q


def load_real_batch(records, manifest: SplitManifest, pre: PreprocessConfig,
                    mode: str, rng: np.random.Generator | None,
                    loader=load_png):
    """Stack real-domain images and labels only (single-branch training)."""
    images = []
    for record in records:
        raw = loader(manifest.image_path(record, "real"))
        images.append(preprocess(raw, pre, mode, rng=rng))
    gt_t = np.stack([r.t for r in records])
    gt_q = np.stack([r.q for r in records])
    return np.stack(images), gt_t, gt_q


def da_batch_loss(model: AprModel, images: dict[str, np.ndarray], gt_t, gt_q,
                  bt: BTConfig, mode: str = "train",
                  rng: np.random.Generator | None = None):
    """Forward the three shared-weight branches and combine the full objective."""
    branches: dict[str, BranchOutput] = {}
    for style in ("real", "fog", "night"):
        branches[style] = model.forward(Tensor(images[style]), mode=mode, rng=rng)
    return total_da_loss(branches, gt_t, gt_q, bt, model.scales)


def sb_batch_loss(model: AprModel, images_real: np.ndarray, gt_t, gt_q,
                  mode: str = "train", rng: np.random.Generator | None = None):
    """Single-branch pose objective on real images only."""
    out = model.forward(Tensor(images_real), mode=mode, rng=rng)
    loss = pose_loss(out.pose, gt_t, gt_q, model.scales)
    return loss, {"pose_real": loss.item()}


def optimize_step(model: AprModel, loss: Tensor, state: AdamState, lr_t: float,
                  cfg: TrainConfig) -> None:
    """Backward pass plus one Adam update over every trainable tensor."""
    trainable = model.trainable()
    zero_grads(trainable.values())
    loss.backward()
    grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
    adam_step(trainable, grads, state, lr_t, weight_decay=cfg.weight_decay)


# -- training loops ---------------------------------------------------------------


@dataclass
class TrainResult:
    final_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    steps: int
    wall_seconds: float


def _epoch_shuffle_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 0xeb0c, epoch]).generate_state(1)[0])


def _format_log_row(step: int, loss: float, components: dict[str, float],
                    columns) -> str:
    values = " ".join(f"{components[c]:.17g}" for c in columns)
    return f"{step} {loss:.17g} {values}"


def _run_training(model: AprModel, manifest: SplitManifest, cfg: TrainConfig,
                  out_dir: Path, step_fn, log_columns) -> TrainResult:
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / f"loss_{cfg.regime}.log"
    last_path = out_dir / "checkpoint_last"
    final_path = out_dir / "checkpoint_final"
    ss = np.random.SeedSequence([cfg.seed, 0xada9])
    crop_ss, drop_ss = ss.spawn(2)
    crop_rng = np.random.default_rng(crop_ss)
    drop_rng = np.random.default_rng(drop_ss)

    start = time.monotonic()
    state = AdamState()
    step = 0
    with open(log_path, "w") as log:
        log.write("# step loss " + " ".join(log_columns) + "\n")
        for epoch in range(cfg.epochs):
            lr_t = lr_schedule(epoch, cfg)
            shuffle_seed = _epoch_shuffle_seed(cfg.seed, epoch)
            for records in batch_iter(manifest, cfg.batch_size, shuffle_seed, "train"):
                if cfg.regime == "da" and len(records) < 2:
                    continue  # the twin loss is undefined on a single sample
                loss, components = step_fn(records, crop_rng, drop_rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(
                        f"non-finite loss {value} at step {step}; last good "
                        f"checkpoint: {last_path}")
                optimize_step(model, loss, state, lr_t, cfg)
                log.write(_format_log_row(step, value, components, log_columns) + "\n")
                step += 1
            model.save(last_path)
    model.save(final_path)
    return TrainResult(final_checkpoint=final_path, last_checkpoint=last_path,
                       log_path=log_path, steps=step,
                       wall_seconds=time.monotonic() - start)


def train_da(model: AprModel, manifest: SplitManifest, cfg: TrainConfig,
             out_dir) -> TrainResult:
    """Three shared-weight branches over per-pose domain triplets."""
    if cfg.regime != "da":
        cfg = dataclasses.replace(cfg, regime="da")
    pre = cfg.preprocess()
    cache = ImageCache()

    def step_fn(records, crop_rng, drop_rng):
        images, gt_t, gt_q = load_triplet_batch(records, manifest, pre, "train",
                                                crop_rng, loader=cache.load)
        return da_batch_loss(model, images, gt_t, gt_q, cfg.bt, rng=drop_rng)

    return _run_training(model, manifest, cfg, out_dir, step_fn, DA_COMPONENTS)


def train_sb(model: AprModel, manifest: SplitManifest, cfg: TrainConfig,
             out_dir) -> TrainResult:
    """Single-branch baseline on real images with the pose objective only."""
    if cfg.regime != "sb":
        cfg = dataclasses.replace(cfg, regime="sb")
    pre = cfg.preprocess()
    cache = ImageCache()

    def step_fn(records, crop_rng, drop_rng):
        images, gt_t, gt_q = load_real_batch(records, manifest, pre, "train",
                                             crop_rng, loader=cache.load)
        return sb_batch_loss(model, images, gt_t, gt_q, rng=drop_rng)

    return _run_training(model, manifest, cfg, out_dir, step_fn, ("pose_real",))
