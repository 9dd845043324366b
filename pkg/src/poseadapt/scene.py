"""Deterministic synthetic scenes: Gaussian-splat landmark rendering, analytic
photometric domain stylizers, smooth closed-loop camera trajectories, and the
on-disk dataset builder.

Every output is a pure function of the seeds involved, so datasets are
bit-reproducible. Stylizers only touch photometry; the camera geometry of an
image is never altered.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import quat
from .autodiff import ContractError
from .model import ConfigError

#: weak styles participate in training; strong styles stay unseen until eval
SEEN_STYLES = ("real", "fog", "night")
UNSEEN_STYLES = ("mosaic", "udnie", "starry")
ALL_STYLES = SEEN_STYLES + UNSEEN_STYLES


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self) -> None:
        if self.focal <= 0:
            raise ConfigError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")


def default_intrinsics(size: int = 72) -> CameraIntrinsics:
    return CameraIntrinsics(focal=float(size), cx=(size - 1) / 2.0,
                            cy=(size - 1) / 2.0, width=size, height=size)


@dataclass(frozen=True)
class SceneSpec:
    """A cloud of colored spherical landmarks inside a bounding box."""

    seed: int
    positions: np.ndarray      # (K, 3) meters
    colors: np.ndarray         # (K, 3) in [0, 1]
    radii: np.ndarray          # (K,) meters
    extent_lo: np.ndarray      # (3,)
    extent_hi: np.ndarray      # (3,)

    def validate(self) -> None:
        if len(self.positions) < 16:
            raise ConfigError("a scene needs at least 16 landmarks")
        inside = (self.positions >= self.extent_lo).all() and \
                 (self.positions <= self.extent_hi).all()
        if not inside:
            raise ConfigError("all landmarks must lie inside the scene extent")

    @property
    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    def diameter(self) -> float:
        return float(np.linalg.norm(self.extent_hi - self.extent_lo))


def make_scene(seed: int, n_landmarks: int = 48) -> SceneSpec:
    """Sample a landmark cloud in a fixed 8 x 8 x 3 m box."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5ce02]))
    lo = np.array([-4.0, -4.0, -1.5])
    hi = np.array([4.0, 4.0, 1.5])
    positions = rng.uniform(lo, hi, size=(n_landmarks, 3))
    colors = rng.uniform(0.25, 1.0, size=(n_landmarks, 3))
    radii = rng.uniform(0.28, 0.6, size=n_landmarks)
    scene = SceneSpec(seed=seed, positions=positions, colors=colors,
                      radii=radii, extent_lo=lo, extent_hi=hi)
    scene.validate()
    return scene


def render(scene: SceneSpec, pose: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole Gaussian-splat render of a 7-vector pose -> [3, H, W] in [0, 1].

    The pose is camera-to-world: t is the camera center, q rotates camera axes
    into world axes. Landmarks behind the camera are culled; visible ones are
    drawn far-to-near with over-compositing onto a mid-gray background.
    """
    intr.validate()
    pose = np.asarray(pose, dtype=np.float64)
    t, q = pose[:3], pose[3:]
    if abs(np.linalg.norm(q) - 1.0) > 1e-9:
        raise ContractError("render requires a unit-norm pose quaternion")
    r_c2w = quat.to_rotation_matrix(q)
    cam = (scene.positions - t) @ r_c2w       # rows: landmark coords in camera frame

    img = np.full((3, intr.height, intr.width), 0.5)
    visible = cam[:, 2] > 0.15
    if not visible.any():
        return img
    idx = np.nonzero(visible)[0]
    order = idx[np.argsort(-cam[idx, 2])]     # far first

    vv, uu = np.mgrid[0:intr.height, 0:intr.width]
    for i in order:
        x, y, z = cam[i]
        u = intr.focal * x / z + intr.cx
        v = intr.focal * y / z + intr.cy
        sigma = intr.focal * scene.radii[i] / z
        w = 0.9 * np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / (2.0 * sigma * sigma))
        img = img * (1.0 - w) + scene.colors[i].reshape(3, 1, 1) * w
    return img


# -- photometric domain stylizers ---------------------------------------------------


def _normalize_style(tag: str) -> str:
    tag = tag.strip().lower()
    if tag.endswith("-like"):
        tag = tag[:-5]
    return tag


@dataclass(frozen=True)
class DomainStyle:
    tag: str
    params: dict = field(default_factory=dict)


def _fog(img, airlight=0.78, beta=0.5):
    return (1.0 - beta) * img + beta * airlight


def _night(img, gamma=2.2, dim=0.25, blue_gain=1.4):
    out = dim * np.power(img, gamma)
    out[2] = out[2] * blue_gain
    return np.clip(out, 0.0, 1.0)


def _block_average(img, block=4):
    _, h, w = img.shape
    hb = np.add.reduceat(img, np.arange(0, h, block), axis=1)
    counts_h = np.diff(np.append(np.arange(0, h, block), h)).reshape(1, -1, 1)
    hb = hb / counts_h
    wb = np.add.reduceat(hb, np.arange(0, w, block), axis=2)
    counts_w = np.diff(np.append(np.arange(0, w, block), w)).reshape(1, 1, -1)
    wb = wb / counts_w
    return np.repeat(np.repeat(wb, block, axis=1)[:, :h], block, axis=2)[:, :, :w]


def _mosaic(img, block=4, levels=8):
    coarse = _block_average(img, block)
    return np.round(coarse * (levels - 1)) / (levels - 1)


def _udnie(img, contrast=1.5):
    rotated = img[[1, 2, 0]]                  # (R,G,B) -> (G,B,R)
    return np.clip(0.5 + contrast * (rotated - 0.5), 0.0, 1.0)


def _starry(img):
    luma = img.mean(axis=0, keepdims=True)
    chroma = img - luma
    return np.clip((1.0 - luma) + chroma, 0.0, 1.0)


_STYLE_FNS = {
    "real": lambda img: img.copy(),
    "fog": _fog,
    "night": _night,
    "mosaic": _mosaic,
    "udnie": _udnie,
    "starry": _starry,
}


def apply_domain(image: np.ndarray, style) -> np.ndarray:
    """Apply a deterministic, pose-preserving photometric transform."""
    if isinstance(style, DomainStyle):
        tag, params = _normalize_style(style.tag), style.params
    else:
        tag, params = _normalize_style(str(style)), {}
    if tag not in _STYLE_FNS:
        raise ConfigError(f"unknown domain style {tag!r}; choose from {list(_STYLE_FNS)}")
    out = _STYLE_FNS[tag](np.asarray(image, dtype=np.float64), **params)
    return np.clip(out, 0.0, 1.0)


# -- trajectories --------------------------------------------------------------------


def _look_at_rotation(position, target, roll):
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    cos_r, sin_r = np.cos(roll), np.sin(roll)
    x_cam = cos_r * right + sin_r * down
    y_cam = cos_r * down - sin_r * right
    return np.stack([x_cam, y_cam, forward], axis=1)


def sample_trajectory(scene: SceneSpec, n: int, seed: int) -> np.ndarray:
    """n poses on a smooth closed loop around the scene centroid -> (n, 7).

    Radius and height ride on low-order Fourier perturbations of a circle, the
    camera looks at a gently wandering point near the centroid, and roll stays
    within about nine degrees. Quaternions come out unit-norm with q_w >= 0.
    """
    if n < 2:
        raise ContractError(f"a trajectory needs at least 2 poses, got n={n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7ca1]))
    centroid = scene.centroid
    half_xy = 0.5 * float(np.hypot(*(scene.extent_hi - scene.extent_lo)[:2]))
    base_radius = 1.3 * half_xy

    amp_r = rng.uniform(0.04, 0.10, size=3) * base_radius
    ph_r = rng.uniform(0.0, 2 * np.pi, size=3)
    amp_z = rng.uniform(0.3, 0.8, size=2)
    ph_z = rng.uniform(0.0, 2 * np.pi, size=2)
    z0 = rng.uniform(1.2, 2.2)
    amp_tgt = rng.uniform(0.2, 0.6, size=3)
    ph_tgt = rng.uniform(0.0, 2 * np.pi, size=3)
    roll_amp = rng.uniform(0.05, 0.15)
    roll_ph = rng.uniform(0.0, 2 * np.pi)
    theta0 = rng.uniform(0.0, 2 * np.pi)

    poses = np.empty((n, 7))
    for i in range(n):
        theta = theta0 + 2 * np.pi * i / n
        radius = base_radius + sum(a * np.cos((k + 1) * theta + p)
                                   for k, (a, p) in enumerate(zip(amp_r, ph_r)))
        z = z0 + sum(a * np.sin((k + 1) * theta + p)
                     for k, (a, p) in enumerate(zip(amp_z, ph_z)))
        position = centroid + np.array(
            [radius * np.cos(theta), radius * np.sin(theta), z])
        target = centroid + np.array(
            [amp_tgt[0] * np.sin(2 * theta + ph_tgt[0]),
             amp_tgt[1] * np.cos(theta + ph_tgt[1]),
             amp_tgt[2] * np.sin(theta + ph_tgt[2])])
        roll = roll_amp * np.sin(2 * theta + roll_ph)
        rotation = _look_at_rotation(position, target, roll)
        poses[i, :3] = position
        poses[i, 3:] = quat.from_rotation_matrix(rotation)
    return poses


# -- dataset builder -----------------------------------------------------------------


def _save_png(path: Path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return data.transpose(2, 0, 1)


def _format_pose(pose: np.ndarray) -> str:
    return " ".join(f"{v:.17g}" for v in pose)


MANIFEST_HEADER = "# poseadapt manifest: path tx ty tz qw qx qy qz"


def build_dataset(scene: SceneSpec, n_train: int, n_test: int, styles,
                  out_dir, seed: int, render_size: int = 72) -> tuple[Path, Path]:
    """Render both splits in every requested style and write the manifests.

    Returns (train_manifest, test_manifest). Fully reproducible: identical
    inputs give byte-identical manifests and images.
    """
    if n_test < 1:
        raise ContractError("n_test must be at least 1")
    if n_train < 2:
        raise ContractError("n_train must be at least 2")
    styles = [_normalize_style(s) for s in styles]
    if "real" not in styles:
        raise ConfigError("the style list must include 'real'")
    for style in styles:
        if style not in _STYLE_FNS:
            raise ConfigError(f"unknown domain style {style!r}")

    out_dir = Path(out_dir)
    intr = default_intrinsics(render_size)
    manifests = []
    for split, count, traj_seed in (("train", n_train, seed),
                                    ("test", n_test, seed + 1)):
        poses = sample_trajectory(scene, count, traj_seed)
        for style in styles:
            (out_dir / style / split).mkdir(parents=True, exist_ok=True)
        lines = [MANIFEST_HEADER]
        for i, pose in enumerate(poses):
            image = render(scene, pose, intr)
            name = f"img_{i:05d}.png"
            for style in styles:
                _save_png(out_dir / style / split / name, apply_domain(image, style))
            lines.append(f"real/{split}/{name} {_format_pose(pose)}")
        manifest_path = out_dir / f"{split}.manifest"
        manifest_path.write_text("\n".join(lines) + "\n")
        manifests.append(manifest_path)
    return manifests[0], manifests[1]


def augment_dataset(out_dir, styles) -> None:
    """Write additional style variants for an existing dataset's real images."""
    out_dir = Path(out_dir)
    real_root = out_dir / "real"
    if not real_root.is_dir():
        raise FileNotFoundError(f"no real/ image tree under {out_dir}")
    styles = [_normalize_style(s) for s in styles]
    for style in styles:
        if style not in _STYLE_FNS:
            raise ConfigError(f"unknown domain style {style!r}")
    for split_dir in sorted(p for p in real_root.iterdir() if p.is_dir()):
        for style in styles:
            if style == "real":
                continue
            (out_dir / style / split_dir.name).mkdir(parents=True, exist_ok=True)
        for img_path in sorted(split_dir.glob("*.png")):
            image = load_png(img_path)
            for style in styles:
                if style == "real":
                    continue
                _save_png(out_dir / style / split_dir.name / img_path.name,
                          apply_domain(image, style))
