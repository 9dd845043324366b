"""Manifest parsing, image preprocessing, and triplet assembly for the
three-branch trainer.

A manifest is plain text, one `path tx ty tz qw qx qy qz` record per line,
with `#` comments. Records reference the real-domain image; style variants
live in sibling directory trees and share the record's pose.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import quat
from .autodiff import ContractError
from .scene import load_png


class ManifestError(ValueError):
    """A manifest file violates the record format."""


class ImageCache:
    """Decode each image once and keep it as uint8; emit float64 per request."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}

    def load(self, path) -> np.ndarray:
        key = str(path)
        if key not in self._store:
            self._store[key] = np.round(load_png(path) * 255.0).astype(np.uint8)
        return self._store[key].astype(np.float64) / 255.0


@dataclass(frozen=True)
class PoseRecord:
    path: str                 # relative to the dataset root, real-domain image
    t: np.ndarray             # (3,)
    q: np.ndarray             # (4,), unit, q_w >= 0


@dataclass(frozen=True)
class SplitManifest:
    name: str
    root: Path
    records: tuple[PoseRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def styles(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())

    def image_path(self, record: PoseRecord, style: str = "real") -> Path:
        parts = Path(record.path).parts
        return self.root.joinpath(style, *parts[1:])


@dataclass(frozen=True)
class PreprocessConfig:
    """Rescale the shorter side to short_side, then crop a crop x crop square."""

    short_side: int = 72
    crop: int = 64

    def validate(self) -> None:
        if self.crop > self.short_side:
            raise ContractError(
                f"crop {self.crop} cannot exceed the rescaled side {self.short_side}")


@dataclass(frozen=True)
class DomainTriplet:
    image_real: np.ndarray
    image_fog: np.ndarray
    image_night: np.ndarray
    label_t: np.ndarray
    label_q: np.ndarray


def load_manifest(path) -> SplitManifest:
    """Parse a manifest strictly; quaternions are renormalized and canonicalized."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ManifestError(
                f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            values = np.array([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: non-numeric field ({exc})") from None
        q = values[3:]
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise ManifestError(
                f"{path}:{lineno}: quaternion norm {norm:.6f} deviates from 1 "
                f"beyond the 1e-3 tolerance")
        q = quat.canonicalize(q / norm)
        records.append(PoseRecord(path=fields[0], t=values[:3], q=q))
    manifest = SplitManifest(name=path.stem, root=path.parent, records=tuple(records))
    for record in manifest.records:
        full = manifest.root / record.path
        if not full.is_file():
            raise ManifestError(f"{path}: referenced image missing: {full}")
    return manifest


def rescale_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channelwise bilinear resampling with half-pixel-centered coordinates."""
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).reshape(-1, 1)
    wx = np.clip(xs - x0, 0.0, 1.0).reshape(1, -1)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy).reshape(1, -1, 1) + bottom * wy.reshape(1, -1, 1)


def _rescale_short_side(image: np.ndarray, short_side: int) -> np.ndarray:
    _, h, w = image.shape
    if min(h, w) < short_side:
        raise ContractError(
            f"decoded image {h}x{w} is smaller than the target side {short_side}")
    if h <= w:
        out_h, out_w = short_side, round(w * short_side / h)
    else:
        out_h, out_w = round(h * short_side / w), short_side
    return rescale_bilinear(image, out_h, out_w)


def draw_crop_offsets(shape_hw: tuple[int, int], crop: int, mode: str,
                      rng: np.random.Generator | None) -> tuple[int, int]:
    """Top-left crop corner: uniform over the valid range (train), centered (eval)."""
    h, w = shape_hw
    if mode == "train":
        if rng is None:
            raise ContractError("train-mode cropping needs an rng")
        return int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))
    return (h - crop) // 2, (w - crop) // 2


def preprocess(image: np.ndarray, cfg: PreprocessConfig, mode: str,
               rng: np.random.Generator | None = None,
               offsets: tuple[int, int] | None = None) -> np.ndarray:
    """Rescale then crop to a [3, crop, crop] tensor in [0, 1].

    Passing explicit offsets reuses a crop window, which keeps the three
    images of a triplet aligned.
    """
    cfg.validate()
    scaled = _rescale_short_side(np.asarray(image, dtype=np.float64), cfg.short_side)
    if offsets is None:
        offsets = draw_crop_offsets(scaled.shape[1:], cfg.crop, mode, rng)
    oy, ox = offsets
    return scaled[:, oy:oy + cfg.crop, ox:ox + cfg.crop]


def make_triplet(record: PoseRecord, manifest: SplitManifest, cfg: PreprocessConfig,
                 mode: str, rng: np.random.Generator | None = None,
                 loader=load_png) -> DomainTriplet:
    """Load the real/fog/night variants of one record under a shared crop window."""
    images = {}
    offsets = None
    for style in ("real", "fog", "night"):
        path = manifest.image_path(record, style)
        if not path.is_file():
            raise FileNotFoundError(
                f"missing {style} variant for {record.path}: {path}")
        raw = loader(path)
        if offsets is None:
            scaled_shape = _rescale_short_side(raw, cfg.short_side).shape[1:]
            offsets = draw_crop_offsets(scaled_shape, cfg.crop, mode, rng)
        images[style] = preprocess(raw, cfg, mode, offsets=offsets)
    return DomainTriplet(image_real=images["real"], image_fog=images["fog"],
                         image_night=images["night"],
                         label_t=record.t.copy(), label_q=record.q.copy())


def batch_iter(manifest: SplitManifest, batch_size: int, shuffle_seed: int | None,
               mode: str):
    """Yield record batches for one epoch; the final partial batch is kept.

    Training passes a shuffle seed for a deterministic epoch permutation;
    eval iterates in manifest order.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    order = np.arange(len(manifest.records))
    if mode == "train":
        if shuffle_seed is None:
            raise ContractError("train-mode batching needs a shuffle seed")
        np.random.default_rng(shuffle_seed).shuffle(order)
    for start in range(0, len(order), batch_size):
        yield [manifest.records[i] for i in order[start:start + batch_size]]
