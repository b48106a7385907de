"""Synthetic focal-stack scenes rendered with a thin-lens defocus model.

A scene is a registered triple: an all-in-focus RGB image, S refocused
slices, and a ground-truth depth map normalized to [0,1].  Each slice s is
the RGB image blurred pixel-by-pixel with a Gaussian whose width grows with
the distance between the pixel's depth and the slice's focus depth:

    sigma(x) = k * |depth(x) - d_s|

using a square window of per-pixel radius ceil(3*sigma), renormalized over
the taps that land inside the image.  Pixels exactly in focus copy through
untouched.  Focus depths sit at the midpoints of S equal depth bins.

On disk a scene is a directory: rgb.ppm (P6), focal_00.ppm .. focal_{S-1}.ppm,
depth.pgm (P5, 16-bit big-endian, round(depth*65535)), and meta.json.  A
dataset is a directory of such scene folders plus manifest.json naming the
train/test split.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError, UsageError
from .pnm import read_pgm16, read_ppm, write_pgm16, write_ppm

DEPTH_STYLES = ("planes", "slanted", "blobs")
TEXTURE_STYLES = ("checker", "noise", "stripes")


@dataclass(frozen=True)
class GenSpec:
    height: int = 64
    width: int = 64
    slices: int = 12
    blur_gain: float = 4.0      # sigma in pixels per unit depth offset
    depth_style: str = "planes"
    texture_style: str = "checker"
    seed: int = 0

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ConfigError(f"scene size must be divisible by 16, got {self.height}x{self.width}")
        if self.slices < 2:
            raise ConfigError(f"need at least 2 slices, got {self.slices}")
        if self.blur_gain < 0:
            raise ConfigError(f"blur gain must be >= 0, got {self.blur_gain}")
        if self.depth_style not in DEPTH_STYLES:
            raise ConfigError(f"depth style must be one of {DEPTH_STYLES}, got {self.depth_style!r}")
        if self.texture_style not in TEXTURE_STYLES:
            raise ConfigError(
                f"texture style must be one of {TEXTURE_STYLES}, got {self.texture_style!r}"
            )


@dataclass
class Scene:
    rgb: np.ndarray            # [3,H,W] float64 in [0,1]
    focal: np.ndarray          # [S,3,H,W]
    depth: np.ndarray          # [1,H,W] in [0,1]
    focus_depths: np.ndarray   # [S], strictly increasing in (0,1)


def focus_depths(slices: int) -> np.ndarray:
    """Midpoints of ``slices`` equal depth bins."""
    return (np.arange(slices) + 0.5) / slices


# -- field synthesis ---------------------------------------------------------


def _depth_field(spec: GenSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.depth_style == "planes":
        depth = np.full((h, w), float(rng.uniform(0.15, 0.85)))
        for _ in range(int(rng.integers(2, 5))):
            y0, x0 = int(rng.integers(0, h - 4)), int(rng.integers(0, w - 4))
            y1 = int(rng.integers(y0 + 4, h + 1))
            x1 = int(rng.integers(x0 + 4, w + 1))
            depth[y0:y1, x0:x1] = rng.uniform(0.1, 0.9)
        return depth
    if spec.depth_style == "slanted":
        yy, xx = np.mgrid[0:h, 0:w]
        gx, gy = rng.uniform(-1, 1, 2)
        ramp = gx * xx / w + gy * yy / h
        lo, hi = ramp.min(), ramp.max()
        span = hi - lo if hi > lo else 1.0
        return 0.1 + 0.8 * (ramp - lo) / span
    # blobs
    yy, xx = np.mgrid[0:h, 0:w]
    depth = np.full((h, w), float(rng.uniform(0.3, 0.7)))
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(0.1, 0.3) * min(h, w)
        bump = rng.uniform(-0.4, 0.4) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2)
        )
        depth += bump
    return np.clip(depth, 0.05, 0.95)


def _texture(spec: GenSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.texture_style == "checker":
        cell = int(rng.integers(4, 9))
        yy, xx = np.mgrid[0:h, 0:w]
        parity = ((yy // cell) + (xx // cell)) % 2
        c0, c1 = rng.uniform(0.1, 0.9, (2, 3))
        img = np.where(parity[None], c1[:, None, None], c0[:, None, None])
        img = img + rng.normal(0, 0.02, (3, h, w))
        return np.clip(img, 0.0, 1.0)
    if spec.texture_style == "noise":
        coarse = rng.uniform(0.1, 0.9, (3, max(2, h // 8), max(2, w // 8)))
        img = np.stack([_upsample_nn_smooth(c, h, w) for c in coarse])
        return np.clip(img, 0.0, 1.0)
    # stripes
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.zeros((3, h, w))
    for c in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2, 8) * 2 * np.pi / max(h, w)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img[c] = 0.5 + 0.4 * wave
    return np.clip(img, 0.0, 1.0)


def _upsample_nn_smooth(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor upsample followed by a small box smoothing."""
    ch, cw = coarse.shape
    ys = np.minimum((np.arange(h) * ch) // h, ch - 1)
    xs = np.minimum((np.arange(w) * cw) // w, cw - 1)
    img = coarse[ys[:, None], xs[None, :]]
    padded = np.pad(img, 1, mode="edge")
    return (
        padded[:-2, :-2] + padded[:-2, 1:-1] + padded[:-2, 2:]
        + padded[1:-1, :-2] + padded[1:-1, 1:-1] + padded[1:-1, 2:]
        + padded[2:, :-2] + padded[2:, 1:-1] + padded[2:, 2:]
    ) / 9.0


# -- defocus rendering ---------------------------------------------------------


def defocus_blur(img: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Spatially varying Gaussian gather over square per-pixel windows.

    ``img`` is [C,H,W]; ``sigma`` is [H,W] of non-negative widths.  Window
    radius is ceil(3*sigma) per pixel; weights renormalize over in-bounds
    taps; sigma == 0 pixels copy through exactly.
    """
    c, h, w = img.shape
    if sigma.shape != (h, w):
        raise UsageError(f"sigma {sigma.shape} does not match image {img.shape}")
    if np.any(sigma < 0):
        raise UsageError("sigma must be non-negative")
    active = sigma > 0.0
    if not np.any(active):
        return img.copy()

    radius = np.zeros((h, w), dtype=np.int64)
    radius[active] = np.ceil(3.0 * sigma[active]).astype(np.int64)
    rmax = int(radius.max())

    inv_two_s2 = np.zeros((h, w))
    inv_two_s2[active] = 1.0 / (2.0 * sigma[active] ** 2)

    num = np.zeros((c, h, w))
    den = np.zeros((h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    for dy in range(-rmax, rmax + 1):
        for dx in range(-rmax, rmax + 1):
            inside = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
            sy, sx = ys + dy, xs + dx
            inside &= (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
            if not np.any(inside):
                continue
            wgt = np.where(
                inside, np.exp(-(dy * dy + dx * dx) * inv_two_s2), 0.0
            )
            syc, sxc = np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)
            num += wgt[None] * img[:, syc, sxc]
            den += wgt

    out = img.copy()
    out[:, active] = num[:, active] / den[active]
    return out


def generate_scene(spec: GenSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    depth = _depth_field(spec, rng)
    rgb = _texture(spec, rng)
    ds = focus_depths(spec.slices)
    focal = np.empty((spec.slices, 3, spec.height, spec.width))
    for s, d in enumerate(ds):
        focal[s] = defocus_blur(rgb, spec.blur_gain * np.abs(depth - d))
    return Scene(rgb=rgb, focal=focal, depth=depth[None], focus_depths=ds)


# -- augmentation -----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    flip_chance: float = 0.5
    max_rotation_deg: float = 5.0
    color_low: float = 0.6
    color_high: float = 1.4


def _rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate [*,H,W] about the center, bilinear sampling, reflect padding."""
    *lead, h, w = img.shape
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    # inverse map: output pixel pulls from rotated source coordinates
    sy = cy + (yy - cy) * cos - (xx - cx) * sin
    sx = cx + (yy - cy) * sin + (xx - cx) * cos

    def reflect(v, n):
        # reflect without repeating the border sample (period 2n-2)
        v = np.abs(v)
        period = 2 * n - 2 if n > 1 else 1
        v = v % period
        return np.where(v >= n, period - v, v)

    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy, fx = sy - y0, sx - x0
    flat = img.reshape(-1, h, w)
    out = np.empty_like(flat)
    corners = [
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ]
    acc = np.zeros((flat.shape[0], h, w))
    for cyi, cxi, wgt in corners:
        iy = reflect(cyi, h).astype(np.int64)
        ix = reflect(cxi, w).astype(np.int64)
        acc += wgt[None] * flat[:, iy, ix]
    out[:] = acc
    return out.reshape(*lead, h, w)


def _grayscale(img: np.ndarray) -> np.ndarray:
    """Luminance of [...,3,H,W], keeping the channel axis."""
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    lum = 0.299 * r + 0.587 * g + 0.114 * b
    return np.repeat(lum[..., None, :, :], 3, axis=-3)


def _color_jitter(img: np.ndarray, brightness: float, contrast: float,
                  saturation: float) -> np.ndarray:
    out = img * brightness
    # contrast pulls toward each image's own mean luminance
    mean = _grayscale(out).mean(axis=(-3, -2, -1), keepdims=True)
    out = mean + contrast * (out - mean)
    gray = _grayscale(out)
    out = gray + saturation * (out - gray)
    return np.clip(out, 0.0, 1.0)


def augment(scene: Scene, rng: np.random.Generator,
            policy: AugmentPolicy = AugmentPolicy()) -> Scene:
    """Jointly flip/rotate all maps; color-jitter the images but not depth."""
    rgb, focal, depth = scene.rgb, scene.focal, scene.depth
    if rng.random() < policy.flip_chance:
        rgb = rgb[:, :, ::-1]
        focal = focal[:, :, :, ::-1]
        depth = depth[:, :, ::-1]
    degrees = float(rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg))
    if degrees != 0.0:
        rgb = _rotate_bilinear(rgb, degrees)
        focal = _rotate_bilinear(focal, degrees)
        depth = _rotate_bilinear(depth, degrees)
        depth = np.clip(depth, 0.0, 1.0)
    b, c, s = rng.uniform(policy.color_low, policy.color_high, 3)
    rgb = _color_jitter(np.ascontiguousarray(rgb), b, c, s)
    focal = _color_jitter(np.ascontiguousarray(focal), b, c, s)
    return Scene(
        rgb=rgb,
        focal=focal,
        depth=np.ascontiguousarray(depth),
        focus_depths=scene.focus_depths.copy(),
    )


# -- on-disk format ---------------------------------------------------------------


def write_scene(scene: Scene, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    write_ppm(os.path.join(dirpath, "rgb.ppm"), _to_u8(scene.rgb))
    for s in range(scene.focal.shape[0]):
        write_ppm(os.path.join(dirpath, f"focal_{s:02d}.ppm"), _to_u8(scene.focal[s]))
    write_pgm16(
        os.path.join(dirpath, "depth.pgm"),
        np.round(scene.depth[0] * 65535.0).astype(np.uint16),
    )
    meta = {
        "slices": int(scene.focal.shape[0]),
        "focus_depths": [float(d) for d in scene.focus_depths],
    }
    with open(os.path.join(dirpath, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def read_scene(dirpath) -> Scene:
    meta_path = os.path.join(dirpath, "meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except OSError as err:
        raise FormatError(f"{meta_path}: {err}") from None
    except json.JSONDecodeError as err:
        raise FormatError(f"{meta_path}: bad JSON at offset {err.pos}") from None
    try:
        slices = int(meta["slices"])
        ds = np.asarray([float(v) for v in meta["focus_depths"]])
    except (KeyError, TypeError, ValueError) as err:
        raise FormatError(f"{meta_path}: bad metadata ({err})") from None
    if len(ds) != slices or np.any(np.diff(ds) <= 0):
        raise FormatError(f"{meta_path}: focus depths must be strictly increasing, one per slice")

    rgb = read_ppm(os.path.join(dirpath, "rgb.ppm")).astype(np.float64) / 255.0
    focal = np.stack(
        [
            read_ppm(os.path.join(dirpath, f"focal_{s:02d}.ppm")).astype(np.float64) / 255.0
            for s in range(slices)
        ]
    )
    depth = read_pgm16(os.path.join(dirpath, "depth.pgm")).astype(np.float64) / 65535.0
    return Scene(rgb=rgb, focal=focal, depth=depth[None], focus_depths=ds)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- dataset ---------------------------------------------------------------------


def generate_dataset(root, count: int, base: GenSpec, train_fraction: float = 0.8) -> dict:
    """Write ``count`` scenes under ``root`` with a train/test manifest.

    Scene i uses seed base.seed + i and cycles through depth/texture styles
    so both splits cover every combination.
    """
    if count < 2:
        raise UsageError(f"need at least 2 scenes for a split, got {count}")
    os.makedirs(root, exist_ok=True)
    names = []
    for i in range(count):
        spec = replace(
            base,
            seed=base.seed + i,
            depth_style=DEPTH_STYLES[i % len(DEPTH_STYLES)],
            texture_style=TEXTURE_STYLES[(i // len(DEPTH_STYLES)) % len(TEXTURE_STYLES)],
        )
        name = f"scene_{i:04d}"
        write_scene(generate_scene(spec), os.path.join(root, name))
        names.append(name)
    cut = max(1, int(round(count * train_fraction)))
    cut = min(cut, count - 1)
    manifest = {"train": names[:cut], "test": names[cut:]}
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_split(root, split: str) -> list[Scene]:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as err:
        raise FormatError(f"{path}: {err}") from None
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: bad JSON at offset {err.pos}") from None
    if split not in manifest:
        raise UsageError(f"manifest has no split {split!r}; available: {list(manifest)}")
    return [read_scene(os.path.join(root, name)) for name in manifest[split]]
