"""Realistic image transformations and gradient projections onto them.

Each family turns a raw input gradient into a small, physically plausible
edit (lighting, affine warp, blur, occlusion, overlay blend). ``apply``
always clamps to ``[0, 1]`` so no infeasible image can be produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import UsageError

FAMILIES = ("light", "contrast", "affine", "blur", "occl_rect", "occl_dots", "overlay")
SIGMA_MIN = 1e-3
MASKS = ("fog", "glare", "rain", "drops")


@dataclass(frozen=True)
class BrightnessContrast:
    gain: float = 1.0
    bias: float = 0.0
    family = "light"

    def __post_init__(self):
        if not (np.isfinite(self.gain) and self.gain > 0 and np.isfinite(self.bias)):
            raise UsageError(f"invalid brightness/contrast {self.gain}, {self.bias}")

    def to_dict(self):
        return {"type": "brightness_contrast", "gain": self.gain, "bias": self.bias}


@dataclass(frozen=True)
class Affine:
    """Forward 2x3 map from source to destination pixel coordinates (x = column, y = row)."""

    matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))
    family = "affine"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3) or not np.all(np.isfinite(m)):
            raise UsageError("affine matrix must be a finite 2x3 array")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise UsageError("affine matrix is singular")
        object.__setattr__(self, "matrix", tuple(map(tuple, m.tolist())))

    def to_dict(self):
        return {"type": "affine", "matrix": [list(r) for r in self.matrix]}


@dataclass(frozen=True)
class GaussianBlur:
    sigma: float = SIGMA_MIN
    kernel_size: int = 3
    family = "blur"

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0) or self.kernel_size != 3:
            raise UsageError(f"invalid blur sigma={self.sigma}, kernel_size={self.kernel_size}")

    def to_dict(self):
        return {"type": "gaussian_blur", "sigma": self.sigma, "kernel_size": 3}


@dataclass(frozen=True, eq=False)
class OcclusionRect:
    x: int
    y: int
    w: int
    h: int
    patch: np.ndarray
    family = "occl_rect"

    def to_dict(self):
        return {"type": "occlusion_rect", "x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class OcclusionDots:
    count: int = 0
    color: str = "black"
    positions: tuple = ()
    family = "occl_dots"

    def __post_init__(self):
        if self.color not in ("black", "white") or self.count != len(self.positions):
            raise UsageError("dots need color black|white and one position per dot")

    def to_dict(self):
        return {"type": "occlusion_dots", "color": self.color, "positions": [list(p) for p in self.positions]}


@dataclass(frozen=True, eq=False)
class Overlay:
    """Blend towards an overlay image where ``weight`` is non-zero.

    ``overlay`` holds the overlay colour resized to the image, ``weight`` the
    per-pixel blend weight (mask alpha times the gradient region).
    """

    mask_id: str
    alpha: float
    overlay: np.ndarray | None = None
    weight: np.ndarray | None = field(default=None, repr=False)
    family = "overlay"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise UsageError(f"overlay alpha {self.alpha} outside [0, 1]")

    def to_dict(self):
        return {"type": "overlay", "mask_id": self.mask_id, "alpha": self.alpha}


def _check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3:
        raise UsageError(f"expected an (H, W, C) image, got shape {image.shape}")
    return image


# -- affine ----------------------------------------------------------------


def translation_matrix(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]])


def rotation_scale_matrix(center, angle_deg: float, scale: float = 1.0) -> np.ndarray:
    """Rotate by ``angle_deg`` and scale about ``center = (x, y)``."""
    cx, cy = center
    a = scale * np.cos(np.deg2rad(angle_deg))
    b = scale * np.sin(np.deg2rad(angle_deg))
    return np.array([
        [a, b, (1 - a) * cx - b * cy],
        [-b, a, b * cx + (1 - a) * cy],
    ])


def compose(second, first) -> np.ndarray:
    """Matrix of ``second`` applied after ``first``."""
    s = np.vstack([np.asarray(second, dtype=np.float64), [0, 0, 1]])
    f = np.vstack([np.asarray(first, dtype=np.float64), [0, 0, 1]])
    return (s @ f)[:2]


def random_affine(rng, shape, rotation=15.0, shift=0.1, zoom=(0.9, 1.1)) -> np.ndarray:
    """Uniformly drawn rotation (degrees), shift (fraction of size) and zoom about the centre."""
    h, w = shape[0], shape[1]
    angle = rng.uniform(-rotation, rotation) if rotation else 0.0
    scale = rng.uniform(*zoom) if zoom[1] > zoom[0] else float(zoom[0])
    tx = rng.uniform(-shift, shift) * w if shift else 0.0
    ty = rng.uniform(-shift, shift) * h if shift else 0.0
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    return compose(translation_matrix(tx, ty), rotation_scale_matrix(center, angle, scale))


def warp_affine(image, matrix) -> np.ndarray:
    """Inverse-mapped bilinear sampling; samples outside the image read as zero."""
    image = _check_image(image)
    h, w, _ = image.shape
    full = np.vstack([np.asarray(matrix, dtype=np.float64), [0, 0, 1]])
    inv = np.linalg.inv(full)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    # snap sub-ulp noise so integer shifts stay exact
    sx = np.where(np.abs(sx - np.round(sx)) < 1e-9, np.round(sx), sx)
    sy = np.where(np.abs(sy - np.round(sy)) < 1e-9, np.round(sy), sy)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    out = np.zeros_like(image)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.zeros_like(image)
            vals[ok] = image[yy[ok], xx[ok]]
            out += wy * wx * vals
    return out


# -- blur ------------------------------------------------------------------


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise UsageError(f"sigma must be positive, got {sigma}")
    d = np.arange(-1, 2, dtype=np.float64)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def blur_apply(image, kernel) -> np.ndarray:
    """Same-size 3x3 correlation with edge-replicated borders."""
    image = _check_image(image)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (3, 3):
        raise UsageError("blur kernel must be 3x3")
    h, w, _ = image.shape
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(image)
    for i in range(3):
        for j in range(3):
            out += kernel[i, j] * padded[i:i + h, j:j + w]
    return out


# -- overlay masks -----------------------------------------------------------


@lru_cache(maxsize=32)
def _load_rgba(source: str) -> np.ndarray:
    if source in MASKS:
        ref = resources.files("cornercase") / "assets" / f"{source}.png"
        with resources.as_file(ref) as path:
            img = Image.open(path).convert("RGBA")
    else:
        if not Path(source).exists():
            raise UsageError(f"overlay mask {source!r} is neither a builtin ({', '.join(MASKS)}) nor a file")
        img = Image.open(source).convert("RGBA")
    return np.asarray(img, dtype=np.float64) / 255.0


def load_mask(source: str, shape) -> np.ndarray:
    """RGBA mask resized to the image's ``(H, W)``; values in ``[0, 1]``."""
    rgba = _load_rgba(str(source))
    h, w = shape[0], shape[1]
    if rgba.shape[:2] != (h, w):
        chans = [
            np.asarray(Image.fromarray(rgba[..., c].astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
            for c in range(4)
        ]
        rgba = np.clip(np.stack(chans, axis=-1).astype(np.float64), 0.0, 1.0)
    return rgba


def _overlay_color(rgba: np.ndarray, channels: int) -> np.ndarray:
    rgb = rgba[..., :3]
    if channels == 1:
        return rgb.mean(axis=-1, keepdims=True)
    if channels == 3:
        return rgb
    raise UsageError(f"overlay needs 1 or 3 channels, got {channels}")


# -- apply -------------------------------------------------------------------


def apply(image, spec) -> np.ndarray:
    """Apply a transform spec and clamp the result to ``[0, 1]``."""
    image = _check_image(image)
    h, w, c = image.shape
    if isinstance(spec, BrightnessContrast):
        out = image * spec.gain + spec.bias
    elif isinstance(spec, Affine):
        out = warp_affine(image, spec.matrix)
    elif isinstance(spec, GaussianBlur):
        out = blur_apply(image, gaussian_kernel(spec.sigma))
    elif isinstance(spec, OcclusionRect):
        if spec.x < 0 or spec.y < 0 or spec.w <= 0 or spec.h <= 0 or spec.x + spec.w > w or spec.y + spec.h > h:
            raise UsageError("occlusion rectangle must lie inside the image")
        patch = np.asarray(spec.patch, dtype=np.float64)
        if patch.shape != (spec.h, spec.w, c):
            raise UsageError(f"patch shape {patch.shape} does not match rectangle {(spec.h, spec.w, c)}")
        out = image.copy()
        out[spec.y:spec.y + spec.h, spec.x:spec.x + spec.w] += patch
    elif isinstance(spec, OcclusionDots):
        out = image.copy()
        value = 0.0 if spec.color == "black" else 1.0
        for r, col in spec.positions:
            if not (0 <= r < h and 0 <= col < w):
                raise UsageError(f"dot position {(r, col)} outside the image")
            out[r, col] = value
    elif isinstance(spec, Overlay):
        if spec.alpha == 0.0 or spec.weight is None:
            out = image
        else:
            weight = np.asarray(spec.weight, dtype=np.float64).reshape(h, w, 1)
            out = image + spec.alpha * weight * (np.asarray(spec.overlay) - image)
    else:
        raise UsageError(f"unknown transform spec {type(spec).__name__}")
    return np.clip(out, 0.0, 1.0)


def neutral(family: str, image_shape=None):
    """The identity spec of a family."""
    family, _, mask = family.partition(":")
    if family == "light" or family == "contrast":
        return BrightnessContrast(1.0, 0.0)
    if family == "affine":
        return Affine()
    if family == "blur":
        return GaussianBlur(SIGMA_MIN)
    if family == "occl_rect":
        c = image_shape[2] if image_shape else 1
        return OcclusionRect(0, 0, 1, 1, np.zeros((1, 1, c)))
    if family == "occl_dots":
        return OcclusionDots(0, "black", ())
    if family == "overlay":
        return Overlay(mask or "fog", 0.0)
    raise UsageError(f"unknown constraint family {family!r}")


# -- gradient projection ------------------------------------------------------


def _window_scores(score: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sum of ``score`` over every h x w window, indexed by the window's top-left corner."""
    csum = np.pad(score, ((1, 0), (1, 0))).cumsum(axis=0).cumsum(axis=1)
    return csum[h:, w:] - csum[:-h, w:] - csum[h:, :-w] + csum[:-h, :-w]


def constrain_gradient(
    grad,
    family: str,
    step: float,
    rng=None,
    *,
    image=None,
    rect_size=None,
    dots: int = 4,
    dot_color: str = "black",
    mask=None,
):
    """Project an input gradient onto one transformation family.

    ``family`` is one of ``FAMILIES``; ``overlay:<mask>`` names the mask
    (a builtin name or a PNG path). ``image`` is the current image, needed
    by the contrast, affine and overlay projections.
    """
    grad = _check_image(grad)
    h, w, c = grad.shape
    family, _, mask_name = family.partition(":")
    mask_name = mask_name or mask or "fog"
    if family not in FAMILIES:
        raise UsageError(f"unknown constraint family {family!r}; choose from {', '.join(FAMILIES)}")
    if image is None:
        image = np.zeros_like(grad)
    image = _check_image(image)
    if image.shape != grad.shape:
        raise UsageError(f"gradient shape {grad.shape} differs from image shape {image.shape}")

    if family == "light":
        return BrightnessContrast(1.0, step * float(grad.mean()))

    if family == "contrast":
        gain = 1.0 + step * float((grad * image).mean())
        # gains at or below zero would invert the image
        return BrightnessContrast(max(gain, 1e-3), 0.0)

    if family == "affine":
        # objective change for a displacement u(p): -grad . (spatial gradient of image) . u
        iy, ix = np.gradient(image, axis=(0, 1))
        gx = -(grad * ix).sum(axis=-1)
        gy = -(grad * iy).sum(axis=-1)
        radius = max(h, w) / 2.0
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        px, py = (xs - cx) / radius, (ys - cy) / radius
        t = step * np.array([gx.mean(), gy.mean()])
        lin = step * np.array([
            [(gx * px).mean(), (gx * py).mean()],
            [(gy * px).mean(), (gy * py).mean()],
        ]) / radius
        m = np.eye(2) + lin
        offset = t - lin @ np.array([cx, cy])
        if abs(np.linalg.det(m)) < 1e-6:
            return Affine()
        return Affine(np.hstack([m, offset[:, None]]))

    if family == "blur":
        return GaussianBlur(max(step * float(np.abs(grad).mean()), SIGMA_MIN))

    score = np.abs(grad).sum(axis=-1)
    if family == "occl_rect":
        rh, rw = rect_size or (max(1, h // 4), max(1, w // 4))
        rh, rw = min(rh, h), min(rw, w)
        windows = _window_scores(score, rh, rw)
        y, x = np.unravel_index(int(np.argmax(windows)), windows.shape)
        patch = step * grad[y:y + rh, x:x + rw]
        return OcclusionRect(int(x), int(y), int(rw), int(rh), patch)

    if family == "occl_dots":
        order = np.argsort(-score, axis=None, kind="stable")
        k = int(min(dots, np.count_nonzero(score)))
        positions = tuple((int(i // w), int(i % w)) for i in order[:k])
        return OcclusionDots(k, dot_color, positions)

    # overlay
    rgba = load_mask(mask_name, (h, w))
    color = _overlay_color(rgba, c)
    region = score > np.median(score)
    weight = rgba[..., 3] * region
    alpha = float(np.clip(step * (grad * weight[..., None] * (color - image)).mean(), 0.0, 1.0))
    return Overlay(mask_name, alpha, color, weight)
