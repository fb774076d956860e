"""Training-time augmentation on [3, H, W] float images in [0, 1].

Order: random resized crop -> one composed affine (rotation, translation,
scale, shear; bilinear, reflection padding) -> flips -> colour jitter
(brightness, contrast, saturation, hue) -> clamp.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from ..errors import ConfigError, DataError

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 90.0
    max_translate_frac: float = 0.10
    scale_range: Tuple[float, float] = (0.8, 1.2)
    max_shear_deg: float = 10.0
    jitter_strength: float = 0.5
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    crop_area_range: Tuple[float, float] = (0.6, 1.0)
    crop_aspect_range: Tuple[float, float] = (0.75, 1.333)
    output_size: int = 160

    def __post_init__(self):
        self.validate()

    def validate(self):
        def rng_ok(name, lo_bound, hi_bound):
            lo, hi = getattr(self, name)
            if not (lo_bound <= lo <= hi <= hi_bound):
                raise ConfigError(f"range {(lo, hi)} not within [{lo_bound}, {hi_bound}]",
                                  field=name)

        if not 0 <= self.max_rotation_deg <= 180:
            raise ConfigError("must lie in [0, 180]", field="max_rotation_deg")
        if not 0 <= self.max_translate_frac <= 0.5:
            raise ConfigError("must lie in [0, 0.5]", field="max_translate_frac")
        if not 0 <= self.max_shear_deg < 90:
            raise ConfigError("must lie in [0, 90)", field="max_shear_deg")
        if not 0 <= self.jitter_strength <= 1:
            raise ConfigError("must lie in [0, 1]", field="jitter_strength")
        for name in ("hflip_p", "vflip_p"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError("probability must lie in [0, 1]", field=name)
        rng_ok("scale_range", 1e-3, 10.0)
        rng_ok("crop_area_range", 1e-3, 1.0)
        rng_ok("crop_aspect_range", 1e-3, 1e3)
        if int(self.output_size) < 1:
            raise ConfigError("must be positive", field="output_size")

    @classmethod
    def identity(cls, output_size: int = 160) -> "AugmentConfig":
        return cls(max_rotation_deg=0.0, max_translate_frac=0.0, scale_range=(1.0, 1.0),
                   max_shear_deg=0.0, jitter_strength=0.0, hflip_p=0.0, vflip_p=0.0,
                   crop_area_range=(1.0, 1.0), crop_aspect_range=(1.0, 1.0),
                   output_size=output_size)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc), field="augment") from exc


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent substream for (seed, *keys), e.g. (seed, epoch, sample)."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


# ------------------------------------------------------------- resampling

def _linear_taps(src: np.ndarray, n: int):
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a [C, H, W] array."""
    _, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0, y1, wy = _linear_taps(ys, h)
    x0, x1, wx = _linear_taps(xs, w)
    rows = img[:, y0, :] * (1.0 - wy)[None, :, None] + img[:, y1, :] * wy[None, :, None]
    return rows[:, :, x0] * (1.0 - wx) + rows[:, :, x1] * wx


def _reflect(coord: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(coord)
    period = 2.0 * (n - 1)
    c = np.mod(coord, period)
    return np.where(c > n - 1, period - c, c)


def sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample [C, H, W] at float coordinates with reflection padding."""
    _, h, w = img.shape
    ys = _reflect(ys, h)
    xs = _reflect(xs, w)
    y0, y1, wy = _linear_taps(ys, h)
    x0, x1, wx = _linear_taps(xs, w)
    top = img[:, y0, x0] * (1.0 - wx) + img[:, y0, x1] * wx
    bottom = img[:, y1, x0] * (1.0 - wx) + img[:, y1, x1] * wx
    return top * (1.0 - wy) + bottom * wy


def affine_matrix(angle_deg: float, translate: Tuple[float, float], scale: float,
                  shear_deg: float, center: Tuple[float, float]) -> np.ndarray:
    """3x3 forward map about ``center``: translate . rotate . shear . scale."""
    a = math.radians(angle_deg)
    sh = math.tan(math.radians(shear_deg))
    cx, cy = center
    rot = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0, 0, 1.0]])
    shear = np.array([[1.0, sh, 0.0], [0.0, 1.0, 0.0], [0, 0, 1.0]])
    scl = np.diag([scale, scale, 1.0])
    to_origin = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    back = np.array([[1.0, 0, cx + translate[0]], [0, 1.0, cy + translate[1]], [0, 0, 1.0]])
    return back @ rot @ shear @ scl @ to_origin


def warp_affine(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    if np.array_equal(matrix, np.eye(3)):
        return img.copy()
    _, h, w = img.shape
    inv = np.linalg.inv(matrix)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    src_x = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    src_y = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
    return sample_bilinear(img, src_y, src_x)


# ------------------------------------------------------------------ colour

def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img
    mx = img.max(axis=0)
    mn = img.min(axis=0)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, (g - b) / safe,
                 np.where(mx == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe))
    h = np.where(delta > 0, np.mod(h / 6.0, 1.0), 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    h6 = np.mod(h, 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.empty((3,) + h.shape)
    for c in range(3):
        out[c] = np.select([i == k for k in range(6)], [ch[c] for ch in choices])
    return out


def grayscale(img: np.ndarray) -> np.ndarray:
    return np.tensordot(GRAY_WEIGHTS, img, axes=1)


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor):
    m = grayscale(img).mean()
    return np.clip(factor * img + (1.0 - factor) * m, 0.0, 1.0)


def adjust_saturation(img, factor):
    g = grayscale(img)[None]
    return np.clip(factor * img + (1.0 - factor) * g, 0.0, 1.0)


def adjust_hue(img, delta):
    """Rotate hue by ``delta`` turns of the colour circle."""
    hsv = rgb_to_hsv(img)
    hsv[0] = np.mod(hsv[0] + delta, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


# ---------------------------------------------------------------- pipeline

def _as_array(img) -> np.ndarray:
    # Tensors expose their array as .data; ndarray.data is a raw buffer
    if not isinstance(img, np.ndarray):
        img = getattr(img, "data", img)
    return np.asarray(img, dtype=np.float64)


def _check_image(img: np.ndarray):
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected a [3, H, W] image, got shape {img.shape}")
    if img.shape[1] < 32 or img.shape[2] < 32:
        raise DataError(f"image {img.shape[1]}x{img.shape[2]} smaller than 32x32")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise DataError("pixel values must lie in [0, 1]")


def random_resized_crop(img, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Crop a random area fraction whose aspect is relative to the source's."""
    _, h, w = img.shape
    area = rng.uniform(*cfg.crop_area_range)
    lo, hi = cfg.crop_aspect_range
    aspect = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    ch = min(h, max(1, int(round(h * math.sqrt(area / aspect)))))
    cw = min(w, max(1, int(round(w * math.sqrt(area * aspect)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[:, top : top + ch, left : left + cw]
    return resize_bilinear(crop, cfg.output_size, cfg.output_size)


def augment(img, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One random augmentation of ``img``; output is [3, S, S] in [0, 1]."""
    img = _as_array(img)
    _check_image(img)
    out = random_resized_crop(img, cfg, rng)
    s = cfg.output_size

    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    tx = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) * s
    ty = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) * s
    scl = rng.uniform(*cfg.scale_range)
    shear = rng.uniform(-cfg.max_shear_deg, cfg.max_shear_deg)
    centre = ((s - 1) / 2.0, (s - 1) / 2.0)
    out = warp_affine(out, affine_matrix(angle, (tx, ty), scl, shear, centre))

    if rng.random() < cfg.hflip_p:
        out = out[:, :, ::-1]
    if rng.random() < cfg.vflip_p:
        out = out[:, ::-1, :]

    j = cfg.jitter_strength
    b, c, sat = (rng.uniform(1.0 - j, 1.0 + j) for _ in range(3))
    hue = rng.uniform(-j / 2.0, j / 2.0)
    if j > 0:
        out = adjust_brightness(out, b)
        out = adjust_contrast(out, c)
        out = adjust_saturation(out, sat)
        out = adjust_hue(out, hue)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def preprocess(img, size: int) -> np.ndarray:
    """Validation path: plain bilinear resize to ``size`` x ``size``."""
    img = _as_array(img)
    if img.shape[1:] == (size, size):
        return img
    return resize_bilinear(img, size, size)
