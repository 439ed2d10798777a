"""Multi-crop augmentation: 2 global views plus n-2 local views per image.

Images are H x W x 3 float arrays in [0, 1]; emitted crops are 3 x S x S.
The augmentation chain has a fixed order (crop -> flip -> jitter/grayscale
-> blur -> solarize) so a (record, config, seed) triple always produces
bit-identical output, and every op maps [0, 1] into [0, 1].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import cv2
import numpy as np

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class CropError(Exception):
    """Raised when no valid crop window can be sampled."""


@dataclass(frozen=True)
class JitterStrengths:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1


@dataclass(frozen=True)
class AugmentConfig:
    n_crops: int = 4
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    global_size: int = 64
    local_size: int = 32
    blur_p_global: float = 0.1
    blur_p_local: float = 0.5
    blur_radius: tuple[float, float] = (0.1, 0.5)
    solarize_p_global: float = 0.2
    solarize_threshold: float = 0.5
    jitter_p: float = 0.8
    jitter_strengths: JitterStrengths = field(default_factory=JitterStrengths)
    grayscale_p: float = 0.2
    hflip_p: float = 0.5
    vflip_p: float = 0.0
    aspect_ratio: tuple[float, float] = (0.75, 4.0 / 3.0)

    def validate(self) -> None:
        if self.n_crops < 2:
            raise ValueError(f"n_crops must be >= 2, got {self.n_crops}")
        lo, hi = self.local_scale
        glo, ghi = self.global_scale
        if not (0 < lo <= hi <= ghi <= 1):
            raise ValueError(
                f"scale ordering violated: need 0 < local lo <= local hi <= global hi <= 1, "
                f"got local={self.local_scale} global={self.global_scale}"
            )
        if glo <= 0 or glo > ghi:
            raise ValueError(f"bad global_scale {self.global_scale}")
        for name in ("blur_p_global", "blur_p_local", "solarize_p_global", "jitter_p",
                     "grayscale_p", "hflip_p", "vflip_p"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name}={p} not a probability")
        if not 0 <= self.solarize_threshold <= 1:
            raise ValueError(f"solarize_threshold={self.solarize_threshold} outside [0,1]")


@dataclass
class CropSet:
    """One training example expanded into augmented views (arrays are CHW)."""

    globals: list[np.ndarray]
    locals: list[np.ndarray]
    source_id: str


@dataclass
class AugStats:
    """Optional per-crop bookkeeping for conformance checks."""

    kinds: list[str] = field(default_factory=list)
    area_fractions: list[float] = field(default_factory=list)
    applied: list[dict[str, bool]] = field(default_factory=list)

    def rate(self, flag: str, kind: str | None = None) -> float:
        rows = [
            a[flag]
            for a, k in zip(self.applied, self.kinds)
            if kind is None or k == kind
        ]
        return float(np.mean(rows)) if rows else 0.0


# Primitive ops ---------------------------------------------------------


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    """Invert values at or above the threshold: v -> 1 - v where v >= t."""
    return np.where(img >= threshold, 1.0 - img, img).astype(img.dtype)


def gaussian_blur(img: np.ndarray, radius: float) -> np.ndarray:
    """Separable Gaussian with sigma = radius, kernel truncated at 3 sigma."""
    if radius <= 0:
        warnings.warn(f"gaussian_blur: radius {radius} <= 0, returning input unchanged")
        return img
    r = max(1, int(math.ceil(3.0 * radius)))
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / radius) ** 2)
    kernel /= kernel.sum()
    out = img.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i, k in enumerate(kernel):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(i, i + out.shape[axis])
            acc += k * padded[tuple(sl)]
        out = acc
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def flip(img: np.ndarray, axis: str | int) -> np.ndarray:
    """Exact mirror; axis is 'horizontal'/'vertical' or the numpy axis."""
    if axis == "horizontal":
        axis = 1
    elif axis == "vertical":
        axis = 0
    return np.flip(img, axis=axis).copy()


def grayscale(img: np.ndarray) -> np.ndarray:
    luma = img @ _LUMA
    return np.repeat(luma[..., None], 3, axis=-1)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta == 0, 1.0, delta)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta == 0, 0.0, (h / 6.0) % 1.0)
    s = np.where(maxc == 0, 0.0, delta / np.where(maxc == 0, 1.0, maxc))
    return np.stack([h, s, maxc], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(np.int32)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i % 6
    r = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [v, q, p, p, t, v])
    g = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [t, v, v, q, p, p])
    b = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def color_jitter(img: np.ndarray, deltas: JitterStrengths, rng: np.random.Generator) -> np.ndarray:
    """Randomized brightness, contrast, saturation and hue, in that order."""
    fb = rng.uniform(max(0.0, 1.0 - deltas.brightness), 1.0 + deltas.brightness)
    fc = rng.uniform(max(0.0, 1.0 - deltas.contrast), 1.0 + deltas.contrast)
    fs = rng.uniform(max(0.0, 1.0 - deltas.saturation), 1.0 + deltas.saturation)
    fh = rng.uniform(-deltas.hue, deltas.hue)
    out = np.clip(img * fb, 0.0, 1.0)
    mean = float((out @ _LUMA).mean())
    out = np.clip((out - mean) * fc + mean, 0.0, 1.0)
    luma = (out @ _LUMA)[..., None]
    out = np.clip((out - luma) * fs + luma, 0.0, 1.0)
    if deltas.hue > 0:
        hsv = _rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + fh) % 1.0
        out = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)
    return out.astype(np.float32)


def resize_bicubic(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bicubic resize to (height, width), clipped back into [0, 1]."""
    out = cv2.resize(img.astype(np.float32), (size[1], size[0]), interpolation=cv2.INTER_CUBIC)
    return np.clip(out, 0.0, 1.0)


def random_resized_crop(
    img: np.ndarray,
    scale: tuple[float, float],
    size: int,
    rng: np.random.Generator,
    aspect: tuple[float, float] = (0.75, 4.0 / 3.0),
) -> tuple[np.ndarray, float]:
    """Crop a window with area fraction inside `scale`, resize to size x size.

    Returns (crop, realized area fraction). The integer window is adjusted so
    the realized fraction stays inside `scale` exactly; a window that cannot
    be realized after 10 attempts is an error.
    """
    H, W = img.shape[:2]
    lo, hi = scale
    for _ in range(10):
        frac = rng.uniform(lo, hi)
        area = frac * H * W
        ar = math.exp(rng.uniform(math.log(aspect[0]), math.log(aspect[1])))
        # Clamp the ratio so the ideal window fits inside the image.
        ar = min(max(ar, area / (H * H)), (W * W) / area)
        w = int(np.clip(round(math.sqrt(area * ar)), 1, W))
        h = int(np.clip(round(math.sqrt(area / ar)), 1, H))
        # Nudge against rounding drift so w*h/(W*H) stays inside [lo, hi].
        for _ in range(4):
            realized = (w * h) / (W * H)
            if realized < lo and w < W:
                w += 1
            elif realized < lo and h < H:
                h += 1
            elif realized > hi and w > 1 and (w - 1) * h / (W * H) >= lo:
                w -= 1
            elif realized > hi and h > 1 and w * (h - 1) / (W * H) >= lo:
                h -= 1
            else:
                break
        realized = (w * h) / (W * H)
        if w * h < 1 or not (lo <= realized <= hi):
            continue
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        window = img[top : top + h, left : left + w]
        return resize_bicubic(window, (size, size)), realized
    raise CropError(
        f"no valid {scale} crop window on a {H}x{W} image after 10 attempts"
    )


# Crop generation --------------------------------------------------------


def _augment_one(
    img: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    is_global: bool,
    stats: AugStats | None,
) -> np.ndarray:
    scale = cfg.global_scale if is_global else cfg.local_scale
    size = cfg.global_size if is_global else cfg.local_size
    crop, realized = random_resized_crop(img, scale, size, rng, cfg.aspect_ratio)

    do_hflip = rng.random() < cfg.hflip_p
    do_vflip = rng.random() < cfg.vflip_p
    do_jitter = rng.random() < cfg.jitter_p
    do_gray = rng.random() < cfg.grayscale_p
    blur_p = cfg.blur_p_global if is_global else cfg.blur_p_local
    do_blur = rng.random() < blur_p
    blur_radius = rng.uniform(*cfg.blur_radius)
    do_solarize = is_global and rng.random() < cfg.solarize_p_global

    if do_hflip:
        crop = flip(crop, "horizontal")
    if do_vflip:
        crop = flip(crop, "vertical")
    if do_jitter:
        crop = color_jitter(crop, cfg.jitter_strengths, rng)
    if do_gray:
        crop = grayscale(crop)
    if do_blur:
        crop = gaussian_blur(crop, blur_radius)
    if do_solarize:
        crop = solarize(crop, cfg.solarize_threshold)

    if stats is not None:
        stats.kinds.append("global" if is_global else "local")
        stats.area_fractions.append(realized)
        stats.applied.append(
            {
                "hflip": do_hflip,
                "vflip": do_vflip,
                "jitter": do_jitter,
                "grayscale": do_gray,
                "blur": do_blur,
                "solarize": do_solarize,
            }
        )
    return np.ascontiguousarray(crop.transpose(2, 0, 1), dtype=np.float32)


def generate_crops(img, cfg: AugmentConfig, rng: np.random.Generator, stats: AugStats | None = None) -> CropSet:
    """Expand one image into 2 global and n_crops - 2 local augmented views."""
    pixels = img.pixels if hasattr(img, "pixels") else img
    source_id = img.id if hasattr(img, "id") else ""
    global_views = [_augment_one(pixels, cfg, rng, True, stats) for _ in range(2)]
    local_views = [_augment_one(pixels, cfg, rng, False, stats) for _ in range(cfg.n_crops - 2)]
    return CropSet(globals=global_views, locals=local_views, source_id=source_id)


def record_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, record); parallel-safe by construction."""
    return np.random.default_rng([seed, epoch, index])


def canonical_view(pixels: np.ndarray, size: int) -> np.ndarray:
    """Deterministic evaluation view: resize short side, center crop, CHW."""
    H, W = pixels.shape[:2]
    s = size / min(H, W)
    nh, nw = max(size, int(round(H * s))), max(size, int(round(W * s)))
    out = resize_bicubic(pixels, (nh, nw))
    top = (nh - size) // 2
    left = (nw - size) // 2
    out = out[top : top + size, left : left + size]
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)
