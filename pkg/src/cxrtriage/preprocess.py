"""Image decoding, CLAHE, bilinear resizing and training-time augmentation.

The deterministic chain is ``clahe -> resize_bilinear -> to_network_input``
(replicate to three channels and scale to [0, 1]).  All arithmetic in the
chain is float64 or integer so identical bytes give identical tensors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

NBINS = 256


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    clahe_enabled: bool = True
    clahe_clip: float = 2.0
    clahe_grid: tuple[int, int] = (8, 8)
    target_size: tuple[int, int] = (224, 224)
    channel_mode: str = "replicate"

    def __post_init__(self):
        self.clahe_grid = tuple(int(g) for g in self.clahe_grid)
        self.target_size = tuple(int(s) for s in self.target_size)
        if self.clahe_clip < 1.0:
            raise ConfigError(f"clahe_clip must be >= 1.0, got {self.clahe_clip}")
        if min(self.clahe_grid) < 1 or min(self.target_size) < 1:
            raise ConfigError("clahe_grid and target_size must be positive")
        if self.channel_mode != "replicate":
            raise ConfigError(f"unsupported channel_mode {self.channel_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clahe_grid"] = list(self.clahe_grid)
        d["target_size"] = list(self.target_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        return cls(**d)


@dataclass
class AugmentConfig:
    enabled: bool = True
    hflip_prob: float = 0.5
    gain_range: tuple[float, float] = (0.9, 1.1)
    bias_range: tuple[float, float] = (-0.1, 0.1)
    crop_area_range: tuple[float, float] = (0.85, 1.0)

    def __post_init__(self):
        self.gain_range = tuple(self.gain_range)
        self.bias_range = tuple(self.bias_range)
        self.crop_area_range = tuple(self.crop_area_range)
        lo, hi = self.crop_area_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_area_range must lie in (0, 1], got {self.crop_area_range}")


# ---------------------------------------------------------------------------
# decoding


def decode_image(path: str | Path, keep_depth: bool = False) -> np.ndarray:
    """Read a grayscale PNG/JPEG/PGM into a 2-D integer array.

    16-bit sources are rescaled to 0..255 unless ``keep_depth`` is set.
    Colour files are accepted only when all channels are equal.
    """
    with Image.open(path) as im:
        im.load()
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.clip(np.asarray(im, dtype=np.int64), 0, 65535).astype(np.uint16)
        elif mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
        elif mode in ("RGB", "RGBA", "P", "LA"):
            rgb = np.asarray(im.convert("RGB"))
            if not (np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 0], rgb[..., 2])):
                raise FormatError(f"{path}: colour image, expected grayscale")
            arr = rgb[..., 0].copy()
        else:
            raise FormatError(f"{path}: unsupported image mode {mode}")
    if arr.dtype == np.uint16 and not keep_depth:
        arr = ((arr.astype(np.uint32) * 255 + 32767) // 65535).astype(np.uint8)
    return arr


def _levels(image: np.ndarray) -> int:
    if image.dtype == np.uint8:
        return 256
    if image.dtype == np.uint16:
        return 65536
    raise FormatError(f"expected uint8 or uint16 image, got {image.dtype}")


# ---------------------------------------------------------------------------
# CLAHE


def tile_edges(size: int, n_tiles: int) -> np.ndarray:
    return np.array([(i * size) // n_tiles for i in range(n_tiles + 1)])


def clip_histogram(hist: np.ndarray, limit: int) -> np.ndarray:
    """Clip an integer histogram at ``limit`` and hand the excess back evenly.

    The excess is spread as ``excess // nbins`` per bin; the remainder goes
    one count at a time to every ``nbins // remainder``-th bin from bin 0.
    """
    hist = hist.astype(np.int64)
    excess = int(np.maximum(hist - limit, 0).sum())
    hist = np.minimum(hist, limit)
    nbins = hist.size
    hist += excess // nbins
    residual = excess - (excess // nbins) * nbins
    if residual:
        step = max(nbins // residual, 1)
        idx = np.arange(0, nbins, step)[:residual]
        hist[idx] += 1
    return hist


def clahe_lut(tile: np.ndarray, clip: float, levels: int) -> np.ndarray:
    n = tile.size
    bins = tile.astype(np.int64) // (levels // NBINS)
    hist = np.bincount(bins.ravel(), minlength=NBINS)
    limit = max(1, int(clip * n / NBINS))
    cdf = np.cumsum(clip_histogram(hist, limit))
    return (cdf * (levels - 1) * 2 + n) // (2 * n)


def _interp_axis(size: int, edges: np.ndarray):
    """Per-pixel (lower tile, upper tile, weight of upper) along one axis."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(size, dtype=np.float64)
    lo = np.searchsorted(centers, pos, side="right") - 1
    lo = np.clip(lo, 0, len(centers) - 1)
    hi = np.minimum(lo + 1, len(centers) - 1)
    inside = (pos > centers[0]) & (pos < centers[-1])
    weight = np.where(inside, (pos - centers[lo]) / np.where(hi > lo, centers[hi] - centers[lo], 1.0), 0.0)
    hi = np.where(inside, hi, lo)
    return lo, hi, weight


def clahe(image: np.ndarray, clip: float = 2.0, grid: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast limited adaptive histogram equalization of an 8/16-bit image."""
    if image.ndim != 2:
        raise FormatError(f"clahe expects a 2-D image, got shape {image.shape}")
    levels = _levels(image)
    gy, gx = grid
    h, w = image.shape
    if clip < 1.0:
        raise ConfigError(f"clip must be >= 1.0, got {clip}")
    if gy < 1 or gx < 1 or h < gy or w < gx:
        raise ConfigError(f"image {h}x{w} is smaller than the {gy}x{gx} tile grid")
    ry, rx = tile_edges(h, gy), tile_edges(w, gx)
    luts = np.empty((gy, gx, NBINS), dtype=np.int64)
    for a in range(gy):
        for b in range(gx):
            luts[a, b] = clahe_lut(image[ry[a]:ry[a + 1], rx[b]:rx[b + 1]], clip, levels)

    bins = image.astype(np.int64) // (levels // NBINS)
    y0, y1, wy = _interp_axis(h, ry)
    x0, x1, wx = _interp_axis(w, rx)
    Y0, Y1, WY = y0[:, None], y1[:, None], wy[:, None]
    X0, X1, WX = x0[None, :], x1[None, :], wx[None, :]
    top = luts[Y0, X0, bins] * (1.0 - WX) + luts[Y0, X1, bins] * WX
    bottom = luts[Y1, X0, bins] * (1.0 - WX) + luts[Y1, X1, bins] * WX
    v = top * (1.0 - WY) + bottom * WY
    return np.clip(np.floor(v + 0.5), 0, levels - 1).astype(image.dtype)


# ---------------------------------------------------------------------------
# resizing and tensor conversion


def _src_coords(n_out: int, n_in: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres; returns float64."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"resize expects a 2-D image, got shape {img.shape}")
    h_out, w_out = size
    if img.shape == (h_out, w_out):
        return img.copy()
    y0, y1, wy = _src_coords(h_out, img.shape[0])
    x0, x1, wx = _src_coords(w_out, img.shape[1])
    wy, wx = wy[:, None], wx[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return np.clip(out, img.min(), img.max())


def to_network_input(image: np.ndarray, max_value: float | None = None) -> np.ndarray:
    """Scale a single-channel image to [0, 1] and replicate it to (3, H, W)."""
    if image.ndim != 2:
        raise FormatError(f"expected a single-channel 2-D image, got shape {image.shape}")
    if max_value is None:
        if image.dtype == np.uint8:
            max_value = 255.0
        elif image.dtype == np.uint16:
            max_value = 65535.0
        else:
            raise FormatError("max_value is required for float images")
    scaled = np.clip(np.asarray(image, dtype=np.float64) / max_value, 0.0, 1.0)
    return np.repeat(scaled[None], 3, axis=0)


def prepare(image: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Deterministic chain up to a 2-D float image in [0, 1] at ``cfg.target_size``."""
    levels = _levels(image)
    img = clahe(image, cfg.clahe_clip, cfg.clahe_grid) if cfg.clahe_enabled else image
    return np.clip(resize_bilinear(img, cfg.target_size) / (levels - 1), 0.0, 1.0)


def preprocess(image: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    return to_network_input(prepare(image, cfg), max_value=1.0)


# ---------------------------------------------------------------------------
# augmentation


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def adjust_brightness_contrast(image: np.ndarray, gain: float, bias: float,
                               value_range: float = 1.0) -> np.ndarray:
    if gain == 1.0 and bias == 0.0:
        return image.copy()
    return np.clip(image * gain + bias * value_range, 0.0, value_range)


def crop_resize(image: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    crop = image[top:top + height, left:left + width]
    return resize_bilinear(crop, image.shape).astype(image.dtype)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
            value_range: float = 1.0) -> tuple[np.ndarray, list[dict]]:
    """Random hflip, brightness/contrast and crop-and-resize; labels are untouched.

    Every parameter is drawn up front in a fixed order, so the record and
    the output depend only on the generator state.
    """
    if not cfg.enabled:
        return image.copy(), []
    flip = bool(rng.random() < cfg.hflip_prob)
    gain = float(rng.uniform(*cfg.gain_range))
    bias = float(rng.uniform(*cfg.bias_range))
    area = float(rng.uniform(*cfg.crop_area_range))
    h, w = image.shape
    side = math.sqrt(area)
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))

    out = hflip(image) if flip else image
    out = adjust_brightness_contrast(out, gain, bias, value_range)
    out = crop_resize(out, top, left, ch, cw)
    ops = [{"op": "hflip", "applied": flip},
           {"op": "brightness_contrast", "gain": gain, "bias": bias},
           {"op": "crop", "area": area, "top": top, "left": left, "height": ch, "width": cw}]
    return out, ops
