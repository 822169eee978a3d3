"""Depth frame -> 64x64 standardised network input, angle scaling, augmentation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from headpose.frames import Annotation, CameraIntrinsics, DepthFrame

log = logging.getLogger(__name__)

PATCH_SIZE = 64
FACE_WIDTH_MM = 300.0


class DegeneratePatchError(ValueError):
    pass


@dataclass(frozen=True)
class CropSpec:
    xc: float
    yc: float
    width: int
    height: int
    face_width_mm: float = FACE_WIDTH_MM
    subject_distance_mm: float = 0.0


@dataclass(frozen=True)
class AngleRange:
    max_abs: tuple[float, float, float] = (90.0, 90.0, 90.0)

    def __post_init__(self):
        if any(m <= 0 for m in self.max_abs):
            raise ValueError(f"angle ranges must be positive, got {self.max_abs}")


def _round(v: float) -> int:
    return int(np.floor(v + 0.5))


def crop_window(intrinsics: CameraIntrinsics, face_width_mm: float, z_mm: float) -> tuple[int, int]:
    """Pixel extent of a face of physical width R at distance Z: (fx R / Z, fy R / Z), rounded."""
    if not z_mm > 0:
        raise ValueError(f"invalid subject distance {z_mm}")
    return _round(intrinsics.fx * face_width_mm / z_mm), _round(intrinsics.fy * face_width_mm / z_mm)


def crop_for(frame: DepthFrame, ann: Annotation, face_width_mm: float = FACE_WIDTH_MM) -> CropSpec:
    w, h = crop_window(frame.intrinsics, face_width_mm, ann.z_mm)
    return CropSpec(ann.xc, ann.yc, w, h, face_width_mm, ann.z_mm)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment; edges clamp."""
    in_h, in_w = img.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis(in_h, out_h)
    c0, c1, fc = axis(in_w, out_w)
    rows = img[r0] * (1.0 - fr)[:, None] + img[r1] * fr[:, None]
    return rows[:, c0] * (1.0 - fc) + rows[:, c1] * fc


def _cut(frame: DepthFrame, xc: float, yc: float, w: int, h: int) -> np.ndarray:
    """Rectangle of the depth map centred on (xc, yc); out-of-frame area and holes are filled."""
    depth = frame.depth
    valid = depth[depth > 0]
    fill = float(valid.max()) if valid.size else 0.0
    x0, y0 = _round(xc - w / 2.0), _round(yc - h / 2.0)
    out = np.full((h, w), fill, dtype=np.float64)
    fy0, fy1 = max(y0, 0), min(y0 + h, frame.height)
    fx0, fx1 = max(x0, 0), min(x0 + w, frame.width)
    if fy1 > fy0 and fx1 > fx0:
        out[fy0 - y0:fy1 - y0, fx0 - x0:fx1 - x0] = depth[fy0:fy1, fx0:fx1]
    holes = out == 0
    if holes.any():
        good = out[~holes]
        out[holes] = np.median(good) if good.size else 0.0
    return out


def extract_patch(frame: DepthFrame, crop: CropSpec, size: int = PATCH_SIZE) -> np.ndarray:
    """Crop, fill, and resize to a (1, size, size) float64 patch in millimetres."""
    if not (0 <= crop.xc < frame.width and 0 <= crop.yc < frame.height):
        raise ValueError(f"crop centre ({crop.xc}, {crop.yc}) outside {frame.width}x{frame.height} frame")
    if crop.width < 1 or crop.height < 1:
        raise ValueError(f"empty crop {crop.width}x{crop.height}")
    region = _cut(frame, crop.xc, crop.yc, crop.width, crop.height)
    return resize_bilinear(region, size, size)[None]


def standardize(patch: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    mean = patch.mean()
    var = patch.var()
    if var < eps:
        raise DegeneratePatchError(f"degenerate depth patch (variance {var:.3g})")
    return (patch - mean) / np.sqrt(var)


def preprocess(frame: DepthFrame, ann: Annotation, face_width_mm: float = FACE_WIDTH_MM) -> np.ndarray:
    """Full inference-time transform: crop at the annotated centre, resize, standardise."""
    return standardize(extract_patch(frame, crop_for(frame, ann, face_width_mm)))


def normalize_angles(degrees, angle_range: AngleRange = AngleRange()) -> np.ndarray:
    deg = np.asarray(degrees, dtype=np.float64)
    lim = np.asarray(angle_range.max_abs, dtype=np.float64)
    if np.any(np.abs(deg) > lim):
        log.warning("angles %s exceed range %s; clamping", deg.tolist(), angle_range.max_abs)
        deg = np.clip(deg, -lim, lim)
    return deg / lim


def denormalize_angles(normalized, angle_range: AngleRange = AngleRange()) -> np.ndarray:
    return np.asarray(normalized, dtype=np.float64) * np.asarray(angle_range.max_abs, dtype=np.float64)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

CORNERS = (("top_left", -1, -1), ("top_right", 1, -1), ("bottom_left", -1, 1), ("bottom_right", 1, 1))
EDGES = (("bottom", 0, 1), ("top", 0, -1), ("left", -1, 0), ("right", 1, 0))


@dataclass(frozen=True)
class AugmentConfig:
    offset_frac: float = 0.1  # window shift as a fraction of its extent
    jitter_frac: float = 0.05  # max centre-crop jitter, same units
    noise_frac: float = 0.01  # Gaussian sigma as a fraction of the patch value range


def augmentation_offsets(crop: CropSpec, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """The nine shifted windows as (name, dx, dy) pixel offsets.

    Order: four corners, the jittered centre, then bottom/top/left/right.
    """
    ox, oy = cfg.offset_frac * crop.width, cfg.offset_frac * crop.height
    out = [(name, sx * ox, sy * oy) for name, sx, sy in CORNERS]
    jx, jy = rng.uniform(-1.0, 1.0, size=2) * cfg.jitter_frac * np.array([crop.width, crop.height])
    out.append(("center", float(jx), float(jy)))
    out += [(name, sx * ox, sy * oy) for name, sx, sy in EDGES]
    return out


def _shifted_patch(frame: DepthFrame, crop: CropSpec, dx: float, dy: float) -> np.ndarray:
    region = _cut(frame, crop.xc + dx, crop.yc + dy, crop.width, crop.height)
    return resize_bilinear(region, PATCH_SIZE, PATCH_SIZE)[None]


def _add_noise(patch: np.ndarray, rng: np.random.Generator, noise_frac: float) -> np.ndarray:
    sigma = noise_frac * float(patch.max() - patch.min())
    return patch + rng.normal(0.0, 1.0, size=patch.shape) * sigma


def augment(frame: DepthFrame, crop: CropSpec, seed, cfg: AugmentConfig = AugmentConfig()) -> list[np.ndarray]:
    """Eighteen standardised training patches for one annotated frame.

    The nine shifted windows of :func:`augmentation_offsets`, followed by a
    Gaussian-noise copy of each in the same order. Labels are untouched by
    augmentation, so callers reuse the source annotation.
    """
    rng = np.random.default_rng(seed)
    bases = [_shifted_patch(frame, crop, dx, dy) for _, dx, dy in augmentation_offsets(crop, rng, cfg)]
    noisy = [_add_noise(b, rng, cfg.noise_frac) for b in bases]
    return [standardize(p) for p in bases + noisy]


N_VARIANTS = 19  # unmodified patch + the 18 augmented ones


def random_variant(frame: DepthFrame, crop: CropSpec, rng: np.random.Generator,
                   cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """One patch drawn uniformly from {unmodified} + the augmentation set, built lazily."""
    k = int(rng.integers(N_VARIANTS))
    if k == 0:
        return standardize(extract_patch(frame, crop))
    _, dx, dy = augmentation_offsets(crop, rng, cfg)[(k - 1) % 9]
    patch = _shifted_patch(frame, crop, dx, dy)
    if k > 9:
        patch = _add_noise(patch, rng, cfg.noise_frac)
    return standardize(patch)
