"""RML channel composition, bbox cropping and clip-level spatial transforms.

Every slice of a clip goes through the *same* sampled transform so the
network sees a spatially consistent stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
import torch

from .config import AugmentConfig
from .exceptions import CorruptInputError
from .unet import apply_mask
from .validation import check_raster, check_same_shape

MEAN = 0.45
STD = 0.225

# five fixed crop anchors: center and the four corners
MSC_POSITIONS = ("center", "upper_left", "upper_right", "lower_left", "lower_right")


def parse_channels(spec):
    spec = spec.upper() if isinstance(spec, str) else "".join(spec).upper()
    if len(spec) != 3 or set(spec) - set("RML"):
        raise ValueError(f"channel spec must be 3 letters over R, M, L: {spec!r}")
    return spec


def compose_rml(raw, mask, lung=None, spec="RML"):
    """Stack R (raw), M (mask as 0/255) and L (masked lung) into H x W x 3 uint8."""
    spec = parse_channels(spec)
    raw = check_raster(raw, name="raw", dtype=np.uint8)
    mask = np.asarray(mask, dtype=bool)
    if lung is None:
        lung = apply_mask(raw, mask)
    check_same_shape(raw, mask, lung, names=("R", "M", "L"))
    planes = {"R": raw, "M": mask.astype(np.uint8) * 255, "L": np.asarray(lung, dtype=np.uint8)}
    return np.stack([planes[c] for c in spec], axis=-1)


def crop_bbox(img, bbox):
    """Crop to ``(x0, y0, x1, y1)`` with exclusive upper bounds."""
    x0, y0, x1, y1 = (int(v) for v in bbox)
    h, w = img.shape[:2]
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise CorruptInputError(f"bbox {bbox} outside image of size {w}x{h}")
    return img[y0:y1, x0:x1]


def _resize_shorter(img, target):
    h, w = img.shape[:2]
    if min(h, w) == target:
        return img
    scale = target / min(h, w)
    size = (max(target, round(w * scale)), max(target, round(h * scale)))
    return cv2.resize(img, size, interpolation=cv2.INTER_LINEAR)


def _check_size(img, crop_size):
    if min(img.shape[:2]) < crop_size:
        raise CorruptInputError(
            f"image {img.shape[1]}x{img.shape[0]} is smaller than the {crop_size}x{crop_size} crop"
        )


def enlarged_size(crop_size, cfg=None):
    enlarge = AugmentConfig().enlarge_frac if cfg is None else cfg.enlarge_frac
    return int(round(crop_size * (1.0 + enlarge)))


def center_crop(img, size):
    h, w = img.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def transform_eval(img, crop_size=224, cfg=None):
    """Resize the shorter side to ``1.25 * crop_size`` and take the central crop."""
    img = np.asarray(img)
    _check_size(img, crop_size)
    return center_crop(_resize_shorter(img, enlarged_size(crop_size, cfg)), crop_size)


@dataclass(frozen=True)
class AugmentParams:
    """One draw of the training transform, shared by all slices of a clip."""

    angle: float = 0.0
    scale: float = 1.0
    translate: tuple = (0.0, 0.0)
    shear: float = 0.0
    brightness: float = 1.0
    contrast: float = 1.0
    crop_w: int | None = None
    crop_h: int | None = None
    position: str = "center"
    flip: bool = False


def _msc_sizes(base, cfg, crop_size):
    sizes = [int(base * s) for s in cfg.msc_scales]
    sizes = [crop_size if abs(s - crop_size) < 3 else s for s in sizes]
    pairs = [
        (w, h)
        for i, h in enumerate(sizes)
        for j, w in enumerate(sizes)
        if abs(i - j) <= cfg.msc_max_distort
    ]
    return pairs


def sample_augment(cfg, rng, image_shape, crop_size=224):
    """Draw transform parameters for an image of ``image_shape`` (H, W, ...)."""
    params = {}
    h, w = image_shape[:2]
    if cfg.use_affine:
        params.update(
            angle=float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)),
            scale=float(rng.uniform(*cfg.scale_range)),
            translate=(
                float(rng.uniform(-cfg.translate_frac, cfg.translate_frac) * w),
                float(rng.uniform(-cfg.translate_frac, cfg.translate_frac) * h),
            ),
            shear=float(rng.uniform(-cfg.shear_deg, cfg.shear_deg)),
            brightness=float(rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)),
            contrast=float(rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)),
        )
    if cfg.use_msc:
        base = enlarged_size(crop_size, cfg)
        pairs = _msc_sizes(base, cfg, crop_size)
        cw, ch = pairs[int(rng.integers(len(pairs)))]
        params.update(crop_w=cw, crop_h=ch, position=MSC_POSITIONS[int(rng.integers(len(MSC_POSITIONS)))])
    params["flip"] = bool(rng.random() < cfg.hflip_prob)
    return AugmentParams(**params)


def _affine_matrix(p, h, w):
    """2x3 map: rotate, scale and x-shear about the image center, then translate."""
    cx, cy = (w - 1) * 0.5, (h - 1) * 0.5
    rot, shear = math.radians(p.angle), math.radians(p.shear)
    rotation = np.array([[math.cos(rot), -math.sin(rot)], [math.sin(rot), math.cos(rot)]])
    shearing = np.array([[1.0, math.tan(shear)], [0.0, 1.0]])
    lin = p.scale * rotation @ shearing
    center = np.array([cx, cy])
    offset = center + np.array(p.translate) - lin @ center
    return np.hstack([lin, offset[:, None]])


def _apply_affine(img, p):
    h, w = img.shape[:2]
    m = _affine_matrix(p, h, w)
    out = cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    out = out.astype(np.float32) * p.brightness
    mean = out.mean()
    out = (out - mean) * p.contrast + mean
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def crop_origin(shape, cw, ch, position):
    """Top-left corner of an MSC crop; exposed for range checks."""
    h, w = shape[:2]
    left = {"center": (w - cw) // 2, "upper_left": 0, "lower_left": 0}.get(position, w - cw)
    top = {"center": (h - ch) // 2, "upper_left": 0, "upper_right": 0}.get(position, h - ch)
    return left, top


def _crop_at(img, cw, ch, position):
    left, top = crop_origin(img.shape, cw, ch, position)
    return img[top:top + ch, left:left + cw]


def apply_augment(img, params, cfg, crop_size=224):
    img = np.asarray(img)
    _check_size(img, crop_size)
    if cfg.use_affine:
        img = _apply_affine(img, params)
    img = _resize_shorter(img, enlarged_size(crop_size, cfg))
    if cfg.use_msc and params.crop_w is not None:
        img = _crop_at(img, params.crop_w, params.crop_h, params.position)
        if img.shape[:2] != (crop_size, crop_size):
            img = cv2.resize(img, (crop_size, crop_size), interpolation=cv2.INTER_LINEAR)
    else:
        img = center_crop(img, crop_size)
    if params.flip:
        img = img[:, ::-1]
    return np.ascontiguousarray(img)


def augment_train(img, cfg, rng, crop_size=224):
    """Random training transform of one H x W x 3 image to crop_size x crop_size x 3."""
    params = sample_augment(cfg, rng, np.shape(img), crop_size)
    return apply_augment(img, params, cfg, crop_size)


def to_clip_tensor(frames):
    """uint8 (T, H, W, 3) frames to a standardized float (T, 3, H, W) tensor."""
    arr = np.asarray(frames, dtype=np.float32) / 255.0
    arr = (arr - MEAN) / STD
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def build_clip(raws, masks, spec="RML", bbox=None, crop_size=224, augment=None, rng=None):
    """Compose, crop and transform a slice stack into a (T, 3, S, S) tensor.

    ``augment`` is an :class:`AugmentConfig` for training clips (one
    parameter draw per clip) or ``None`` for the deterministic eval path.
    """
    frames = [compose_rml(r, m, spec=spec) for r, m in zip(raws, masks)]
    if bbox is not None:
        frames = [crop_bbox(f, bbox) for f in frames]
    if augment is None:
        out = [transform_eval(f, crop_size) for f in frames]
    else:
        rng = np.random.default_rng() if rng is None else rng
        params = sample_augment(augment, rng, frames[0].shape, crop_size)
        out = [apply_augment(f, params, augment, crop_size) for f in frames]
    return to_clip_tensor(np.stack(out))


def save_clip_grid(clip, path, columns=8):
    """Write a (T, 3, H, W) standardized clip as a PNG contact sheet."""
    arr = clip.detach().cpu().numpy() if torch.is_tensor(clip) else np.asarray(clip)
    arr = np.clip((arr * STD + MEAN) * 255.0, 0, 255).astype(np.uint8).transpose(0, 2, 3, 1)
    t, h, w, _ = arr.shape
    rows = math.ceil(t / columns)
    sheet = np.zeros((rows * h, columns * w, 3), dtype=np.uint8)
    for i, frame in enumerate(arr):
        r, c = divmod(i, columns)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = frame
    cv2.imwrite(str(path), cv2.cvtColor(sheet, cv2.COLOR_RGB2BGR))
