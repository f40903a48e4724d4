"""Classical lung segmentation: blur, Otsu binarization, morphology, components.

The coarse mask is only used to score slices (lung-area ratio) and to find
the body bounding box; it loses lesion detail, so it never feeds the
classifier's mask channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage as ndi
from skimage.segmentation import clear_border
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import UnsegmentableVolumeError
from .validation import check_raster

BLUR_KERNEL = (5, 5)
BLUR_SIGMA = 1.0
MORPH_ITERATIONS = 2
MIN_AREA_FRACTION = 0.005
MAX_LUNGS = 2

_ELLIPSE_3 = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (3, 3))


@dataclass
class CoarseMask:
    mask: np.ndarray = field(repr=False)
    lung_ratio: float
    bbox: tuple | None
    body: np.ndarray | None = field(default=None, repr=False)


def otsu_threshold(img):
    """Otsu threshold of a uint8 raster; pixels ``<= t`` form the dark class."""
    t, _ = cv2.threshold(img, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    return int(t)


def binarize(slice_):
    """Dark-pixel (air/lung) foreground after a 5x5, sigma 1 blur and Otsu threshold."""
    img = check_raster(slice_, name="slice", dtype=np.uint8)
    blurred = cv2.GaussianBlur(img, BLUR_KERNEL, BLUR_SIGMA)
    return blurred <= otsu_threshold(blurred)


def _bbox_of(mask):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _union(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def _largest_components(binary, keep, min_area):
    labels, n = ndi.label(binary)
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    areas = np.bincount(labels.ravel())[1:]
    order = np.argsort(areas, kind="stable")[::-1]
    chosen = [i + 1 for i in order[:keep] if areas[i] >= min_area]
    return np.isin(labels, chosen)


def segment_morphological(slice_):
    """Coarse two-lung mask, lung-area ratio and body bounding box of one slice.

    The bbox is ``(x0, y0, x1, y1)`` with exclusive upper bounds and covers
    the bright body region (bones and tissue included) together with the
    lung mask.  It is ``None`` exactly when no lung was found.
    """
    img = check_raster(slice_, name="slice", dtype=np.uint8)
    dark = binarize(img).astype(np.uint8)
    dark = cv2.erode(dark, _ELLIPSE_3, iterations=MORPH_ITERATIONS)
    dark = cv2.dilate(dark, _ELLIPSE_3, iterations=MORPH_ITERATIONS).astype(bool)

    min_area = MIN_AREA_FRACTION * img.size
    # outside air touches the border; lungs are dark regions enclosed by the body
    interior = clear_border(dark)
    lungs = _largest_components(interior, MAX_LUNGS, min_area)
    lungs = ndi.binary_fill_holes(lungs)

    body = _largest_components(~dark, 1, 1)
    body = ndi.binary_fill_holes(body)

    count = int(lungs.sum())
    if count == 0:
        return CoarseMask(mask=lungs, lung_ratio=0.0, bbox=None, body=body)
    bbox = _union(_bbox_of(body), _bbox_of(lungs))
    return CoarseMask(mask=lungs, lung_ratio=count / lungs.size, bbox=bbox, body=body)


def volume_bbox(masks):
    """Union of the per-slice bounding boxes of a volume."""
    box = None
    for m in masks:
        box = _union(box, m.bbox if isinstance(m, CoarseMask) else m)
    if box is None:
        raise UnsegmentableVolumeError("no slice of the volume has a lung bounding box")
    return box


def save_overlay(slice_, coarse, path):
    """Write a debug PNG: slice in gray, lung mask in red, bbox in green."""
    rgb = cv2.cvtColor(np.asarray(slice_, dtype=np.uint8), cv2.COLOR_GRAY2BGR)
    rgb[coarse.mask] = (0.5 * rgb[coarse.mask] + (0, 0, 127)).astype(np.uint8)
    if coarse.bbox is not None:
        x0, y0, x1, y1 = coarse.bbox
        cv2.rectangle(rgb, (x0, y0), (x1 - 1, y1 - 1), (0, 255, 0), 1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), rgb)


class MorphologicalSegmenter(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping slices to :class:`CoarseMask` objects.

    ``transform`` returns the per-slice lung-area ratios so the segmenter
    can sit in front of numeric steps; ``segment`` returns the full masks.
    """

    def fit(self, X, y=None):
        return self

    def segment(self, X):
        return [segment_morphological(s) for s in X]

    def transform(self, X):
        return np.array([m.lung_ratio for m in self.segment(X)], dtype=float)
