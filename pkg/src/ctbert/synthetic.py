"""Synthetic chest phantoms and toy datasets for smoke tests and demos.

A phantom is a bright body disk on a black background with two dark
elliptical lungs.  "Covid" volumes get bright ground-glass blobs inside the
lungs, which gives a class-correlated texture a small network can learn.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class Phantom:
    image: np.ndarray
    lungs: np.ndarray
    body: np.ndarray


def make_phantom(rng, size=512, noise=4.0, lesions=0, lung_scale=1.0, lesion_radius=(6, 14)):
    """One phantom slice with its ground-truth lung and body masks.

    ``lung_scale`` shrinks the lungs (closed-lung slices near the volume
    ends); ``lesions`` adds that many bright blobs inside the lungs, with
    radii drawn from ``lesion_radius`` (in 512-pixel units).
    """
    s = size / 512.0
    yy, xx = np.mgrid[:size, :size].astype(float)
    cx = size / 2 + rng.uniform(-20, 20) * s
    cy = size / 2 + rng.uniform(-20, 20) * s
    radius = rng.uniform(185, 215) * s
    body = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2

    ax = rng.uniform(50, 70) * s * lung_scale
    ay = rng.uniform(85, 110) * s * lung_scale
    sep = rng.uniform(70, 85) * s
    lungs = np.zeros((size, size), dtype=bool)
    for side in (-1, 1):
        ex = cx + side * sep
        lungs |= ((xx - ex) / max(ax, 1e-6)) ** 2 + ((yy - cy) / max(ay, 1e-6)) ** 2 <= 1.0
    lungs &= body

    img = np.zeros((size, size), dtype=float)
    img[body] = rng.uniform(150, 210)
    img[lungs] = rng.uniform(15, 45)
    for _ in range(lesions):
        ys, xs = np.nonzero(lungs)
        if ys.size == 0:
            break
        k = rng.integers(ys.size)
        r = rng.uniform(*lesion_radius) * s
        blob = ((xx - xs[k]) ** 2 + (yy - ys[k]) ** 2 <= r**2) & lungs
        img[blob] = rng.uniform(95, 130)
    img += rng.normal(0, noise, img.shape)
    return Phantom(np.clip(np.rint(img), 0, 255).astype(np.uint8), lungs, body)


def make_volume_slices(rng, n_slices, label, size=512, noise=4.0, lesions=(3, 6), lesion_radius=(6, 14)):
    """Slices of one synthetic volume: lungs open in the middle, closed at the ends.

    ``label`` 0 (covid) adds ``lesions[0]`` to ``lesions[1] - 1`` lesions to
    every slice with visible lungs.
    """
    pos = np.linspace(-1.0, 1.0, n_slices)
    images, lungs = [], []
    for p in pos:
        scale = max(0.0, 1.0 - p**4)
        ph = make_phantom(rng, size=size, noise=noise, lung_scale=scale,
                          lesions=int(rng.integers(*lesions)) if label == 0 else 0,
                          lesion_radius=lesion_radius)
        images.append(ph.image)
        lungs.append(ph.lungs)
    return np.stack(images), np.stack(lungs)


def write_dataset(root, n_per_class=(3, 3), n_slices=(40, 60), seed=0, size=512,
                  splits=("train", "val"), test_volumes=2):
    """Write a toy dataset in the ``<root>/<split>/<class>/<volume>/`` layout."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for split in splits:
        for label, cls in enumerate(("covid", "non-covid")):
            for k in range(n_per_class[label]):
                n = int(rng.integers(n_slices[0], n_slices[1] + 1))
                images, _ = make_volume_slices(rng, n, label, size=size)
                vdir = root / split / cls / f"{split}_{cls}_{k}"
                vdir.mkdir(parents=True, exist_ok=True)
                for i, im in enumerate(images):
                    Image.fromarray(im).save(vdir / f"{i}.png")
    for k in range(test_volumes):
        n = int(rng.integers(n_slices[0], n_slices[1] + 1))
        images, _ = make_volume_slices(rng, n, int(rng.integers(2)), size=size)
        vdir = root / "test" / f"test_{k}"
        vdir.mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(images):
            Image.fromarray(im).save(vdir / f"{i}.png")
    return root


def write_mask_corpus(root, n=20, seed=0, size=512):
    """Write ``images/`` and ``masks/`` directories of paired phantom slices."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        ph = make_phantom(rng, size=size, lesions=int(rng.integers(0, 4)))
        Image.fromarray(ph.image).save(root / "images" / f"{i}.png")
        Image.fromarray(ph.lungs.astype(np.uint8) * 255).save(root / "masks" / f"{i}.png")
    return root
