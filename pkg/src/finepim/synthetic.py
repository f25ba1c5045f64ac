"""Synthetic fine-grained datasets.

Every image shares the same kind of background (smooth blobs plus noise);
the class is carried only by a small patch whose *texture* differs between
classes while its mean intensity does not. The patch lands at a random
position, so a model has to find it rather than memorise a location.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import stream


def patch_patterns(size: int = 4) -> np.ndarray:
    """Four binary textures with equal pixel counts: rows, columns, checker, diagonal."""
    i, j = np.indices((size, size))
    pats = np.stack([
        (i % 2 == 0),
        (j % 2 == 0),
        ((i + j) % 2 == 0),
        ((i + j) % 4 < 2),
    ]).astype(np.float64)
    return pats


@dataclass
class SyntheticSet:
    images: np.ndarray            # N x R x R in [0, 1]
    labels: np.ndarray            # N
    patch_boxes: np.ndarray       # N x 4: row, col, height, width
    ids: list[str]


def make_patch_dataset(n_per_class: int, resolution: int = 64, patch: int = 4,
                       num_classes: int = 4, seed: int = 0, noise: float = 0.03,
                       tag: str = "train", fixed_positions: np.ndarray | None = None) -> SyntheticSet:
    """Balanced set of ``n_per_class * num_classes`` images, class-interleaved.

    ``fixed_positions`` (one (row, col) per class) pins each class's patch to a
    location instead of sampling one per image.
    """
    pats = patch_patterns(patch)
    if num_classes > len(pats):
        raise ValueError(f"at most {len(pats)} classes available")
    rng = stream(seed, f"synthetic/{tag}")
    n = n_per_class * num_classes
    labels = np.tile(np.arange(num_classes), n_per_class)
    images = np.empty((n, resolution, resolution))
    boxes = np.empty((n, 4), dtype=int)
    margin = 2
    for k in range(n):
        base = gaussian_filter(rng.random((resolution, resolution)), sigma=resolution / 10)
        base = (base - base.min()) / (np.ptp(base) + 1e-12)
        img = 0.15 + 0.3 * base + noise * rng.standard_normal((resolution, resolution))
        if fixed_positions is not None:
            r, c = fixed_positions[labels[k]]
        else:
            r, c = rng.integers(margin, resolution - patch - margin + 1, size=2)
        img[r:r + patch, c:c + patch] = 0.1 + 0.8 * pats[labels[k]]
        images[k] = np.clip(img, 0.0, 1.0)
        boxes[k] = (r, c, patch, patch)
    ids = [f"{tag}-{k:05d}" for k in range(n)]
    return SyntheticSet(images, labels, boxes, ids)


FIXTURE_COUNTS = {"fracture": 100, "boneanomaly": 33, "metal": 30, "softtissue": 29}


def write_annotation_fixture(root, counts: dict[str, int] | None = None, resolution: int = 16,
                             seed: int = 0, extras: bool = True) -> tuple[str, str]:
    """Write a small annotation table plus PNG images; returns (table path, image dir).

    Besides the single-class records, ``extras`` adds images that curation has
    to reject or reinterpret: multi-pathology, foreign-body only, a rare
    class, and pathologies paired with the laterality marker.
    """
    import csv
    import os

    from PIL import Image

    counts = dict(FIXTURE_COUNTS if counts is None else counts)
    rng = stream(seed, "fixture")
    image_dir = os.path.join(root, "images")
    os.makedirs(image_dir, exist_ok=True)
    rows = []
    k = 0
    for label, n in counts.items():
        for _ in range(n):
            objs = [label] + (["text"] if k % 3 == 0 else [])
            rows.append((f"img{k:04d}", objs, "posteroanterior" if k % 2 else "lateral"))
            k += 1
    if extras:
        for objs in (["fracture", "softtissue"], ["metal", "fracture"], ["foreignbody"], ["foreignbody", "text"],
                     ["pronatorsign"], ["pronatorsign"], ["boneanomaly", "metal", "text"], ["periostealreaction"]):
            rows.append((f"img{k:04d}", objs, "unknown"))
            k += 1
    with open(os.path.join(root, "annotations.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "path", "objects", "projection"])
        for image_id, objs, proj in rows:
            px = (rng.random((resolution, resolution)) * 255).astype(np.uint8)
            Image.fromarray(px).save(os.path.join(image_dir, f"{image_id}.png"))
            w.writerow([image_id, f"{image_id}.png", ";".join(objs), proj])
    return os.path.join(root, "annotations.csv"), image_dir
