"""Weakly supervised point selection.

Every spatial position of a block's feature map is classified by a 1x1
linear classifier. A position's confidence is its largest class probability;
the ``k`` most confident positions are kept and their class logits gathered.
Selection itself is routing: gradients reach the gathered logits but not the
choice of indices.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .backbone import pointwise
from .errors import ConfigError
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_N_SEL = (2048, 512, 128, 32)


@dataclass(frozen=True)
class SelectionConfig:
    n_sel: tuple[int, ...] = DEFAULT_N_SEL

    def __post_init__(self):
        object.__setattr__(self, "n_sel", tuple(int(n) for n in self.n_sel))
        if len(self.n_sel) != 4 or any(n <= 0 for n in self.n_sel):
            raise ConfigError(f"n_sel must be 4 positive ints, got {self.n_sel}")

    def resolve(self, block_positions: Sequence[int]) -> tuple[int, ...]:
        """Clamp each n_b to the number of positions H_b * W_b, logging any change."""
        out = tuple(min(n, p) for n, p in zip(self.n_sel, block_positions))
        if out != self.n_sel:
            log.warning("n_sel %s clamped to %s for feature maps with %s positions",
                        self.n_sel, out, tuple(block_positions))
        return out


@dataclass
class PixelLogits:
    """Class logits per position, ``N x C' x H x W``."""

    logits: Tensor

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.logits.shape[2], self.logits.shape[3]


@dataclass
class SelectionSkeleton:
    indices: np.ndarray               # (N, k) flat positions into H*W
    coords: np.ndarray                # (N, k, 2) row, col
    confidences: np.ndarray           # (N, k)
    width: int


@dataclass
class SelectedPoints:
    indices: np.ndarray
    coords: np.ndarray
    confidences: np.ndarray
    features: Tensor                  # (N, k, C')

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


def classify_pixels(fmap: Tensor, weight: Tensor, bias: Tensor | None = None) -> PixelLogits:
    """Apply a (C' x C) linear classifier at every position of an NCHW map."""
    if fmap.ndim == 3:
        fmap = T.reshape(fmap, (1,) + fmap.shape)
    if weight.shape[1] != fmap.shape[1]:
        raise ValueError(f"classifier width {weight.shape[1]} does not match {fmap.shape[1]} channels")
    return PixelLogits(pointwise(fmap, weight, bias))


def pixel_confidence(logits: PixelLogits) -> np.ndarray:
    """Max class probability per position, shape ``N x H x W``."""
    with T.no_grad():
        probs = T.softmax(T.Tensor(logits.logits.data), axis=1)
        return T.amax(probs, axis=1).data


def select(conf, k: int) -> SelectionSkeleton:
    """Keep the ``k`` highest-confidence positions of each ``H x W`` map.

    Accepts one map (``H x W``) or a batch (``N x H x W``). Ties are broken
    by ascending flat index.
    """
    conf = np.asarray(conf.data if isinstance(conf, Tensor) else conf, dtype=np.float64)
    if conf.ndim == 2:
        conf = conf[None]
    n, h, w = conf.shape
    if not 0 < k <= h * w:
        raise ValueError(f"k={k} must be in [1, {h * w}] for a {h}x{w} map")
    flat = conf.reshape(n, h * w)
    idx = T.topk(flat, k, axis=1)
    coords = np.stack([idx // w, idx % w], axis=-1)
    return SelectionSkeleton(idx, coords, np.take_along_axis(flat, idx, 1), w)


def gather_points(logits: PixelLogits, skeleton: SelectionSkeleton) -> SelectedPoints:
    """Gather the selected positions' logit vectors into ``N x k x C'``."""
    x = logits.logits
    n, c, h, w = x.shape
    idx = skeleton.indices
    if idx.shape[0] != n:
        raise ValueError(f"skeleton batch {idx.shape[0]} != logits batch {n}")
    if idx.size and (idx.min() < 0 or idx.max() >= h * w):
        raise IndexError(f"selection index out of range for {h}x{w} map")
    flat = T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))       # N, HW, C'
    feats = T.take_along_axis(flat, idx[:, :, None], axis=1)
    return SelectedPoints(idx, skeleton.coords, skeleton.confidences, feats)


def select_block(logits: PixelLogits, k: int) -> SelectedPoints:
    return gather_points(logits, select(pixel_confidence(logits), k))


# ---------------------------------------------------------------------------
# selection dumps


def selection_records(image_ids: Sequence[str], blocks: Iterable[SelectedPoints]) -> list[dict]:
    records = []
    for b, pts in enumerate(blocks):
        for i, image_id in enumerate(image_ids):
            records.append({
                "image_id": image_id,
                "block": b,
                "points": [
                    {"rank": r, "row": int(pts.coords[i, r, 0]), "col": int(pts.coords[i, r, 1]),
                     "confidence": float(pts.confidences[i, r])}
                    for r in range(pts.k)
                ],
            })
    return records


def write_selection_dump(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_selection_dump(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
