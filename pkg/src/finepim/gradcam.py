"""Gradient-weighted class activation maps.

For a chosen feature map ``B`` (``M x H x W``) and class score ``z_d``:

    v_m = mean_{x,y} dz_d / dB^m_{xy}
    map = ReLU(sum_m v_m * B^m)

The map is divided by its maximum (left alone when it is all zero), resized
to the image with bilinear interpolation on half-pixel centres, and drawn
over the image through a blue -> green -> red ramp. Zero-valued pixels are
left transparent.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import tensor as T
from .errors import ConfigError

SOURCES = ("backbone", "fpn")


@dataclass(frozen=True)
class CamRequest:
    """Which map to explain and for which class. ``layer=None`` means the last block."""

    class_index: int | None = None
    layer: int | None = None
    source: str = "backbone"

    def resolve(self, num_layers: int, num_classes: int, predicted: int) -> "CamRequest":
        layer = num_layers - 1 if self.layer is None else self.layer
        cls = predicted if self.class_index is None else self.class_index
        if not 0 <= layer < num_layers:
            raise ConfigError(f"layer {layer} outside [0, {num_layers})")
        if not 0 <= cls < num_classes:
            raise ConfigError(f"class {cls} outside [0, {num_classes})")
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}")
        return CamRequest(int(cls), int(layer), self.source)

    @property
    def layer_name(self) -> str:
        return f"{'block' if self.source == 'backbone' else 'fpn'}{self.layer}"


@dataclass
class Heatmap:
    values: np.ndarray                 # target H x W, in [0, 1]
    source_shape: tuple[int, int]
    upsampled: tuple[int, int]
    raw: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        v = self.values
        if v.size and (v.min() < 0 or v.max() > 1 + 1e-12):
            raise ValueError("heatmap values must lie in [0, 1]")


# ---------------------------------------------------------------------------
# map arithmetic


def channel_weights(activations, output_grad) -> np.ndarray:
    """Spatial mean of the gradient per channel, ``M``."""
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(output_grad, dtype=np.float64)
    if a.shape != g.shape or a.ndim != 3:
        raise ValueError(f"activations {a.shape} and gradient {g.shape} must be equal M x H x W")
    return g.mean(axis=(1, 2))


def combine(activations, weights) -> np.ndarray:
    """``ReLU(sum_m v_m B^m)``, ``H x W``."""
    a = np.asarray(activations, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (a.shape[0],):
        raise ValueError(f"{w.shape[0] if w.ndim else 0} weights for {a.shape[0]} channels")
    return np.maximum(np.tensordot(w, a, axes=1), 0.0)


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    x = np.asarray(x, dtype=np.float64)
    (h, w), (th, tw) = x.shape, size
    r0, r1, fr = _bilinear_axis(h, th)
    c0, c1, fc = _bilinear_axis(w, tw)
    rows = x[r0] * (1 - fr)[:, None] + x[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def normalize_upsample(raw, target_size: tuple[int, int]) -> Heatmap:
    raw = np.asarray(raw, dtype=np.float64)
    th, tw = target_size
    if th < raw.shape[0] or tw < raw.shape[1]:
        raise ValueError(f"target {target_size} smaller than map {raw.shape}")
    peak = raw.max() if raw.size else 0.0
    norm = raw / peak if peak > 0 else np.zeros_like(raw)
    values = np.clip(resize_bilinear(norm, (th, tw)), 0.0, 1.0)
    return Heatmap(values, tuple(raw.shape), (th, tw), raw)


# ---------------------------------------------------------------------------
# rendering


def color_ramp(values) -> np.ndarray:
    """Piecewise-linear blue (0) -> green (0.5) -> red (1), as floats in [0, 1]."""
    t = np.clip(np.asarray(values, dtype=np.float64), 0, 1)
    lower = t < 0.5
    r = np.where(lower, 0.0, 2 * t - 1)
    g = np.where(lower, 2 * t, 2 - 2 * t)
    b = np.where(lower, 1 - 2 * t, 0.0)
    return np.stack([r, g, b], axis=-1)


def blend(image, heatmap: Heatmap | np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """8-bit RGB blend of a grayscale image in [0, 1] with the ramp-coloured heatmap."""
    img = np.asarray(image, dtype=np.float64)
    hm = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    if img.shape != hm.shape:
        raise ValueError(f"image {img.shape} and heatmap {hm.shape} differ in size")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    gray = np.repeat(np.clip(img, 0, 1)[..., None], 3, axis=-1)
    a = (alpha * (hm > 0))[..., None]
    out = (1 - a) * gray + a * color_ramp(hm)
    return np.rint(out * 255).astype(np.uint8)


def overlay(image, heatmap: Heatmap | np.ndarray, path, alpha: float = 0.4) -> np.ndarray:
    rgb = blend(image, heatmap, alpha)
    Image.fromarray(rgb).save(path)
    return rgb


# ---------------------------------------------------------------------------
# model-driven maps


@dataclass
class CamResult:
    request: CamRequest
    heatmap: Heatmap
    scores: np.ndarray
    weights: np.ndarray
    activations: np.ndarray
    gradient: np.ndarray
    output: object = field(default=None, repr=False)


def class_activation(model, image, request: CamRequest = CamRequest()) -> CamResult:
    """Grad-CAM for one ``R x R`` image against the combiner score of one class."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected one H x W image, got shape {img.shape}")
    out = model(img[None])
    scores = out.scores.data[0].copy()
    maps = out.features if request.source == "backbone" else out.projected
    req = request.resolve(len(maps), scores.shape[0], int(np.argmax(scores)))
    target = maps[req.layer]
    z = T.take_along_axis(out.scores, np.array([[req.class_index]]), axis=1)
    model.zero_grad()
    T.backward(T.sum(z))
    acts = target.data[0]
    grad = target.grad[0] if target.grad is not None else np.zeros_like(acts)
    model.zero_grad()
    weights = channel_weights(acts, grad)
    heat = normalize_upsample(combine(acts, weights), img.shape)
    return CamResult(req, heat, scores, weights, acts, grad, out)


def heatmap_name(image_id: str, class_name: str, request: CamRequest) -> str:
    return f"{image_id}_{class_name}_{request.layer_name}"


def write_cam(out_dir, image_id: str, image, result: CamResult, class_names=None,
              alpha: float = 0.4, selection_dump: str | None = None) -> tuple[str, str]:
    """Write the overlay PNG and its JSON sidecar; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    names = list(class_names) if class_names else [str(i) for i in range(len(result.scores))]
    req = result.request
    stem = os.path.join(out_dir, heatmap_name(image_id, names[req.class_index], req))
    overlay(image, result.heatmap, stem + ".png", alpha)
    points = []
    if result.output is not None:
        for b, pts in enumerate(result.output.points):
            points.append({"block": b, "coords": pts.coords[0].tolist()})
    record = {
        "image_id": image_id,
        "class_index": req.class_index,
        "class_name": names[req.class_index],
        "layer": req.layer,
        "source": req.source,
        "scores": {n: float(s) for n, s in zip(names, result.scores)},
        "predicted": names[int(np.argmax(result.scores))],
        "source_shape": list(result.heatmap.source_shape),
        "upsampled": list(result.heatmap.upsampled),
        "selection_dump": selection_dump,
        "selected_points": points,
    }
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    return stem + ".png", stem + ".json"
