"""Random affine/brightness augmentation and ZCA whitening for grayscale images.

The transform follows the common image-generator semantics: rotation and
shear in degrees, shifts as fractions of the image extent, independent zoom
factors per axis drawn from ``[1 - zoom, 1 + zoom]``, an optional horizontal
flip and a multiplicative brightness factor. The affine part is composed
about the image centre and resampled with bilinear interpolation; pixels
that fall outside the source take a constant fill value.

Every sampled value is returned in a log so an augmented image can be
regenerated from its parent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

FILL_MODES = ("constant", "nearest", "reflect", "wrap")


@dataclass(frozen=True)
class AugmentationParams:
    rotation_range: float = 15.0
    width_shift: float = 0.2
    height_shift: float = 0.1
    horizontal_flip: bool = True
    shear: float = 0.2
    brightness: tuple[float, float] = (0.7, 1.3)
    zoom: float = 0.1
    fill_mode: str = "constant"
    fill_value: float = 0.0
    zca_whitening: bool = True
    zca_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "brightness", tuple(float(b) for b in self.brightness))
        if min(self.rotation_range, self.width_shift, self.height_shift, self.shear, self.zoom) < 0:
            raise ConfigError("augmentation ranges must be nonnegative")
        lo, hi = self.brightness
        if not 0 < lo <= hi:
            raise ConfigError(f"brightness range must satisfy 0 < lo <= hi, got {self.brightness}")
        if self.zoom >= 1:
            raise ConfigError("zoom must be < 1")
        if self.fill_mode not in FILL_MODES:
            raise ConfigError(f"fill_mode must be one of {FILL_MODES}")
        if self.zca_epsilon < 0:
            raise ConfigError("zca_epsilon must be nonnegative")

    @classmethod
    def identity(cls) -> "AugmentationParams":
        return cls(0.0, 0.0, 0.0, False, 0.0, (1.0, 1.0), 0.0, "constant", 0.0, False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["brightness"] = list(self.brightness)
        return d


def sample_transform(params: AugmentationParams, rng: np.random.Generator, shape: tuple[int, int]) -> dict:
    """Draw one set of transform values; shifts are stored in pixels."""
    h, w = shape
    lo, hi = params.brightness
    zx, zy = (rng.uniform(1 - params.zoom, 1 + params.zoom, 2) if params.zoom else (1.0, 1.0))
    return {
        "rotation": float(rng.uniform(-params.rotation_range, params.rotation_range)) if params.rotation_range else 0.0,
        "shift_rows": float(rng.uniform(-params.height_shift, params.height_shift) * h) if params.height_shift else 0.0,
        "shift_cols": float(rng.uniform(-params.width_shift, params.width_shift) * w) if params.width_shift else 0.0,
        "shear": float(rng.uniform(-params.shear, params.shear)) if params.shear else 0.0,
        "zoom_rows": float(zx),
        "zoom_cols": float(zy),
        "flip": bool(params.horizontal_flip and rng.uniform() < 0.5),
        "brightness": float(rng.uniform(lo, hi)) if hi > lo else float(lo),
    }


def affine_matrix(log: dict, shape: tuple[int, int]) -> np.ndarray:
    """3x3 map from output (row, col, 1) to source coordinates."""
    theta = math.radians(log["rotation"])
    shear = math.radians(log["shear"])
    rot = np.array([[math.cos(theta), -math.sin(theta), 0], [math.sin(theta), math.cos(theta), 0], [0, 0, 1]])
    shift = np.array([[1, 0, log["shift_rows"]], [0, 1, log["shift_cols"]], [0, 0, 1]])
    shr = np.array([[1, -math.sin(shear), 0], [0, math.cos(shear), 0], [0, 0, 1]])
    zoom = np.array([[log["zoom_rows"], 0, 0], [0, log["zoom_cols"], 0], [0, 0, 1]])
    m = rot @ shift @ shr @ zoom
    cr, cc = shape[0] / 2 + 0.5, shape[1] / 2 + 0.5
    to_centre = np.array([[1, 0, cr], [0, 1, cc], [0, 0, 1]])
    from_centre = np.array([[1, 0, -cr], [0, 1, -cc], [0, 0, 1]])
    return to_centre @ m @ from_centre


def apply_transform(image, log: dict, params: AugmentationParams = AugmentationParams()) -> np.ndarray:
    """Apply a sampled transform to an ``H x W`` image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected an H x W image, got {img.shape}")
    m = affine_matrix(log, img.shape)
    if np.array_equal(m, np.eye(3)):
        out = img.copy()
    else:
        out = ndimage.affine_transform(img, m[:2, :2], offset=m[:2, 2], order=1,
                                       mode=params.fill_mode, cval=params.fill_value)
    if log["flip"]:
        out = out[:, ::-1]
    if log["brightness"] != 1.0:
        out = np.clip(out * log["brightness"], 0.0, 1.0)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# ZCA


@dataclass
class ZcaFit:
    mean: np.ndarray           # d
    matrix: np.ndarray         # d x d
    epsilon: float

    def apply(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        flat = x.reshape(len(x), -1)
        if flat.shape[1] != self.mean.size:
            raise DataError(f"images have {flat.shape[1]} pixels, whitening expects {self.mean.size}")
        return ((flat - self.mean) @ self.matrix).reshape(x.shape)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"zca/mean": self.mean, "zca/matrix": self.matrix, "zca/epsilon": np.array([self.epsilon])}

    @classmethod
    def from_arrays(cls, arrays) -> "ZcaFit":
        try:
            return cls(arrays["zca/mean"], arrays["zca/matrix"], float(arrays["zca/epsilon"][0]))
        except KeyError as exc:
            raise DataError(f"whitening arrays missing {exc}") from None


def fit_zca(images, epsilon: float = 1e-5) -> ZcaFit:
    """``W = U diag(1 / sqrt(s + eps)) U^T`` from the population covariance."""
    x = np.asarray(images, dtype=np.float64)
    if len(x) < 2:
        raise DataError("whitening needs at least two images")
    flat = x.reshape(len(x), -1)
    mean = flat.mean(axis=0)
    centred = flat - mean
    if not np.any(centred):
        raise DataError("whitening input images are all identical")
    cov = centred.T @ centred / len(flat)
    s, u = np.linalg.eigh(cov)
    s = np.clip(s, 0.0, None)
    if epsilon == 0 and np.any(s <= 0):
        raise DataError("covariance is singular; use a positive epsilon")
    w = (u / np.sqrt(s + epsilon)) @ u.T
    return ZcaFit(mean, w, float(epsilon))


def zca_whiten(images, epsilon: float = 1e-5) -> tuple[np.ndarray, ZcaFit]:
    fit = fit_zca(images, epsilon)
    return fit.apply(images), fit
