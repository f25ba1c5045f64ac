"""The full plug-in pipeline: backbone -> FPN -> selector -> combiner."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .arrays import load_arrays, save_arrays
from .backbone import (BackboneConfig, FeatureMapSet, FpnConfig, backbone_forward,
                       fpn_project, init_backbone, init_fpn)
from .combiner import (GcnConfig, concat_points, concat_predict, gcn_fuse, init_concat_head,
                       init_gcn)
from .errors import ConfigError, DataError
from .rng import stream
from .selector import PixelLogits, SelectedPoints, SelectionConfig, classify_pixels, select_block
from .tensor import Tensor

COMBINERS = ("gcn", "concat")


@dataclass(frozen=True)
class PimConfig:
    num_classes: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fpn: FpnConfig = field(default_factory=FpnConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    gcn: GcnConfig = field(default_factory=GcnConfig)
    combiner: str = "gcn"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.fpn.fpn_size < self.num_classes:
            raise ConfigError(f"fpn_size {self.fpn.fpn_size} < number of classes {self.num_classes}")
        if self.combiner not in COMBINERS:
            raise ConfigError(f"combiner must be one of {COMBINERS}")
        if self.combiner == "gcn" and sum(self.n_sel) < self.gcn.num_supernodes:
            raise ConfigError("fewer selected points than super nodes")

    @property
    def n_sel(self) -> tuple[int, ...]:
        """Per-block selection counts after clamping to the map sizes."""
        positions = [h * w for _, h, w in self.backbone.output_shapes()]
        return self.selection.resolve(positions)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PimConfig":
        return cls(
            num_classes=int(d["num_classes"]),
            backbone=BackboneConfig(**d["backbone"]),
            fpn=FpnConfig(**d["fpn"]),
            selection=SelectionConfig(**d["selection"]),
            gcn=GcnConfig(**d["gcn"]),
            combiner=d.get("combiner", "gcn"),
        )


@dataclass
class PimOutput:
    features: FeatureMapSet
    projected: FeatureMapSet
    block_logits: list[PixelLogits]
    points: list[SelectedPoints]
    scores: Tensor                      # N x C', the combiner's pre-softmax output


class PimModel:
    def __init__(self, config: PimConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else self._init(seed)

    def _init(self, seed: int) -> dict[str, Tensor]:
        cfg = self.config
        params = init_backbone(cfg.backbone, seed)
        params.update(init_fpn(cfg.backbone, cfg.fpn, seed))
        rng = stream(seed, "init/selector")
        for b in range(4):
            params[f"selector.{b}.weight"] = Tensor(
                rng.normal(0, 1 / math.sqrt(cfg.fpn.fpn_size), (cfg.num_classes, cfg.fpn.fpn_size)), True)
            params[f"selector.{b}.bias"] = Tensor(np.zeros(cfg.num_classes), True)
        if cfg.combiner == "gcn":
            params.update(init_gcn(cfg.num_classes, cfg.gcn, seed))
        else:
            params.update(init_concat_head(sum(cfg.n_sel), cfg.num_classes, seed))
        return params

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, images) -> PimOutput:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        cfg = self.config
        feats = backbone_forward(x, self.params, cfg.backbone)
        proj = fpn_project(feats, self.params)
        logits, points = [], []
        for b, (fmap, k) in enumerate(zip(proj, cfg.n_sel)):
            pl = classify_pixels(fmap, self.params[f"selector.{b}.weight"], self.params[f"selector.{b}.bias"])
            logits.append(pl)
            points.append(select_block(pl, k))
        if cfg.combiner == "gcn":
            scores = gcn_fuse(concat_points(points), cfg.gcn, self.params)
        else:
            scores = concat_predict(concat_points(points), self.params["combiner.fc.weight"],
                                    self.params["combiner.fc.bias"])
        return PimOutput(feats, proj, logits, points, scores)

    __call__ = forward

    def predict(self, images, batch_size: int = 32) -> np.ndarray:
        """Combiner-head argmax for each image."""
        return np.argmax(self.scores(images, batch_size), axis=1)

    def scores(self, images, batch_size: int = 32) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i:i + batch_size]).scores.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.num_classes))

    # -- persistence ---------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise DataError(f"checkpoint is missing parameter {name}")
            if arrays[name].shape != p.shape:
                raise DataError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)


def save_checkpoint(path, model: PimModel, extra_arrays: dict | None = None, meta: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = v
    save_arrays(path, arrays, {"model": model.config.to_dict(), **(meta or {})})


def load_checkpoint(path) -> tuple[PimModel, dict[str, np.ndarray], dict]:
    arrays, meta = load_arrays(path)
    if "model" not in meta:
        raise DataError(f"{path}: no model config in checkpoint header")
    model = PimModel(PimConfig.from_dict(meta["model"]))
    model.load_state_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    extras = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return model, extras, meta
