"""Run configuration, data loading, the training loop and evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .augment import ZcaFit
from .backbone import BackboneConfig, FpnConfig
from .combiner import GcnConfig, total_loss
from .curation import load_split, read_manifest
from .errors import ConfigError, DataError, NumericError
from .metrics import MetricsReport, evaluate_predictions
from .model import PimConfig, PimModel, load_checkpoint, save_checkpoint
from .optim import make_optimizer
from .rng import stream
from .selector import SelectionConfig
from .synthetic import make_patch_dataset

log = logging.getLogger(__name__)

OPTIMIZERS = ("lion", "sgd", "adamw")
DEFAULT_HYPER = {"lion": {"delta": 5e-6}, "sgd": {"lr": 5e-4}, "adamw": {"lr": 5e-3}}


@dataclass(frozen=True)
class SyntheticData:
    """Patch-texture images generated on the fly instead of a manifest."""

    n_per_class: int = 64
    val_per_class: int = 16
    test_per_class: int = 16
    num_classes: int = 4
    patch: int = 4
    noise: float = 0.03

    def __post_init__(self):
        if min(self.n_per_class, self.val_per_class, self.test_per_class, self.patch) <= 0:
            raise ConfigError("synthetic counts and patch size must be positive")


@dataclass(frozen=True)
class RunConfig:
    resolution: int = 64
    batch_size: int = 16
    epochs: int = 100
    optimizer: str = "lion"
    optimizer_params: Mapping = field(default_factory=dict)
    n_sel: tuple[int, ...] = (2048, 512, 128, 32)
    fpn_size: int = 1536
    gcn: GcnConfig = field(default_factory=GcnConfig)
    block_channels: tuple[int, ...] = (16, 32, 64, 128)
    block_strides: tuple[int, ...] = (2, 2, 2, 2)
    conv_kernel: int = 3
    combiner: str = "gcn"
    seed: int = 0
    manifest: str | None = None
    synthetic: SyntheticData | None = None
    grad_clip: float | None = None
    standardize: bool = True
    num_classes: int | None = None

    def __post_init__(self):
        for name in ("n_sel", "block_channels", "block_strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "optimizer_params", dict(self.optimizer_params))
        for name in ("resolution", "batch_size", "epochs", "fpn_size", "conv_kernel"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        SelectionConfig(self.n_sel)
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("exactly one of manifest and synthetic must be set")
        # surfaces bad hyperparameters at load time rather than mid-run
        try:
            make_optimizer(self.optimizer, {}, **self.hyper)
        except TypeError as exc:
            raise ConfigError(f"bad {self.optimizer} parameters {dict(self.optimizer_params)}: {exc}") from None

    @property
    def hyper(self) -> dict:
        return {**DEFAULT_HYPER[self.optimizer], **self.optimizer_params}

    def model_config(self, num_classes: int) -> PimConfig:
        return PimConfig(
            num_classes=num_classes,
            backbone=BackboneConfig(self.resolution, self.block_channels, self.block_strides, self.conv_kernel),
            fpn=FpnConfig(self.fpn_size),
            selection=SelectionConfig(self.n_sel),
            gcn=self.gcn,
            combiner=self.combiner,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer_params"] = dict(self.optimizer_params)
        for k in ("n_sel", "block_channels", "block_strides"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if isinstance(d.get("gcn"), Mapping):
                d["gcn"] = GcnConfig(**d["gcn"])
            if isinstance(d.get("synthetic"), Mapping):
                d["synthetic"] = SyntheticData(**d["synthetic"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def toy_config(**overrides) -> RunConfig:
    """Small CPU-sized model on the synthetic patch task."""
    base = RunConfig(
        resolution=64, batch_size=16, epochs=50, optimizer="lion", optimizer_params={"delta": 3e-4},
        n_sel=(32, 16, 8, 4), fpn_size=32, gcn=GcnConfig(4, 1, 1.0, 32), block_channels=(8, 16, 32, 32),
        synthetic=SyntheticData(),
    )
    return replace(base, **overrides)


def load_config(path) -> RunConfig:
    """Read a JSON or YAML run config."""
    import yaml

    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: config must be a mapping")
    if data.get("manifest") and not os.path.isabs(data["manifest"]):
        data = {**data, "manifest": os.path.join(os.path.dirname(os.path.abspath(path)), data["manifest"])}
    return RunConfig.from_dict(data)


# ---------------------------------------------------------------------------
# data


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class DataSet:
    splits: dict[str, Split]
    classes: tuple[str, ...]

    def __getitem__(self, name: str) -> Split:
        if name not in self.splits or not len(self.splits[name]):
            raise DataError(f"split {name!r} is missing or empty")
        return self.splits[name]


def load_data(config: RunConfig) -> DataSet:
    if config.synthetic is not None:
        s = config.synthetic
        out = {}
        for name, n in (("train", s.n_per_class), ("val", s.val_per_class), ("test", s.test_per_class)):
            ds = make_patch_dataset(n, config.resolution, s.patch, s.num_classes, config.seed, s.noise, name)
            out[name] = Split(ds.images, ds.labels, ds.ids)
        return DataSet(out, tuple(f"class{i}" for i in range(s.num_classes)))
    if not os.path.exists(config.manifest):
        raise DataError(f"manifest {config.manifest} not found")
    manifest = read_manifest(config.manifest)
    out = {}
    for name in ("train", "val", "test1", "test2"):
        if manifest.split(name):
            ls = load_split(config.manifest, name, config.resolution)
            out[name] = Split(ls.images, ls.labels, ls.ids)
    return DataSet(out, manifest.classes)


@dataclass
class Standardizer:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, images) -> "Standardizer":
        sd = float(np.std(images))
        return cls(float(np.mean(images)), sd if sd > 0 else 1.0)

    def __call__(self, images) -> np.ndarray:
        return (np.asarray(images, dtype=np.float64) - self.mean) / self.std

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"input/mean": np.array([self.mean]), "input/std": np.array([self.std])}

    @classmethod
    def from_arrays(cls, arrays) -> "Standardizer":
        if "input/mean" not in arrays:
            return cls()
        return cls(float(arrays["input/mean"][0]), float(arrays["input/std"][0]))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: PimModel
    log: list[dict]
    best_epoch: int
    best_val_accuracy: float
    standardizer: Standardizer
    classes: tuple[str, ...]
    checkpoint: str | None = None
    config: RunConfig | None = None
    seconds: float = 0.0

    @property
    def epoch0_loss(self) -> float:
        return self.log[0]["train_loss"]

    @property
    def final_loss(self) -> float:
        return self.log[-1]["train_loss"]


def clip_gradients(params, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _loss_value(model: PimModel, images, labels, batch_size: int) -> tuple[float, np.ndarray]:
    total, preds = 0.0, []
    with T.no_grad():
        for i in range(0, len(labels), batch_size):
            out = model(images[i:i + batch_size])
            loss, _ = total_loss(out.block_logits, out.scores, labels[i:i + batch_size])
            total += loss.item() * len(out.scores.data)
            preds.append(np.argmax(out.scores.data, axis=1))
    return total / len(labels), np.concatenate(preds)


def train(config: RunConfig, out_dir=None, data: DataSet | None = None, keep_best: bool = True,
          progress=None) -> TrainResult:
    """Train from scratch; keeps the best-validation-accuracy weights when ``keep_best``.

    Writes ``train_log.jsonl`` and ``checkpoint.arrays`` under ``out_dir`` when given.
    ``keep_best=False`` returns the final-epoch weights (and needs no val split).
    """
    start = time.perf_counter()
    data = data or load_data(config)
    if config.num_classes is not None and config.num_classes != len(data.classes):
        raise ConfigError(f"config expects {config.num_classes} classes, data has {len(data.classes)}")
    tr = data["train"]
    val = data["val"] if keep_best else None
    if tr.images.shape[1:] != (config.resolution, config.resolution):
        raise DataError(f"images are {tr.images.shape[1:]}, config resolution is {config.resolution}")
    std = Standardizer.fit(tr.images) if config.standardize else Standardizer()
    x_tr = std(tr.images)
    x_val = std(val.images) if val is not None else None

    model = PimModel(config.model_config(len(data.classes)), seed=config.seed)
    opt = make_optimizer(config.optimizer, model.params, **config.hyper)
    records: list[dict] = []
    best = (-1.0, -1, None)
    log_fh = step_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w", encoding="utf-8")
        step_fh = open(os.path.join(out_dir, "step_log.jsonl"), "w", encoding="utf-8")
    try:
        for epoch in range(config.epochs):
            rng = stream(config.seed, "train/shuffle", epoch)
            seen, running = 0, 0.0
            for step, idx in enumerate(_batches(len(tr), config.batch_size, rng)):
                out = model(x_tr[idx])
                loss, report = total_loss(out.block_logits, out.scores, tr.labels[idx])
                if not math.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                model.zero_grad()
                T.backward(loss)
                if config.grad_clip is not None:
                    clip_gradients(model.params, config.grad_clip)
                opt.step()
                running += loss.item() * len(idx)
                seen += len(idx)
                if step_fh:
                    step_fh.write(json.dumps(report.as_record(epoch=epoch, step=step), sort_keys=True) + "\n")
            rec = {"epoch": epoch, "train_loss": running / seen,
                   "train_accuracy": float(np.mean(model.predict(x_tr, config.batch_size) == tr.labels))}
            if val is not None:
                vloss, vpred = _loss_value(model, x_val, val.labels, config.batch_size)
                rec["val_loss"] = vloss
                rec["val_accuracy"] = float(np.mean(vpred == val.labels))
                if rec["val_accuracy"] > best[0]:
                    best = (rec["val_accuracy"], epoch, {k: v.copy() for k, v in model.state_arrays().items()})
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            if progress:
                progress(rec)
    except ValueError as exc:
        # overflowing activations surface as non-finite softmax input
        if "non-finite" in str(exc):
            raise NumericError(f"training diverged at epoch {len(records)}: {exc}") from None
        raise
    finally:
        for fh in (log_fh, step_fh):
            if fh:
                fh.close()
    if keep_best and best[2] is not None:
        model.load_state_arrays(best[2])
        best_epoch, best_acc = best[1], best[0]
    else:
        best_epoch, best_acc = config.epochs - 1, records[-1].get("val_accuracy", float("nan"))
    result = TrainResult(model, records, best_epoch, best_acc, std, data.classes, None, config)
    if out_dir is not None:
        result.checkpoint = os.path.join(out_dir, "checkpoint.arrays")
        write_run_checkpoint(result.checkpoint, result, opt.state_arrays())
    result.seconds = time.perf_counter() - start
    return result


def write_run_checkpoint(path, result: TrainResult, optimizer_state: dict | None = None) -> None:
    extras = dict(result.standardizer.to_arrays())
    extras.update(optimizer_state or {})
    cfg = result.config
    if cfg is not None and cfg.manifest:
        manifest = read_manifest(cfg.manifest)
        zca = manifest.meta.get("zca")
        if zca:
            from .arrays import load_arrays

            arrays, _ = load_arrays(os.path.join(os.path.dirname(os.path.abspath(cfg.manifest)), zca))
            extras.update(arrays)
    meta = {"run": cfg.to_dict() if cfg else None, "classes": list(result.classes),
            "best_epoch": result.best_epoch, "best_val_accuracy": result.best_val_accuracy}
    save_checkpoint(path, result.model, extras, meta)


@dataclass
class LoadedRun:
    model: PimModel
    standardizer: Standardizer
    classes: tuple[str, ...]
    config: RunConfig | None
    zca: ZcaFit | None
    meta: dict

    def prepare(self, raw_images) -> np.ndarray:
        """Raw ``[0, 1]`` images -> model input (whitening, then standardization)."""
        x = np.asarray(raw_images, dtype=np.float64)
        if self.zca is not None:
            x = self.zca.apply(x)
        return self.standardizer(x)


def load_run(path) -> LoadedRun:
    if not os.path.exists(path):
        raise DataError(f"checkpoint {path} not found")
    model, extras, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["run"]) if meta.get("run") else None
    zca = ZcaFit.from_arrays(extras) if "zca/matrix" in extras else None
    classes = tuple(meta.get("classes") or [str(i) for i in range(model.config.num_classes)])
    return LoadedRun(model, Standardizer.from_arrays(extras), classes, cfg, zca, meta)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(model: PimModel, images, labels, classes, standardizer: Standardizer | None = None,
                   batch_size: int = 32) -> MetricsReport:
    if len(labels) == 0:
        raise DataError("cannot evaluate an empty split")
    x = standardizer(images) if standardizer else images
    pred = model.predict(x, batch_size)
    return evaluate_predictions(labels, pred, len(classes), classes)


def evaluate(checkpoint, split: str, config: RunConfig | None = None) -> MetricsReport:
    """Score a saved run on one split of its dataset (or of ``config``'s dataset)."""
    run = load_run(checkpoint)
    cfg = config or run.config
    if cfg is None:
        raise ConfigError("checkpoint carries no run config; pass one explicitly")
    data = load_data(cfg)
    sp = data[split]
    # manifest images are already whitened by load_data
    return evaluate_model(run.model, sp.images, sp.labels, data.classes, run.standardizer, cfg.batch_size)


def evaluation_splits(data: DataSet) -> list[str]:
    return [s for s in ("test1", "test2", "test") if s in data.splits and len(data.splits[s])]
