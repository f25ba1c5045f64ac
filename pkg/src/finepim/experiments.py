"""Multi-run protocols: stratified K-fold, ablation sweeps, the improvement ladder, heatmap export."""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, FinePimError
from .gradcam import CamRequest, class_activation, write_cam
from .rng import stream
from .training import (DataSet, RunConfig, Split, evaluate_model, evaluation_splits, load_data, load_run,
                       train)

# ---------------------------------------------------------------------------
# K-fold


def stratified_folds(labels, k: int, seed: int = 0, groups=None) -> list[np.ndarray]:
    """Validation index sets for ``k`` stratified folds.

    Without ``groups`` each class is shuffled and dealt round-robin starting
    at fold 0, so per-class fold sizes differ by at most one and equally
    sized classes get identical per-fold counts. With ``groups`` whole groups
    are dealt to the currently smallest fold of their class, largest groups
    first, keeping every group inside one fold.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ConfigError("K must be at least 2")
    if k > len(labels):
        raise ConfigError(f"K={k} exceeds the {len(labels)} available records")
    rng = stream(seed, "kfold")
    folds: list[list[int]] = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise DataError(f"class {c} has {len(idx)} records, fewer than K={k}")
        if groups is None:
            for j, i in enumerate(idx[rng.permutation(len(idx))]):
                folds[j % k].append(int(i))
            continue
        by_group: dict = defaultdict(list)
        for i in idx:
            by_group[groups[i]].append(int(i))
        keys = sorted(by_group, key=str)
        keys = [keys[i] for i in rng.permutation(len(keys))]
        keys.sort(key=lambda g: -len(by_group[g]))
        sizes = np.zeros(k, dtype=int)
        for g in keys:
            f = int(np.argmin(sizes))
            folds[f].extend(by_group[g])
            sizes[f] += len(by_group[g])
    return [np.array(sorted(f), dtype=np.intp) for f in folds]


@dataclass
class KFoldReport:
    accuracies: list[float]
    mean: float
    std: float
    k: int
    epochs_per_fold: int
    checkpoint_rule: str = "final epoch"

    def to_dict(self) -> dict:
        return {"k": self.k, "epochs_per_fold": self.epochs_per_fold, "checkpoint_rule": self.checkpoint_rule,
                "fold_accuracies": self.accuracies, "mean": self.mean, "std": self.std, "std_kind": "population"}

    def format(self) -> str:
        lines = [f"# {self.k}-fold cross-validation, {self.epochs_per_fold} epochs per fold, "
                 f"weights from the {self.checkpoint_rule}",
                 "fold,accuracy"]
        lines += [f"{i},{a:.6f}" for i, a in enumerate(self.accuracies)]
        lines.append(f"mean,{self.mean:.6f}")
        lines.append(f"std,{self.std:.6f}")
        return "\n".join(lines)


# fit(train_images, train_labels, fold) -> predict(images) -> labels
Trainer = Callable[[np.ndarray, np.ndarray, int], Callable[[np.ndarray], np.ndarray]]


def kfold_evaluate(images, labels, k: int, fit: Trainer, seed: int = 0, groups=None,
                   epochs_per_fold: int = 0) -> KFoldReport:
    images, labels = np.asarray(images), np.asarray(labels)
    accs = []
    for f, val_idx in enumerate(stratified_folds(labels, k, seed, groups)):
        mask = np.ones(len(labels), dtype=bool)
        mask[val_idx] = False
        predict = fit(images[mask], labels[mask], f)
        accs.append(float(np.mean(predict(images[val_idx]) == labels[val_idx])))
    return KFoldReport(accs, float(np.mean(accs)), float(np.std(accs)), k, epochs_per_fold)


def pooled_data(data: DataSet) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Every split except the original-image test set, concatenated."""
    names = [s for s in ("train", "val", "test1", "test") if s in data.splits]
    imgs = np.concatenate([data.splits[s].images for s in names])
    labs = np.concatenate([data.splits[s].labels for s in names])
    ids = [i for s in names for i in data.splits[s].ids]
    return imgs, labs, ids


def pim_trainer(config: RunConfig, classes) -> Trainer:
    def fit(images, labels, fold):
        cfg = replace(config, seed=config.seed + fold)
        data = DataSet({"train": Split(images, labels, [str(i) for i in range(len(labels))])}, tuple(classes))
        result = train(cfg, data=data, keep_best=False)
        return lambda x: result.model.predict(result.standardizer(x), cfg.batch_size)
    return fit


def kfold(config: RunConfig, k: int = 10, epochs_per_fold: int = 10, fit: Trainer | None = None,
          groups_from_manifest: bool = True) -> KFoldReport:
    data = load_data(config)
    images, labels, ids = pooled_data(data)
    groups = None
    if config.manifest and groups_from_manifest:
        from .curation import read_manifest

        parent = {r.image_id: (r.parent_id or r.image_id) for r in read_manifest(config.manifest).records}
        groups = [parent.get(i, i) for i in ids]
    fit = fit or pim_trainer(replace(config, epochs=epochs_per_fold), data.classes)
    return kfold_evaluate(images, labels, k, fit, config.seed, groups, epochs_per_fold)


# ---------------------------------------------------------------------------
# ablation


AXES = ("n_sel", "fpn_size")


@dataclass
class AblationRow:
    variant: str
    accuracies: dict[str, float]
    error: str | None = None


def _variant_label(value) -> str:
    return "(" + ",".join(str(v) for v in value) + ")" if isinstance(value, (tuple, list)) else str(value)


def ablate(base: RunConfig, axis: str, values: Sequence, runner=None) -> list[AblationRow]:
    """Train and test one variant per value; a failing variant is recorded, not raised."""
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}")
    if not values:
        raise ConfigError("ablation needs at least one value")
    runner = runner or run_and_test
    rows = []
    for value in values:
        label = _variant_label(value)
        try:
            cfg = replace(base, **{axis: tuple(value) if axis == "n_sel" else int(value)})
            rows.append(AblationRow(label, runner(cfg)))
        except (FinePimError, ValueError, ArithmeticError) as exc:
            rows.append(AblationRow(label, {}, f"{type(exc).__name__}: {exc}"))
    return rows


def run_and_test(config: RunConfig) -> dict[str, float]:
    """Train with best-val selection; test accuracy for each available test split."""
    data = load_data(config)
    result = train(config, data=data)
    return {s: evaluate_model(result.model, data[s].images, data[s].labels, data.classes,
                              result.standardizer, config.batch_size).accuracy
            for s in evaluation_splits(data)}


def format_table(rows: Sequence[AblationRow], axis: str) -> str:
    cols = sorted({c for r in rows for c in r.accuracies})
    lines = [",".join([axis] + cols + ["error"])]
    for r in rows:
        vals = [f"{r.accuracies[c]:.4f}" if c in r.accuracies else "" for c in cols]
        lines.append(",".join([f'"{r.variant}"'] + vals + [json.dumps(r.error) if r.error else ""]))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# improvement ladder


LADDER_ROWS = ("PIM without augmentation", "PIM with augmentation", "PIM + LION", "PIM + LION + 1024 FPN")
# published test-set accuracies (%), kept for side-by-side display only
LADDER_REFERENCE = {
    "PIM without augmentation": (40.93, 43.75),
    "PIM with augmentation": (84.38, 82.50),
    "PIM + LION": (85.44, 83.75),
    "PIM + LION + 1024 FPN": (85.70, 81.25),
}


def ladder_configs(base: RunConfig, augmented_manifest: str | None = None,
                   original_manifest: str | None = None) -> dict[str, RunConfig]:
    """The four cumulative configurations: no augmentation, augmentation, LION, 1024-wide FPN."""
    aug = replace(base, manifest=augmented_manifest) if augmented_manifest else base
    plain = replace(base, manifest=original_manifest) if original_manifest else aug
    sgd = {"optimizer": "sgd", "optimizer_params": {}}
    lion = {"optimizer": "lion", "optimizer_params": {}}
    return {
        LADDER_ROWS[0]: replace(plain, **sgd),
        LADDER_ROWS[1]: replace(aug, **sgd),
        LADDER_ROWS[2]: replace(aug, **lion),
        LADDER_ROWS[3]: replace(aug, fpn_size=1024, **lion),
    }


def ladder_report(measured: dict[str, dict[str, float]] | None = None) -> str:
    """Render the ladder with measured accuracies (blank when not run) next to the reference values."""
    measured = measured or {}
    lines = ["configuration,test1,test2,reference_test1,reference_test2"]
    for row in LADDER_ROWS:
        m = measured.get(row, {})
        t1 = m.get("test1", m.get("test"))
        t2 = m.get("test2")
        ref1, ref2 = LADDER_REFERENCE[row]
        fmt = lambda v: "" if v is None else f"{100 * v:.2f}"  # noqa: E731
        lines.append(f"{row},{fmt(t1)},{fmt(t2)},{ref1:.2f},{ref2:.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# heatmaps


def explain(checkpoint, images: dict[str, np.ndarray], out_dir, class_index: int | None = None,
            layer: int | None = None, source: str = "backbone", alpha: float = 0.4,
            selection_dump: str | None = None) -> list[tuple[str, str]]:
    """One overlay PNG + JSON sidecar per image; ``images`` maps id -> raw ``[0, 1]`` image."""
    run = load_run(checkpoint)
    res = run.model.config.backbone.input_resolution
    written = []
    for image_id, raw in images.items():
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape != (res, res):
            raise DataError(f"{image_id}: image is {raw.shape}, model expects {(res, res)}")
        x = run.prepare(raw[None])[0]
        result = class_activation(run.model, x, CamRequest(class_index, layer, source))
        written.append(write_cam(out_dir, image_id, raw, result, run.classes, alpha, selection_dump))
    return written


def explain_paths(checkpoint, paths: Sequence[str], out_dir, **kwargs) -> list[tuple[str, str]]:
    from .curation import load_image

    run = load_run(checkpoint)
    res = run.model.config.backbone.input_resolution
    imgs = {os.path.splitext(os.path.basename(p))[0]: load_image(p, res) for p in paths}
    return explain(checkpoint, imgs, out_dir, **kwargs)
