"""Dataset curation: single-class extraction, filtering, balancing and splitting.

Pipeline, per run:

1. keep images carrying exactly one pathology label (the laterality marker
   ``text`` is ignored) that is not excluded;
2. drop classes with fewer than ``min_class_count`` images;
3. per class, hold out ``n - floor(split_fraction * n)`` originals for
   testing (``test_fracture`` for the over-represented class);
4. downsample the over-represented class to its training target and augment
   every other class up to its target, cycling parents round-robin;
5. split each class ``floor(split_fraction * n)`` / rest into train / val,
   keeping each augmentation family together when ``leakage_safe``;
6. build ``test2`` from the held-out originals and ``test1`` by expanding
   every held-out original to ``test1_per_class // n`` images (the original
   plus augmented copies); the over-represented class contributes
   ``test1_per_class`` originals instead.

Augmented pixels are stored as 8-bit PNG before whitening; whitening is fit
on the training split and applied when images are loaded.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .arrays import load_arrays, save_arrays
from .augment import AugmentationParams, ZcaFit, apply_transform, fit_zca, sample_transform
from .errors import ConfigError, DataError
from .rng import stream

log = logging.getLogger(__name__)

PROJECTIONS = ("posteroanterior", "lateral", "unknown")
SPLITS = ("train", "val", "test1", "test2")
IGNORED_LABELS = frozenset({"text"})
CLASSES = ("boneanomaly", "fracture", "metal", "softtissue")

# post-augmentation training-pool sizes per class
PRESETS: dict[str, dict[str, int]] = {
    "A1": {"boneanomaly": 1050, "fracture": 1100, "metal": 1054, "softtissue": 1034},
    "A2": {"boneanomaly": 490, "fracture": 500, "metal": 496, "softtissue": 470},
    "A3": {"boneanomaly": 280, "fracture": 300, "metal": 310, "softtissue": 282},
    "A4": {"boneanomaly": 210, "fracture": 200, "metal": 186, "softtissue": 188},
}


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class RawRecord:
    image_id: str
    image_path: str
    objects: frozenset
    projection: str = "unknown"

    def __post_init__(self):
        object.__setattr__(self, "objects", frozenset(self.objects))
        if not self.objects:
            raise DataError(f"{self.image_id}: record has no objects")
        if self.projection not in PROJECTIONS:
            raise DataError(f"{self.image_id}: unknown projection {self.projection!r}")

    @property
    def pathologies(self) -> frozenset:
        return self.objects - IGNORED_LABELS


def read_annotations(path) -> list[RawRecord]:
    """Parse ``image_id,path,obj1;obj2,projection`` rows; a header row is optional."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and row[0].strip().lower() == "image_id":
                continue
            if len(row) not in (3, 4):
                raise DataError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(row)}")
            objects = frozenset(o.strip().lower() for o in row[2].split(";") if o.strip())
            projection = row[3].strip().lower() if len(row) == 4 and row[3].strip() else "unknown"
            try:
                records.append(RawRecord(row[0].strip(), row[1].strip(), objects, projection))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return records


@dataclass
class ManifestRecord:
    image_id: str
    label: str
    split: str
    path: str
    parent_id: str | None = None
    transform_log: dict | None = None

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "class": self.label, "split": self.split, "path": self.path,
                "parent_id": self.parent_id, "transform_log": self.transform_log}


@dataclass
class Manifest:
    records: list[ManifestRecord]
    classes: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {s: {c: 0 for c in self.classes} for s in SPLITS}
        for r in self.records:
            out[r.split][r.label] += 1
        return out

    def validate(self, leakage_safe: bool | None = None) -> None:
        by_id = {r.image_id: r for r in self.records}
        if len(by_id) != len(self.records):
            raise DataError("manifest has duplicate image ids")
        for r in self.records:
            if r.split not in SPLITS:
                raise DataError(f"{r.image_id}: unknown split {r.split!r}")
            if r.parent_id is None:
                continue
            parent = by_id.get(r.parent_id)
            if parent is None:
                raise DataError(f"{r.image_id}: parent {r.parent_id} not in manifest")
            if parent.label != r.label:
                raise DataError(f"{r.image_id}: class differs from parent {r.parent_id}")
        safe = self.meta.get("leakage_safe") if leakage_safe is None else leakage_safe
        if safe:
            tests = {"test1", "test2"}
            for fam, splits in family_splits(self.records).items():
                fitting = splits - tests
                if len(fitting) > 1 or (fitting and splits & tests):
                    raise DataError(f"augmentation family {fam} spans splits {sorted(splits)}")


def family_splits(records: Iterable[ManifestRecord]) -> dict[str, set[str]]:
    fams: dict[str, set[str]] = defaultdict(set)
    for r in records:
        fams[r.parent_id or r.image_id].add(r.split)
    return fams


def write_manifest(path, manifest: Manifest) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"manifest": manifest.meta, "classes": list(manifest.classes)}, sort_keys=True) + "\n")
        for r in manifest.records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_manifest(path) -> Manifest:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if not lines or "classes" not in lines[0]:
        raise DataError(f"{path}: missing manifest header line")
    head, body = lines[0], lines[1:]
    records = [ManifestRecord(d["image_id"], d["class"], d["split"], d["path"], d.get("parent_id"),
                              d.get("transform_log")) for d in body]
    return Manifest(records, tuple(head["classes"]), head.get("manifest", {}))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class CurationConfig:
    excluded_classes: frozenset = frozenset({"foreignbody"})
    min_class_count: int = 50
    fracture_class: str = "fracture"
    fracture_target: int = 500
    per_class_target: Mapping[str, int] | int = field(default_factory=lambda: dict(PRESETS["A2"]))
    test_mode: str = "both"                      # augmented (test1), original (test2) or both
    test1_per_class: int = 120
    test_fracture: int = 25
    split_fraction: float = 0.8
    leakage_safe: bool = True
    resolution: int = 64
    seed: int = 0
    augmentation: AugmentationParams = field(default_factory=AugmentationParams)

    def __post_init__(self):
        object.__setattr__(self, "excluded_classes", frozenset(self.excluded_classes))
        if not 0 < self.split_fraction < 1:
            raise ConfigError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.test_mode not in ("augmented", "original", "both"):
            raise ConfigError("test_mode must be augmented, original or both")
        targets = self.per_class_target
        values = targets.values() if isinstance(targets, Mapping) else [targets]
        if any(int(v) <= 0 for v in values) or self.fracture_target <= 0:
            raise ConfigError("targets must be positive")
        if self.min_class_count < 1 or self.test1_per_class < 0 or self.test_fracture < 0:
            raise ConfigError("counts must be nonnegative (min_class_count >= 1)")
        if self.resolution <= 0:
            raise ConfigError("resolution must be positive")

    def target_for(self, label: str) -> int:
        if label == self.fracture_class:
            return self.fracture_target
        t = self.per_class_target
        if isinstance(t, Mapping):
            if label not in t:
                raise ConfigError(f"no augmentation target for class {label!r}")
            return int(t[label])
        return int(t)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["excluded_classes"] = sorted(self.excluded_classes)
        d["per_class_target"] = dict(self.per_class_target) if isinstance(self.per_class_target, Mapping) \
            else self.per_class_target
        d["augmentation"] = self.augmentation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CurationConfig":
        d = dict(d)
        if "augmentation" in d and isinstance(d["augmentation"], Mapping):
            d["augmentation"] = AugmentationParams(**d["augmentation"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown curation keys: {sorted(unknown)}")
        return cls(**d)


def preset(name: str, **overrides) -> CurationConfig:
    """Curation config for one of the four published training-pool sizes."""
    key = name.upper()
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    targets = PRESETS[key]
    return CurationConfig(fracture_target=targets["fracture"], per_class_target=dict(targets), **overrides)


def split_counts(n: int, fraction: float) -> tuple[int, int]:
    """``(floor(fraction * n), rest)``."""
    k = int(np.floor(fraction * n + 1e-9))
    return k, n - k


# ---------------------------------------------------------------------------
# extraction and filtering


def class_counts(records: Iterable[RawRecord]) -> dict[str, int]:
    c = Counter(next(iter(r.pathologies)) for r in records if len(r.pathologies) == 1)
    return dict(sorted(c.items()))


def extract_single_class(raw: Sequence[RawRecord], config: CurationConfig) -> list[RawRecord]:
    if not raw:
        raise DataError("no records to extract from")
    kept = [r for r in raw if len(r.pathologies) == 1 and not (r.pathologies & config.excluded_classes)]
    counts = class_counts(kept)
    log.info("single-class counts: %s", counts)
    if not kept:
        raise DataError(f"no single-class records; label counts were {dict(Counter(o for r in raw for o in r.objects))}")
    return kept


def label_of(record: RawRecord) -> str:
    (label,) = record.pathologies
    return label


def filter_and_downsample(records: Sequence[RawRecord], config: CurationConfig,
                          fracture_target: int | None = None) -> list[RawRecord]:
    """Drop rare classes, then subsample the over-represented class."""
    counts = Counter(label_of(r) for r in records)
    keep = {c for c, n in counts.items() if n >= config.min_class_count}
    for c in sorted(set(counts) - keep):
        log.info("dropping class %s with %d records", c, counts[c])
    out = [r for r in records if label_of(r) in keep]
    target = config.fracture_target if fracture_target is None else fracture_target
    frac = sorted((r for r in out if label_of(r) == config.fracture_class), key=lambda r: r.image_id)
    if not frac:
        return out
    if target > len(frac):
        raise DataError(f"{config.fracture_class} target {target} exceeds the {len(frac)} available")
    rng = stream(config.seed, "curate/downsample")
    chosen = {frac[i].image_id for i in rng.choice(len(frac), size=target, replace=False)}
    return [r for r in out if label_of(r) != config.fracture_class or r.image_id in chosen]


# ---------------------------------------------------------------------------
# augmentation planning


@dataclass
class AugmentedRecord:
    image_id: str
    parent: RawRecord
    label: str
    transform_log: dict


def augment_to(records: Sequence[RawRecord], label: str, target: int, params: AugmentationParams,
               seed: int, tag: str = "train", shape: tuple[int, int] = (64, 64)) -> list[AugmentedRecord]:
    """Plan ``target - n`` augmented children of class ``label``, parents cycled round-robin.

    Each child's transform is drawn from a stream keyed on (seed, tag, class,
    child index), so the plan does not depend on processing order.
    """
    parents = sorted((r for r in records if label_of(r) == label), key=lambda r: r.image_id)
    if not parents:
        raise DataError(f"class {label!r} has no records to augment")
    need = target - len(parents)
    if need < 0:
        log.warning("class %s already has %d records, above target %d; nothing to add", label, len(parents), target)
        return []
    out = []
    for i in range(need):
        parent = parents[i % len(parents)]
        rng = stream(seed, f"augment/{tag}/{label}", i)
        tlog = sample_transform(params, rng, shape)
        tlog["order"] = ["affine", "flip", "brightness"] + (["zca"] if params.zca_whitening else [])
        out.append(AugmentedRecord(f"{parent.image_id}__{tag}aug{i:05d}", parent, label, tlog))
    return out


# ---------------------------------------------------------------------------
# splitting


def _partition(items: list, n_first: int, rng: np.random.Generator) -> tuple[list, list]:
    order = rng.permutation(len(items))
    shuffled = [items[i] for i in order]
    return shuffled[:n_first], shuffled[n_first:]


def split_families(members: Mapping[str, list], fraction: float,
                   rng: np.random.Generator, leakage_safe: bool) -> tuple[list, list]:
    """Split one class's items (grouped by family key) into train / val.

    Without grouping the train size is exactly ``floor(fraction * n)``.
    With grouping whole families are assigned in random order until the
    train side reaches that size, so the sizes can deviate by at most one
    family.
    """
    keys = sorted(members)
    total = sum(len(members[k]) for k in keys)
    n_train, _ = split_counts(total, fraction)
    if not leakage_safe:
        flat = [m for k in keys for m in members[k]]
        return _partition(flat, n_train, rng)
    train, val = [], []
    for i in rng.permutation(len(keys)):
        fam = members[keys[i]]
        if len(train) < n_train and (len(train) + len(fam) <= n_train or
                                     abs(len(train) + len(fam) - n_train) <= abs(len(train) - n_train)):
            train.extend(fam)
        else:
            val.extend(fam)
    return train, val


# ---------------------------------------------------------------------------
# image IO


def load_image(path, resolution: int | None = None) -> np.ndarray:
    """8-bit grayscale file -> float ``[0, 1]``, bilinear-resized when asked."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if resolution is not None and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            return np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def save_image(path, image: np.ndarray) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    px = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(px).save(path)


# ---------------------------------------------------------------------------
# full run


@dataclass
class CurationResult:
    manifest: Manifest
    manifest_path: str
    counts: dict
    zca_path: str | None


def curate(raw: Sequence[RawRecord], image_dir, out_dir, config: CurationConfig) -> CurationResult:
    """Run the whole protocol and write images, manifest and whitening matrix under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    single = extract_single_class(raw, config)
    counts = Counter(label_of(r) for r in single)
    kept = {c for c, n in counts.items() if n >= config.min_class_count}
    if not kept:
        raise DataError(f"every class is below min_class_count={config.min_class_count}: {dict(counts)}")
    single = [r for r in single if label_of(r) in kept]
    classes = tuple(sorted(kept))
    by_class: dict[str, list[RawRecord]] = defaultdict(list)
    for r in sorted(single, key=lambda r: r.image_id):
        by_class[label_of(r)].append(r)

    # hold out test originals
    rng = stream(config.seed, "curate/test-holdout")
    pools: dict[str, list[RawRecord]] = {}
    test_orig: dict[str, list[RawRecord]] = {}
    test1_orig: dict[str, list[RawRecord]] = {}
    for c in classes:
        recs = by_class[c]
        if c == config.fracture_class:
            need = config.test_fracture + config.test1_per_class + config.fracture_target
            if need > len(recs):
                raise DataError(f"{c}: need {need} records for tests and training, have {len(recs)}")
            order = rng.permutation(len(recs))
            test_orig[c] = [recs[i] for i in order[:config.test_fracture]]
            test1_orig[c] = [recs[i] for i in order[config.test_fracture:config.test_fracture + config.test1_per_class]]
            pools[c] = [recs[i] for i in order[config.test_fracture + config.test1_per_class:]]
        else:
            n_pool, n_test = split_counts(len(recs), config.split_fraction)
            if n_pool == 0 or n_test == 0:
                raise DataError(f"class {c} with {len(recs)} records is too small to hold out a test set")
            held, pool = _partition(recs, n_test, rng)
            test_orig[c], pools[c] = sorted(held, key=lambda r: r.image_id), pool

    # downsample fractures, augment the rest
    pool_records = [r for c in classes for r in pools[c]]
    pool_records = filter_and_downsample(pool_records, replace(config, min_class_count=1))
    shape = (config.resolution, config.resolution)
    children: list[AugmentedRecord] = []
    for c in classes:
        if c != config.fracture_class:
            children += augment_to(pool_records, c, config.target_for(c), config.augmentation,
                                   config.seed, "train", shape)

    rel = lambda p: os.path.relpath(p, out_dir)  # noqa: E731
    src = lambda r: os.path.join(image_dir, r.image_path)  # noqa: E731

    # train / val
    records: list[ManifestRecord] = []
    split_rng = stream(config.seed, "curate/split")
    for c in classes:
        fams: dict[str, list] = defaultdict(list)
        for r in pool_records:
            if label_of(r) == c:
                fams[r.image_id].append(("orig", r))
        for ch in children:
            if ch.label == c:
                fams[ch.parent.image_id].append(("aug", ch))
        train, val = split_families(fams, config.split_fraction, split_rng, config.leakage_safe)
        for split_name, items in (("train", train), ("val", val)):
            for kind, item in items:
                if kind == "orig":
                    records.append(ManifestRecord(item.image_id, c, split_name, rel(src(item))))
                else:
                    records.append(ManifestRecord(item.image_id, c, split_name,
                                                  os.path.join("aug", c, f"{item.image_id}.png"),
                                                  item.parent.image_id, item.transform_log))

    # test sets
    with_test2 = config.test_mode in ("original", "both")
    test_children: list[AugmentedRecord] = []
    for c in classes:
        if with_test2:
            for r in test_orig[c]:
                records.append(ManifestRecord(r.image_id, c, "test2", rel(src(r))))
        if config.test_mode == "original":
            continue
        if c == config.fracture_class:
            for r in test1_orig[c]:
                records.append(ManifestRecord(r.image_id, c, "test1", rel(src(r))))
            continue
        originals = test_orig[c]
        copies = config.test1_per_class // len(originals)
        if copies == 0:
            continue
        for r in originals:
            if with_test2:
                # the unmodified original, listed again under a child id
                records.append(ManifestRecord(f"{r.image_id}__test1", c, "test1", rel(src(r)), r.image_id,
                                              {"order": []}))
            else:
                records.append(ManifestRecord(r.image_id, c, "test1", rel(src(r))))
        kids = augment_to(originals, c, copies * len(originals), config.augmentation, config.seed, "test", shape)
        test_children += kids
        for ch in kids:
            records.append(ManifestRecord(ch.image_id, c, "test1", os.path.join("aug", c, f"{ch.image_id}.png"),
                                          ch.parent.image_id, ch.transform_log))

    # render augmented images
    for ch in children + test_children:
        parent_img = load_image(os.path.join(image_dir, ch.parent.image_path), config.resolution)
        save_image(os.path.join(out_dir, "aug", ch.label, f"{ch.image_id}.png"),
                   apply_transform(parent_img, ch.transform_log, config.augmentation))

    split_order = {s: i for i, s in enumerate(SPLITS)}
    records.sort(key=lambda r: (split_order[r.split], r.label, r.image_id))
    meta = {"config": config.to_dict(), "leakage_safe": config.leakage_safe, "resolution": config.resolution,
            "zca": None}
    manifest = Manifest(records, classes, meta)
    manifest.validate()

    zca_path = None
    if config.augmentation.zca_whitening:
        train_imgs = load_split_images(manifest, "train", out_dir, config.resolution)
        fit = fit_zca(train_imgs, config.augmentation.zca_epsilon)
        zca_path = os.path.join(out_dir, "zca.arrays")
        save_arrays(zca_path, fit.to_arrays(), {"fit_on": "train", "count": len(train_imgs)})
        meta["zca"] = "zca.arrays"
    path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(path, manifest)
    return CurationResult(manifest, path, manifest.counts(), zca_path)


def load_split_images(manifest: Manifest, split: str, base_dir, resolution: int | None = None) -> np.ndarray:
    recs = manifest.split(split)
    res = resolution or manifest.meta.get("resolution")
    if not recs:
        return np.zeros((0, res or 0, res or 0))
    return np.stack([load_image(os.path.join(base_dir, r.path), res) for r in recs])


@dataclass
class LoadedSplit:
    images: np.ndarray
    labels: np.ndarray
    ids: list[str]
    classes: tuple[str, ...]


def load_split(manifest_path, split: str, resolution: int | None = None, whiten: bool = True) -> LoadedSplit:
    """Images (whitened when the manifest carries a fit) and integer labels of one split."""
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    images = load_split_images(manifest, split, base, resolution)
    zca = manifest.meta.get("zca")
    if whiten and zca and len(images):
        arrays, _ = load_arrays(os.path.join(base, zca))
        images = ZcaFit.from_arrays(arrays).apply(images)
    recs = manifest.split(split)
    index = {c: i for i, c in enumerate(manifest.classes)}
    labels = np.array([index[r.label] for r in recs], dtype=np.intp)
    return LoadedSplit(images, labels, [r.image_id for r in recs], manifest.classes)
