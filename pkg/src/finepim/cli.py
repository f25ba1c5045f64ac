"""Command line entry point: ``finepim {curate,train,eval,kfold,ablate,ladder,explain}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import replace

import click

from .errors import ConfigError, FinePimError

log = logging.getLogger("finepim")


def _run_config(config_path, seed, toy=False):
    from .training import load_config, toy_config

    if toy and config_path:
        raise ConfigError("use either --toy or --config, not both")
    if toy:
        cfg = toy_config()
    elif config_path:
        cfg = load_config(config_path)
    else:
        raise ConfigError("a run needs --config PATH (or --toy)")
    return replace(cfg, seed=seed) if seed is not None else cfg


def _write(path, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def _dump(path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True))


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                          help="JSON or YAML run config; keys mirror RunConfig fields.")
seed_opt = click.option("--seed", type=int, default=None, help="Override the config seed.")


def out_opt(default):
    return click.option("--out", type=click.Path(file_okay=False), default=default, show_default=True,
                        help="Output directory.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Fine-grained classification with point selection and graph fusion."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@cli.command()
@click.option("--annotations", required=True, type=click.Path(dir_okay=False))
@click.option("--images", "image_dir", required=True, type=click.Path(file_okay=False))
@out_opt("curated")
@click.option("--set", "set_name", default="A2", show_default=True,
              type=click.Choice(["A1", "A2", "A3", "A4", "custom"], case_sensitive=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--leakage-safe", "leakage_safe", default="true", show_default=True,
              help="Keep augmentation families inside one split (true/false).")
@click.option("--resolution", type=int, default=None, help="Working image size (default 64).")
@config_opt
def curate(annotations, image_dir, out, set_name, seed, leakage_safe, resolution, config_path):
    """Build a balanced, split dataset manifest from an annotation table."""
    import yaml

    from .curation import CurationConfig, curate as run_curate, preset, read_annotations

    overrides = {}
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            overrides = yaml.safe_load(fh) or {}
        if not isinstance(overrides, dict):
            raise ConfigError(f"{config_path}: config must be a mapping")
    overrides.update({"seed": seed, "leakage_safe": _parse_bool(leakage_safe)})
    if resolution is not None:
        overrides["resolution"] = resolution
    if set_name.lower() == "custom":
        if not config_path:
            raise ConfigError("--set custom needs --config with per_class_target and fracture_target")
        cfg = CurationConfig.from_dict(overrides)
    else:
        base = preset(set_name).to_dict()
        base.update(overrides)
        cfg = CurationConfig.from_dict(base)
    result = run_curate(read_annotations(annotations), image_dir, out, cfg)
    _dump(os.path.join(out, "counts.json"), result.counts)
    click.echo(f"manifest: {result.manifest_path}")
    for split, counts in result.counts.items():
        click.echo(f"{split:6s} " + " ".join(f"{c}={n}" for c, n in counts.items()) + f" total={sum(counts.values())}")


@cli.command()
@config_opt
@seed_opt
@out_opt("runs/train")
@click.option("--toy", is_flag=True, help="Use the built-in synthetic toy configuration.")
def train(config_path, seed, out, toy):
    """Train a model; writes train_log.jsonl and the best-validation checkpoint."""
    from .training import train as run_train

    cfg = _run_config(config_path, seed, toy)
    _dump(os.path.join(out, "config.json"), cfg.to_dict())

    def progress(rec):
        log.info("epoch %(epoch)d loss %(train_loss).4f acc %(train_accuracy).3f", rec)

    result = run_train(cfg, out, progress=progress)
    click.echo(f"best epoch {result.best_epoch} val accuracy {result.best_val_accuracy:.4f}")
    click.echo(f"checkpoint: {result.checkpoint}")


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--split", default=None, help="Split to score (default: every test split).")
@config_opt
@seed_opt
@out_opt("runs/eval")
def eval_cmd(checkpoint, split, config_path, seed, out):
    """Score a checkpoint: metrics report plus confusion-matrix CSV per split."""
    from .metrics import format_report
    from .training import evaluate, evaluation_splits, load_data, load_run

    cfg = _run_config(config_path, seed) if config_path else load_run(checkpoint).config
    if cfg is None:
        raise ConfigError("checkpoint has no stored run config; pass --config")
    splits = [split] if split else evaluation_splits(load_data(cfg))
    for name in splits:
        report = evaluate(checkpoint, name, cfg)
        _dump(os.path.join(out, f"metrics_{name}.json"), report.to_dict())
        _write(os.path.join(out, f"confusion_{name}.csv"), report.confusion.to_csv(report.class_names))
        click.echo(f"[{name}]\n{format_report(report)}")


@cli.command()
@config_opt
@seed_opt
@out_opt("runs/kfold")
@click.option("--k", "k", type=int, default=10, show_default=True)
@click.option("--epochs-per-fold", type=int, default=10, show_default=True)
def kfold(config_path, seed, out, k, epochs_per_fold):
    """Stratified K-fold cross-validation over the pooled data."""
    from .experiments import kfold as run_kfold

    report = run_kfold(_run_config(config_path, seed), k, epochs_per_fold)
    _dump(os.path.join(out, "kfold.json"), report.to_dict())
    _write(os.path.join(out, "kfold.csv"), report.format())
    click.echo(report.format())


@cli.command()
@config_opt
@seed_opt
@out_opt("runs/ablate")
@click.option("--axis", required=True, type=click.Choice(["n_sel", "fpn_size"]))
@click.option("--values", required=True,
              help='JSON list, e.g. "[512, 1024, 1536]" or "[[256,128,64,32],[2048,512,128,32]]".')
def ablate(config_path, seed, out, axis, values):
    """Train one variant per value along one axis and tabulate test accuracy."""
    from .experiments import ablate as run_ablate, format_table

    try:
        vals = json.loads(values)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--values is not valid JSON: {exc}") from None
    if not isinstance(vals, list):
        raise ConfigError("--values must be a JSON list")
    rows = run_ablate(_run_config(config_path, seed), axis, vals)
    table = format_table(rows, axis)
    _write(os.path.join(out, "ablation.csv"), table)
    _dump(os.path.join(out, "ablation.json"),
          [{"variant": r.variant, "accuracies": r.accuracies, "error": r.error} for r in rows])
    click.echo(table)


@cli.command()
@config_opt
@seed_opt
@out_opt("runs/ladder")
@click.option("--original-manifest", type=click.Path(dir_okay=False), default=None,
              help="Manifest without augmentation for the first row.")
@click.option("--run/--no-run", "do_run", default=False, show_default=True,
              help="Train the four configurations; otherwise render the reference table only.")
def ladder(config_path, seed, out, original_manifest, do_run):
    """Improvement-ladder report: no augmentation, augmentation, LION, 1024-wide FPN."""
    from .experiments import ladder_configs, ladder_report, run_and_test

    measured = {}
    if do_run:
        cfg = _run_config(config_path, seed)
        for row, row_cfg in ladder_configs(cfg, original_manifest=original_manifest).items():
            measured[row] = run_and_test(row_cfg)
    text = ladder_report(measured)
    _write(os.path.join(out, "ladder.csv"), text)
    click.echo(text)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--image", "images", required=True, multiple=True, type=click.Path(dir_okay=False))
@click.option("--class", "class_name", default=None, help="Class name or index (default: predicted).")
@click.option("--layer", type=int, default=None, help="Block index (default: last).")
@click.option("--source", type=click.Choice(["backbone", "fpn"]), default="backbone", show_default=True)
@click.option("--alpha", type=float, default=0.4, show_default=True)
@click.option("--selection-dump", default=None, help="Selection dump to reference in the sidecars.")
@seed_opt
@out_opt("runs/explain")
def explain(checkpoint, images, class_name, layer, source, alpha, selection_dump, seed, out):
    """Grad-CAM overlays: one PNG and one JSON sidecar per image."""
    from .experiments import explain_paths
    from .training import load_run

    class_index = None
    if class_name is not None:
        classes = list(load_run(checkpoint).classes)
        if class_name in classes:
            class_index = classes.index(class_name)
        elif class_name.isdigit():
            class_index = int(class_name)
        else:
            raise ConfigError(f"unknown class {class_name!r}; classes are {classes}")
    for png, sidecar in explain_paths(checkpoint, images, out, class_index=class_index, layer=layer,
                                      source=source, alpha=alpha, selection_dump=selection_dump):
        click.echo(f"{png}\n{sidecar}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="finepim", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except FinePimError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
