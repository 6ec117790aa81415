"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 I/O (missing or unreadable files),
4 validation (config schema, inconsistent inputs), 5 gradient check failure.
"""
import functools
import json
import logging
import os
from importlib import resources
from pathlib import Path

import click
import jsonschema

from xflow import analysis, evaluation
from xflow.data import gen_synthetic, group_kfold, load_dataset, save_dataset
from xflow.errors import ContractError, FormatError, ValidationError
from xflow.models import (ARCHITECTURES, ModelConfig, build_model, describe, load_params, model_grad_check,
                          save_params, tiny_config)
from xflow.optim import TrainConfig, train, write_history

EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_GRADCHECK = 2, 3, 4, 5
GRADCHECK_TOL = 1e-4
LOG_FILE = "xflow.log"

log = logging.getLogger("xflow")
_log_handler = None


class Failure(click.ClickException):
    def __init__(self, message, exit_code):
        super().__init__(message)
        self.exit_code = exit_code


def handle_errors(fn):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit):
            raise
        except (OSError, FormatError) as exc:
            raise Failure(str(exc), EXIT_IO) from exc
        except (ValidationError, ContractError, jsonschema.ValidationError) as exc:
            raise Failure(getattr(exc, "message", None) or str(exc), EXIT_VALIDATION) from exc

    return wrapper


def env_seed():
    raw = os.environ.get("XFLOW_SEED")
    if raw is None:
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise ValidationError(f"XFLOW_SEED must be a non-negative integer, got {raw!r}") from None
    if seed < 0:
        raise ValidationError(f"XFLOW_SEED must be a non-negative integer, got {raw!r}")
    return seed


def run_config_schema():
    return json.loads(resources.files("xflow").joinpath("run_config.schema.json").read_text(encoding="utf-8"))


def load_run_config(path):
    """Read, schema-validate and resolve a run config; paths become absolute."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    jsonschema.validate(raw, run_config_schema())
    cfg = {k: v["default"] for k, v in run_config_schema()["properties"].items() if "default" in v}
    cfg.update(raw)
    cfg.setdefault("seed", env_seed())
    for key in ("dataset", "out"):
        cfg[key] = str((path.parent / cfg[key]).resolve())
    return cfg


def model_config_for(cfg, dataset):
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    first = dataset[0]
    return ModelConfig(architecture=cfg["architecture"], num_classes=dataset.num_classes,
                       height=first.frames.shape[1], width=first.frames.shape[2], mfcc_dim=first.mfcc.shape[1],
                       t_avg=cfg["t_avg"], use_xconns=cfg["use_xconns"], use_resconns=cfg["use_resconns"],
                       seed=cfg["seed"], width_mult=cfg["width_mult"], lstm_output=cfg["lstm_output"],
                       deconv_kernels=cfg["deconv_kernels"])


def train_config_for(cfg):
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"], lr=cfg["lr"])


def prepare_out(out):
    """Create the output directory and route timestamped logging into it."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    global _log_handler
    if _log_handler is not None:
        log.removeHandler(_log_handler)
        _log_handler.close()
    _log_handler = logging.FileHandler(out / LOG_FILE, encoding="utf-8")
    _log_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(_log_handler)
    log.setLevel(logging.INFO)
    return out


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main():
    """Cross-modal two-stream audiovisual classifiers."""


# ---------------------------------------------------------------- data

@main.command("gen-data")
@click.option("--classes", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--persons", type=click.IntRange(min=1), default=15, show_default=True)
@click.option("--per-class", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--t-min", type=click.IntRange(min=1), default=12, show_default=True)
@click.option("--t-max", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--height", type=click.IntRange(min=4), default=16, show_default=True)
@click.option("--width", type=click.IntRange(min=4), default=16, show_default=True)
@click.option("--mfcc-dim", type=click.IntRange(min=1), default=26, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=None, help="default: $XFLOW_SEED or 0")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handle_errors
def gen_data(classes, persons, per_class, t_min, t_max, height, width, mfcc_dim, seed, out):
    """Write a synthetic aligned audiovisual dataset."""
    if t_min > t_max:
        raise click.UsageError(f"--t-min ({t_min}) exceeds --t-max ({t_max})")
    seed = env_seed() if seed is None else seed
    ds = gen_synthetic(classes, persons, per_class, t_min, t_max, height, width, seed, mfcc_dim)
    save_dataset(ds, out)
    click.echo(f"wrote {len(ds)} examples ({classes} classes, {persons} persons, {height}x{width}, "
               f"mfcc {mfcc_dim}, seed {seed}) to {out}")


# ---------------------------------------------------------------- experiments

@main.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@handle_errors
def train_cmd(config_path):
    """Train one model; writes history.csv and model.xfp (+ model.xfp.json)."""
    cfg = load_run_config(config_path)
    dataset = load_dataset(cfg["dataset"])
    model_cfg, train_cfg = model_config_for(cfg, dataset), train_config_for(cfg)
    out = prepare_out(cfg["out"])
    train_set, val_set = dataset, None
    if cfg["validate"]:
        train_idx, val_idx = group_kfold(dataset, cfg["k"])[0]
        train_set, val_set = dataset.subset(train_idx), dataset.subset(val_idx)
    model = build_model(model_cfg)
    log.info("training %s on %d examples", model_cfg.architecture, len(train_set))
    history = train(model, train_set, train_cfg, val_set,
                    on_epoch=lambda row: log.info("epoch %d loss %.5f acc %.4f", row["epoch"], row["train_loss"],
                                                  row["train_acc"]))
    write_history(history, out / "history.csv")
    save_params(model, out / "model.xfp")
    evaluation.write_json(cfg, out / "run_config.json")
    last = history[-1]
    val = "" if last["val_acc"] is None else f" val_acc {last['val_acc']:.4f}"
    click.echo(f"epoch {last['epoch']} train_loss {last['train_loss']:.5f} train_acc {last['train_acc']:.4f}{val}")
    click.echo(f"wrote {out / 'history.csv'} and {out / 'model.xfp'}")


@main.command("crossval")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="parallel training jobs")
@handle_errors
def crossval_cmd(config_path, jobs):
    """Person-grouped k-fold cross-validation with repeats-take-max."""
    cfg = load_run_config(config_path)
    dataset = load_dataset(cfg["dataset"])
    model_cfg, train_cfg = model_config_for(cfg, dataset), train_config_for(cfg)
    out = prepare_out(cfg["out"])
    rep = evaluation.crossval(model_cfg, dataset, cfg["k"], cfg["repeats"], cfg["seed"], train_cfg,
                              jobs or cfg["jobs"])
    evaluation.write_report_csv(rep, out / "crossval.csv")
    evaluation.write_json(rep.summary(), out / "crossval.json")
    click.echo(f"fold maxima {' '.join(f'{a:.4f}' for a in rep.fold_max)}  mean {rep.mean:.4f}")


@main.command("ablate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="parallel training jobs")
@handle_errors
def ablate_cmd(config_path, jobs):
    """Cross-validate all four connection settings on identical folds and seeds."""
    cfg = load_run_config(config_path)
    dataset = load_dataset(cfg["dataset"])
    model_cfg, train_cfg = model_config_for(cfg, dataset), train_config_for(cfg)
    out = prepare_out(cfg["out"])
    res = evaluation.ablate(dataset, model_cfg, cfg["k"], cfg["repeats"], cfg["seed"], train_cfg,
                            jobs or cfg["jobs"])
    res.write(out / "ablation.csv", out / "ablation.json")
    click.echo(res.table())


# ---------------------------------------------------------------- inspection

@main.command("analyze")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False), required=True)
@click.option("--what", type=click.Choice(["diffs", "features", "maps"]), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--connection", default=None, help="connection name, e.g. xconn_21_2")
@click.option("--example", "example_idx", type=click.IntRange(min=0), default=None,
              help="single example index (default: all for diffs, 0 for maps)")
@handle_errors
def analyze(model_path, dataset_dir, what, out, connection, example_idx):
    """Difference series, connection feature dumps or feature-map images."""
    model = load_params(model_path)
    dataset = load_dataset(dataset_dir)
    if example_idx is not None and example_idx >= len(dataset):
        raise ValidationError(f"--example {example_idx} out of range for {len(dataset)} examples")
    out = prepare_out(out)
    if what == "diffs":
        indices = range(len(dataset)) if example_idx is None else [example_idx]
        for i in indices:
            analysis.diff_series(model, dataset[i]).write_csv(out / f"diffs_ex{i:05d}.csv")
        click.echo(f"wrote {len(indices)} difference series to {out}")
    elif what == "features":
        names = analysis.connection_names(model)
        if connection is None:
            if not names:
                raise ValidationError("model has no connections")
            connection = "xconn_21_2" if "xconn_21_2" in names else names[0]
        feats = analysis.export_connection_features(model, dataset, connection, out / f"features_{connection}.csv")
        click.echo(f"wrote {feats.shape[0]} x {feats.shape[1]} features of {connection} to {out}")
    else:
        i = example_idx or 0
        fmap = analysis.connection_map(model, dataset[i], connection)
        paths = analysis.export_feature_map(fmap, out / f"map_ex{i:05d}")
        click.echo(f"wrote {len(paths)} PGM images to {out}")


@main.command("gradcheck")
@click.option("--arch", type=click.Choice(ARCHITECTURES), default=None, help="default: both architectures")
@click.option("--max-coords", type=click.IntRange(min=1), default=None,
              help="coordinates sampled per parameter (default: all)")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="default: $XFLOW_SEED or 0")
@click.option("--tolerance", type=float, default=GRADCHECK_TOL, show_default=True)
@handle_errors
def gradcheck(arch, max_coords, seed, tolerance):
    """Finite-difference check of complete models at tiny dimensions."""
    seed = env_seed() if seed is None else seed
    worst_all = 0.0
    for a in [arch] if arch else list(ARCHITECTURES):
        errors = model_grad_check(tiny_config(a, seed=seed), seed=seed, max_coords=max_coords)
        name, worst = max(errors.items(), key=lambda kv: kv[1])
        worst_all = max(worst_all, worst)
        click.echo(f"{a}: {len(errors)} parameters, worst relative error {worst:.3e} ({name})")
    click.echo(f"worst relative error {worst_all:.3e}")
    if not worst_all < tolerance:
        raise Failure(f"gradient check failed: {worst_all:.3e} >= {tolerance:g}", EXIT_GRADCHECK)


@main.command("info")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@handle_errors
def info(model_path):
    """Architecture summary and parameter count of a saved model."""
    model = load_params(model_path)
    click.echo(describe(model))


if __name__ == "__main__":
    main()
