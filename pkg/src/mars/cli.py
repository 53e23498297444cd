"""``mars`` command line: synth, align, augment, train, eval and pipeline.

Stages talk to each other only through files under ``--out``. A command
exits 0 only after every file it declares has been written and read back.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from . import alignment, ctr, dataio, pipeline, retrieval
from .config import PipelineConfig, load_config

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}

log = logging.getLogger("mars")


class ValidationError(RuntimeError):
    """A command finished but one of its outputs is missing or unreadable."""


def _setup_logging() -> None:
    name = os.environ.get("MARS_LOG_LEVEL", "info").lower()
    if name not in LOG_LEVELS:
        raise click.UsageError(f"MARS_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


# ---------------------------------------------------------------- output checks

def _check_synth(out: Path, cfg: PipelineConfig) -> None:
    inter = dataio.load_interactions(out / pipeline.INTERACTIONS)
    items = dataio.load_items(out / pipeline.ITEMS)
    if len(items) != cfg.synthetic.n_items or len({x.user_id for x in inter}) != cfg.synthetic.n_users:
        raise ValidationError("synthetic files do not match the configured counts")


def _check_align(out: Path, cfg: PipelineConfig) -> None:
    d = out / pipeline.ALIGN_DIR
    store = alignment.EmbeddingStore.load(d)
    if store.item_emb.shape[1] != cfg.alignment.hidden_dim:
        raise ValidationError("exported embedding width differs from hidden_dim")
    rows = (d / "align_log.jsonl").read_text().splitlines()
    if len(rows) != cfg.alignment.epochs:
        raise ValidationError(f"training log has {len(rows)} rows for {cfg.alignment.epochs} epochs")


def _check_augment(out: Path, cfg: PipelineConfig) -> None:
    augmented = retrieval.read_augmented(out / pipeline.AUGMENTED)
    if cfg.augment.strategy not in ("filter", "kth_similar"):
        return
    store = alignment.EmbeddingStore.load(out / pipeline.ALIGN_DIR)
    users, items = store.user_lookup(), store.item_lookup()
    for uid, hist in augmented.items():
        donated = hist.donated
        if not donated:
            continue
        scores = retrieval.item_user_similarities(donated, users[uid], items)
        if min(scores) < cfg.augment.theta:
            raise ValidationError(f"donated item below theta for user {uid}")


def _check_train(out: Path, name: str) -> None:
    d = out / pipeline.RUNS_DIR / name
    ctr.read_predictions(d / "predictions.jsonl")
    json.loads((d / "run.json").read_text())


def _check_eval(out: Path) -> None:
    json.loads((out / "report.json").read_text())
    if not (out / "report.txt").read_text().strip():
        raise ValidationError("empty report table")


# ---------------------------------------------------------------- commands

def _options(fn):
    for opt in reversed([
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="JSON config file (flags override it)."),
        click.option("--seed", type=int, help="Global seed for every stage."),
        click.option("--strategy", type=click.Choice(retrieval.STRATEGIES), help="Augmentation strategy."),
        click.option("--theta", type=float, help="Item-user similarity threshold."),
        click.option("--k", type=int, help="Donor count for kth_similar."),
        click.option("--out", type=click.Path(file_okay=False), default="mars-out", show_default=True,
                     help="Working directory shared by all stages."),
        click.option("--force", is_flag=True, help="Overwrite existing outputs."),
    ]):
        fn = opt(fn)
    return fn


def _load(config_path, seed, strategy, theta, k) -> PipelineConfig:
    try:
        return load_config(config_path, seed=seed, strategy=strategy, theta=theta, k=k)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


def _run(step, *args) -> None:
    try:
        step(*args)
    except (pipeline.OutputExistsError, FileNotFoundError) as exc:
        raise click.ClickException(str(exc)) from exc
    except (ValidationError, ValueError, KeyError, LookupError, ArithmeticError) as exc:
        log.debug("command failed", exc_info=True)
        raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc


@click.group()
def main() -> None:
    """Multimodal-aligned retrieval augmentation for CTR prediction."""
    _setup_logging()


@main.command()
@_options
def synth(config_path, seed, strategy, theta, k, out, force):
    """Generate a planted-topic synthetic dataset."""
    cfg, out = _load(config_path, seed, strategy, theta, k), Path(out)

    def step():
        summary = pipeline.run_synth(cfg, out, force)
        _check_synth(out, cfg)
        click.echo(json.dumps(summary, sort_keys=True))
    _run(step)


@main.command()
@_options
def align(config_path, seed, strategy, theta, k, out, force):
    """Train the alignment network and export item/user embeddings."""
    cfg, out = _load(config_path, seed, strategy, theta, k), Path(out)

    def step():
        summary = pipeline.run_align(cfg, out, force)
        _check_align(out, cfg)
        click.echo(json.dumps(summary, sort_keys=True))
    _run(step)


@main.command()
@_options
def augment(config_path, seed, strategy, theta, k, out, force):
    """Augment low-active users with retrieved donor sequences."""
    cfg, out = _load(config_path, seed, strategy, theta, k), Path(out)

    def step():
        summary = pipeline.run_augment(cfg, out, force)
        _check_augment(out, cfg)
        click.echo(json.dumps(summary, sort_keys=True))
    _run(step)


@main.command()
@_options
@click.option("--no-augment", is_flag=True, help="Train on original histories only.")
@click.option("--name", help="Run name under runs/ (default: base or mars).")
def train(config_path, seed, strategy, theta, k, out, force, no_augment, name):
    """Train the DIN model and score the held-out interactions."""
    cfg, out = _load(config_path, seed, strategy, theta, k), Path(out)

    def step():
        summary = pipeline.run_train(cfg, out, augment=not no_augment, force=force, name=name)
        _check_train(out, summary["run"])
        click.echo(json.dumps(summary, sort_keys=True))
    _run(step)


@main.command(name="eval")
@_options
@click.option("--base", default=pipeline.BASE_RUN, show_default=True, help="Run used as the RelaImpr base.")
def evaluate(config_path, seed, strategy, theta, k, out, force, base):
    """Compare every run under runs/ against the base run."""
    cfg, out = _load(config_path, seed, strategy, theta, k), Path(out)

    def step():
        report = pipeline.run_eval(cfg, out, base=base, force=force)
        _check_eval(out)
        click.echo(report.table(), nl=False)
    _run(step)


@main.command(name="pipeline")
@_options
def run_all(config_path, seed, strategy, theta, k, out, force):
    """synth, align, augment, train (base and augmented) and eval in one go."""
    cfg, out = _load(config_path, seed, strategy, theta, k), Path(out)

    def step():
        report = pipeline.run_pipeline(cfg, out, force)
        _check_synth(out, cfg)
        _check_align(out, cfg)
        _check_augment(out, cfg)
        _check_train(out, pipeline.BASE_RUN)
        _check_train(out, pipeline.AUG_RUN)
        _check_eval(out)
        click.echo(report.table(), nl=False)
    _run(step)


if __name__ == "__main__":
    main()
