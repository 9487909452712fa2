"""Command-line entry points: train, eval, ablate, embed-cache.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
abort. SEMCL_OUTPUT_DIR and SEMCL_SEED override the config's output
directory and seed list.
"""
from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import ExperimentConfig
from .errors import SemclError


def _fail(exc: SemclError) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(exc.exit_code)


@click.group()
def main() -> None:
    """Continual learning with per-task prompts, adapters, and vote-based routing."""


def _load_config(path: str, output_dir: str | None, seed: int | None) -> ExperimentConfig:
    config = ExperimentConfig.load(path)
    if output_dir:
        config.values["output_dir"] = output_dir
    if seed is not None:
        config.values["seeds"] = [seed]
    return config


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--output-dir", envvar="SEMCL_OUTPUT_DIR", default=None,
              help="Override the config's output directory.")
@click.option("--seed", envvar="SEMCL_SEED", type=int, default=None,
              help="Run a single seed instead of the config's seed list.")
def train(config_path: str, output_dir: str | None, seed: int | None) -> None:
    """Run the full incremental protocol for every configured seed."""
    from .runner import run_experiment

    try:
        config = _load_config(config_path, output_dir, seed)
        result = run_experiment(config)
    except SemclError as exc:
        _fail(exc)
        return
    for name, stats in result["aggregate"].items():
        click.echo(f"{name}: {stats['mean']:.4f} +- {stats['std']:.4f}")
    click.echo(f"runs written under {config.values['output_dir']}")


@main.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--oracle-routing", is_flag=True,
              help="Route queries by ground-truth task id instead of the vote.")
@click.option("--render", is_flag=True, help="Also render the selection heatmap image.")
def eval_cmd(run_dir: str, oracle_routing: bool, render: bool) -> None:
    """Recompute metrics for a run directory from its checkpoints."""
    from .runner import evaluate_run

    try:
        summary = evaluate_run(run_dir, oracle_routing=oracle_routing, render=render)
    except SemclError as exc:
        _fail(exc)
        return
    for name, value in summary.items():
        if isinstance(value, float):
            click.echo(f"{name}: {value:.4f}")
        else:
            click.echo(f"{name}: {value}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--axis", required=True, type=click.Choice(["adapter", "s-prompt", "iqkm"]),
              help="Component to switch off in the paired variant.")
@click.option("--output-dir", envvar="SEMCL_OUTPUT_DIR", default=None)
@click.option("--seed", envvar="SEMCL_SEED", type=int, default=None)
def ablate(config_path: str, axis: str, output_dir: str | None, seed: int | None) -> None:
    """Run paired experiments differing only in one component."""
    from .runner import run_ablation

    try:
        config = _load_config(config_path, output_dir, seed)
        comparison = run_ablation(config, axis)
    except SemclError as exc:
        _fail(exc)
        return
    click.echo(f"axis: {axis}")
    for variant in ("full", "without"):
        parts = [
            f"{name}={stats['mean']:.4f}" for name, stats in comparison[variant].items()
        ]
        click.echo(f"{variant}: " + "  ".join(parts))


@main.group("embed-cache")
def embed_cache() -> None:
    """Manage precomputed template-embedding caches."""


@embed_cache.command("build")
@click.option("--classes", "classes_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Text file with one class name per line.")
@click.option("--encoder", "encoder_name", default="fixture", show_default=True)
@click.option("--dim", default=32, show_default=True, help="Width for fixture encoders.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--classes-per-task", type=int, default=None,
              help="Also cache task templates for this split size.")
@click.option("--order-seed", type=int, default=None)
def embed_cache_build(
    classes_path: str,
    encoder_name: str,
    dim: int,
    out_dir: str,
    classes_per_task: int | None,
    order_seed: int | None,
) -> None:
    """Encode all class (and optionally task) templates into a cache."""
    from .runner import build_embedding_cache

    names = [line.strip() for line in Path(classes_path).read_text().splitlines() if line.strip()]
    try:
        cache = build_embedding_cache(
            names, encoder_name, dim, out_dir,
            classes_per_task=classes_per_task, order_seed=order_seed,
        )
    except SemclError as exc:
        _fail(exc)
        return
    click.echo(f"cached {len(cache.entries)} templates under {out_dir}")


if __name__ == "__main__":
    main()
