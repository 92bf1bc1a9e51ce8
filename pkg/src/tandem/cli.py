"""Command-line interface: ``tandem prepare|train|report|compare|dump-attention``.

Exit codes: 0 success, 2 invalid input (missing file, bad manifest, bad
rate or selector), 3 no results, 4 cell mismatch in a comparison, 5 one or
more cells failed during training, 6 prepared data missing.
"""
from __future__ import annotations

import csv
import logging
import sys
from pathlib import Path

import click

from . import experiment as ex
from .model import BACKBONES, VARIANTS
from .stats import CellMismatchError

EXIT_INPUT = 2
EXIT_NO_RESULTS = 3
EXIT_MISMATCH = 4
EXIT_CELL_FAILED = 5
EXIT_NOT_PREPARED = 6


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(manifest: str) -> ex.RunManifest:
    try:
        return ex.RunManifest.load(manifest)
    except ex.ManifestError as exc:
        _fail(str(exc), EXIT_INPUT)


def _selectors(f):
    f = click.option("--dataset", "datasets", multiple=True, help="Dataset name (repeatable).")(f)
    f = click.option("--rate", "rates", multiple=True, type=float, help="Missing rate (repeatable).")(f)
    f = click.option("--seed", "seeds", multiple=True, type=int, help="Seed (repeatable).")(f)
    f = click.option("--backbone", "backbones", multiple=True, type=click.Choice(BACKBONES),
                     help="Backbone (repeatable).")(f)
    f = click.option("--variant", "variants", multiple=True, type=click.Choice(VARIANTS),
                     help="Model variant (repeatable).")(f)
    return f


def _cells(run: ex.RunManifest, datasets, rates, seeds, backbones, variants) -> list[tuple]:
    names = run.dataset_names()
    for d in datasets:
        if d not in names:
            _fail(f"dataset {d!r} is not in the run manifest ({sorted(names)})", EXIT_INPUT)
    for r in rates:
        if r not in [float(x) for x in run.missing_rates]:
            _fail(f"rate {r} is not in the run manifest", EXIT_INPUT)
    for s in seeds:
        if s not in run.seeds:
            _fail(f"seed {s} is not in the run manifest", EXIT_INPUT)
    # backbones and variants may go beyond the manifest lists (e.g. an ablation)
    if backbones or variants:
        run = ex.RunManifest(**{**run.__dict__, "backbones": list(backbones or run.backbones),
                                "variants": list(variants or run.variants)})
    return list(ex.select_cells(run, datasets, rates, seeds)), run


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose):
    """Train and evaluate gated-fusion neural DE classifiers on time series with missing values."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("manifest", type=click.Path())
def prepare(manifest):
    """Write split indices and missingness masks for every (rate, seed)."""
    run = _load(manifest)
    try:
        written = ex.prepare(run)
    except (OSError, ValueError) as exc:
        _fail(str(exc), EXIT_INPUT)
    click.echo(f"prepared {len(written)} files under {run.out / 'prepared'}")


@main.command()
@click.argument("manifest", type=click.Path())
@_selectors
def train(manifest, datasets, rates, seeds, backbones, variants):
    """Train selected cells; results are appended to <output_dir>/results.jsonl.

    Cells already present in the ledger are skipped. Set TANDEM_WORKERS to
    train cells in parallel processes.
    """
    run = _load(manifest)
    cells, run = _cells(run, datasets, rates, seeds, backbones, variants)
    try:
        results = ex.train_cells(run, cells)
    except FileNotFoundError as exc:
        _fail(str(exc), EXIT_NOT_PREPARED)
    failed = [r["cell"] for r in results if r["status"] != "ok"]
    click.echo(f"trained {len(results)} cell(s), skipped {len(cells) - len(results)}")
    for r in results:
        if r["status"] == "ok":
            click.echo(f"  {r['cell']}: accuracy {r['test_accuracy']:.4f}")
    if failed:
        _fail(f"{len(failed)} cell(s) failed: {', '.join(failed)}", EXIT_CELL_FAILED)


@main.command()
@click.argument("results", type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory (default: <results dir>/report).")
@click.option("--attention-samples", type=int, default=0,
              help="Also dump T x T attention weights for this many test samples per cell.")
@click.option("--manifest", type=click.Path(), default=None,
              help="Run manifest, needed for attention dumps.")
def report(results, out_dir, attention_samples, manifest):
    """Summary tables (mean, sd per cell) and the per-stream gate report."""
    if not Path(results).exists():
        _fail(f"results file {results} does not exist", EXIT_INPUT)
    try:
        paths = ex.report(results, out_dir)
    except LookupError as exc:
        _fail(str(exc), EXIT_NO_RESULTS)
    for kind, p in paths.items():
        click.echo(f"{kind}: {p}")
    if attention_samples > 0:
        if manifest is None:
            _fail("--attention-samples needs --manifest", EXIT_INPUT)
        run = _load(manifest)
        written = ex.dump_attention(run, ex.read_ledger(results),
                                    paths["summary"].parent / "attention", attention_samples)
        click.echo(f"attention: {len(written)} files")


@main.command()
@click.argument("results", type=click.Path())
@click.option("--pair", "pairs", nargs=2, multiple=True, required=True,
              metavar="A B", help="Methods as backbone/variant, e.g. cde/tandem ode/tandem.")
@click.option("--out", type=click.Path(), default=None, help="CSV path (default: stdout).")
def compare(results, pairs, out):
    """One-sided Wilcoxon (A > B) with Holm adjustment and Win/Tie/Loss counts."""
    if not Path(results).exists():
        _fail(f"results file {results} does not exist", EXIT_INPUT)
    try:
        rows = [c.row() for c in ex.compare(results, list(pairs))]
    except LookupError as exc:
        _fail(str(exc), EXIT_NO_RESULTS)
    except CellMismatchError as exc:
        lines = [f"cell mismatch; missing from B: {list(exc.only_a)}, missing from A: {list(exc.only_b)}"]
        _fail("\n".join(lines), EXIT_MISMATCH)
    fields = ["method_a", "method_b", "cells", "wins", "ties", "losses", "p_raw",
              "p_adjusted", "significant"]
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if out:
            fh.close()


@main.command("dump-attention")
@click.argument("manifest", type=click.Path())
@_selectors
@click.option("--samples", type=int, default=1, show_default=True)
@click.option("--split", "split_name", type=click.Choice(["train", "val", "test"]), default="test",
              show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory (default: <output_dir>/attention).")
def dump_attention(manifest, datasets, rates, seeds, backbones, variants, samples, split_name,
                   out_dir):
    """Write per-head T x T attention weights of trained cells as CSV files."""
    run = _load(manifest)
    cells, run = _cells(run, datasets, rates, seeds, backbones, variants)
    wanted = {ex.cell_id(*c) for c in cells}
    results = [r for r in ex.read_ledger(run.out / "results.jsonl") if r["cell"] in wanted]
    if not any(r.get("status") == "ok" for r in results):
        _fail("no trained cells match the selection", EXIT_NO_RESULTS)
    out = Path(out_dir) if out_dir else run.out / "attention"
    written = ex.dump_attention(run, results, out, samples, split_name)
    click.echo(f"wrote {len(written)} files under {out}")


if __name__ == "__main__":
    main()
