"""Experiment orchestration behind the CLI: prepare, train, report, compare.

Output directory layout::

    <out>/prepared/<dataset>/split_seed<S>.json
    <out>/prepared/<dataset>/mask_rate<R>_seed<S>.csv
    <out>/search/<dataset>__<backbone>__<variant>.json
    <out>/checkpoints/<cell>.json
    <out>/results.jsonl        one ExperimentResult per line (append-only)
    <out>/timings.jsonl        wall-clock per cell (kept out of the ledger)
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from itertools import product
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import (DataError, Dataset, SplitSpec, inject_missingness, load_dataset,
                   normalize, read_mask_file, read_manifest, rescale_length, split_indices,
                   write_dataset)
from .gating import STREAMS, gate_report, stochastic_gate_mean
from .model import (BACKBONES, VARIANTS, TandemConfig, encode, load_checkpoint,
                    save_checkpoint, stream_attention_scores)
from .stats import CellMismatchError, compare_methods
from .train import (SearchSpace, TrainConfig, TrainingError, evaluate, search_hyperparameters,
                    train)

log = logging.getLogger(__name__)

WORKERS_ENV = "TANDEM_WORKERS"


class ManifestError(ValueError):
    pass


@dataclass
class RunManifest:
    name: str
    datasets: list[str]
    missing_rates: list[float]
    seeds: list[int]
    backbones: list[str]
    variants: list[str]
    output_dir: str
    search_budget: int = 0
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    length: int | None = None
    missing_per: str = "channel"
    base_dir: str = "."

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"run manifest {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from None
        known = {f for f in cls.__dataclass_fields__ if f != "base_dir"}
        unknown = set(raw) - known
        if unknown:
            raise ManifestError(f"{path}: unknown fields {sorted(unknown)}")
        try:
            run = cls(**raw, base_dir=str(path.parent.resolve()))
        except TypeError as exc:
            raise ManifestError(f"{path}: {exc}") from None
        run.validate()
        return run

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def validate(self) -> None:
        for ds in self.datasets:
            mpath = self.resolve(ds)
            if not mpath.exists():
                raise ManifestError(f"dataset manifest {mpath} does not exist")
            try:
                m = read_manifest(mpath)
            except (DataError, json.JSONDecodeError) as exc:
                raise ManifestError(str(exc)) from None
            if not (Path(m["_dir"]) / m["csv"]).exists():
                raise ManifestError(f"data file {Path(m['_dir']) / m['csv']} does not exist")
        for r in self.missing_rates:
            if not 0.0 <= float(r) < 1.0:
                raise ManifestError(f"invalid missing rate {r}; must lie in [0, 1)")
        for b in self.backbones:
            if b not in BACKBONES:
                raise ManifestError(f"unknown backbone {b!r}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ManifestError(f"unknown variant {v!r}")
        if not self.seeds:
            raise ManifestError("at least one seed is required")
        if self.search_budget < 0:
            raise ManifestError("search_budget must be >= 0")
        bad = set(self.model) - set(TandemConfig.__dataclass_fields__) \
            - {"backbone", "variant", "d", "C", "seed"}
        if bad:
            raise ManifestError(f"unknown model fields {sorted(bad)}")
        if set(self.train) - set(TrainConfig.__dataclass_fields__):
            raise ManifestError(f"unknown train fields {sorted(set(self.train) - set(TrainConfig.__dataclass_fields__))}")

    def dataset_names(self) -> dict[str, Path]:
        return {read_manifest(self.resolve(ds))["name"]: self.resolve(ds) for ds in self.datasets}


def ensure_dir(path: Path) -> None:
    """Create ``path`` atomically (all-or-nothing) if it does not exist yet."""
    if path.exists():
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        os.rename(tmp, path)
    except OSError:
        tmp.rmdir()
        if not path.is_dir():
            raise


def rate_tag(rate: float) -> str:
    return f"{float(rate):.2f}"


def cell_id(dataset: str, backbone: str, variant: str, rate: float, seed: int) -> str:
    return f"{dataset}|{backbone}|{variant}|{rate_tag(rate)}|{seed}"


def cell_slug(cid: str) -> str:
    return cid.replace("|", "__")


# -- prepare ----------------------------------------------------------------

def prepare(run: RunManifest) -> list[Path]:
    """Write split indices and per-(rate, seed) mask files. Idempotent."""
    ensure_dir(run.out)
    written = []
    for name, mpath in run.dataset_names().items():
        ds = load_dataset(mpath)
        base = run.out / "prepared" / name
        base.mkdir(parents=True, exist_ok=True)
        for seed in run.seeds:
            idx = split_indices(ds, SplitSpec(seed=seed))
            p = base / f"split_seed{seed}.json"
            _write_if_changed(p, json.dumps(dict(zip(("train", "val", "test"), idx))) + "\n")
            written.append(p)
            for rate in run.missing_rates:
                masked = inject_missingness(ds, float(rate), seed, per=run.missing_per)
                p = base / f"mask_rate{rate_tag(rate)}_seed{seed}.csv"
                tmp = p.with_suffix(".csv.tmp")
                write_dataset(masked, tmp, "wide", mask_only=True)
                _replace_if_changed(tmp, p)
                written.append(p)
    return written


def _write_if_changed(path: Path, text: str) -> None:
    if path.exists() and path.read_text() == text:
        return
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _replace_if_changed(tmp: Path, path: Path) -> None:
    if path.exists() and path.read_bytes() == tmp.read_bytes():
        tmp.unlink()
    else:
        tmp.replace(path)


@lru_cache(maxsize=8)
def _load_cached(path: str) -> Dataset:
    return load_dataset(path)


def prepared_splits(run: RunManifest, dataset: str, rate: float, seed: int):
    """Masked, (optionally) rescaled, split and normalised data for one cell."""
    mpath = run.dataset_names()[dataset]
    base = run.out / "prepared" / dataset
    mask_file = base / f"mask_rate{rate_tag(rate)}_seed{seed}.csv"
    split_file = base / f"split_seed{seed}.json"
    if not mask_file.exists() or not split_file.exists():
        raise FileNotFoundError(f"prepared data missing for {dataset} rate={rate} seed={seed}; "
                                "run 'tandem prepare' first")
    ds = read_mask_file(mask_file, _load_cached(str(mpath)))
    if run.length:
        ds = ds.with_samples([rescale_length(s, int(run.length)) for s in ds.samples])
    idx = json.loads(split_file.read_text())
    tr, va, te, _ = normalize(ds.subset(idx["train"]), ds.subset(idx["val"]), ds.subset(idx["test"]))
    return ds, tr, va, te


# -- train ------------------------------------------------------------------

def _configs(run: RunManifest, ds: Dataset, backbone: str, variant: str, seed: int):
    mc = TandemConfig(**{**run.model, "backbone": backbone, "variant": variant,
                         "d": ds.d, "C": ds.C, "seed": seed})
    tc = TrainConfig(**{**run.train, "seed": seed})
    return mc, tc


def tuned_configs(run: RunManifest, dataset: str, backbone: str, variant: str):
    """Search once per (dataset, backbone, variant) at 0% missing; cached on disk."""
    path = run.out / "search" / f"{dataset}__{backbone}__{variant}.json"
    if path.exists():
        return json.loads(path.read_text())
    seed = run.seeds[0]
    ds, tr, va, _ = prepared_splits(run, dataset, 0.0, seed)
    mc, tc = _configs(run, ds, backbone, variant, seed)
    tr_in, va_in = encode(tr.samples, mc.with_time_channel), encode(va.samples, mc.with_time_channel)

    def objective(m, t):
        return train(m, t, (tr_in, va_in)).best_val_loss

    res = search_hyperparameters(SearchSpace(), run.search_budget, seed, mc, tc, objective)
    tuned = {"lr": res.train_config.lr, "batch_size": res.train_config.batch_size,
             "n_l": res.model_config.n_l, "n_h": res.model_config.n_h,
             "val_loss": res.val_loss, "trials": res.trials}
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_if_changed(path, json.dumps(tuned, indent=1) + "\n")
    return tuned


def run_cell(run: RunManifest, dataset: str, backbone: str, variant: str, rate: float,
             seed: int) -> tuple[dict, dict]:
    """Train and evaluate one cell; returns ``(ledger_line, timing_line)``."""
    cid = cell_id(dataset, backbone, variant, rate, seed)
    base = {"cell": cid, "dataset": dataset, "backbone": backbone, "variant": variant,
            "missing_rate": float(rate), "seed": int(seed)}
    try:
        ds, tr, va, te = prepared_splits(run, dataset, rate, seed)
        mc, tc = _configs(run, ds, backbone, variant, seed)
        if run.search_budget > 0:
            tuned = tuned_configs(run, dataset, backbone, variant)
            mc = replace(mc, n_l=tuned["n_l"], n_h=tuned["n_h"])
            tc = replace(tc, lr=tuned["lr"], batch_size=tuned["batch_size"])
        res = train(mc, tc, (tr, va))
        test_in = encode(te.samples, mc.with_time_channel)
        metrics = evaluate(res.model, test_in)
    except TrainingError as exc:
        return {**base, "status": "failed", "error": str(exc)}, {"cell": cid, "wall_time": None}
    gates = stoch = None
    if res.model.gates is not None:
        gates = dict(zip(STREAMS, map(float, res.model.gates.values())))
        stoch = dict(zip(STREAMS, map(float, stochastic_gate_mean(res.model.gates, seed=seed))))
    ckpt = run.out / "checkpoints" / f"{cell_slug(cid)}.json"
    save_checkpoint(res.model, ckpt, {"cell": cid, "train_config": tc.to_dict(),
                                      "best_epoch": res.best_epoch})
    line = {**base, "status": "ok", "test_accuracy": metrics["accuracy"],
            "test_auroc": metrics.get("auroc"), "test_loss": metrics["loss"],
            "val_loss": res.best_val_loss, "gates": gates, "gates_stochastic": stoch,
            "epochs_run": res.epochs_run, "best_epoch": res.best_epoch,
            "model_config": mc.to_dict(), "train_config": tc.to_dict(),
            "checkpoint": str(ckpt.relative_to(run.out))}
    return line, {"cell": cid, "wall_time": res.wall_time}


def _run_cell_args(args):
    return run_cell(*args)


def read_ledger(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            out.append(json.loads(line))
    return out


def select_cells(run: RunManifest, datasets=(), rates=(), seeds=(), backbones=(), variants=()):
    names = list(run.dataset_names())
    pick = lambda chosen, full: [x for x in full if not chosen or x in chosen]
    rates = [float(r) for r in rates]
    for d, b, v, r, s in product(pick(datasets, names), pick(backbones, run.backbones),
                                 pick(variants, run.variants),
                                 pick(rates, [float(x) for x in run.missing_rates]),
                                 pick([int(x) for x in seeds], [int(x) for x in run.seeds])):
        yield d, b, v, r, s


def train_cells(run: RunManifest, cells: Iterable[tuple], workers: int | None = None) -> list[dict]:
    """Train the selected cells, appending to the ledger; completed cells are skipped."""
    ensure_dir(run.out)
    ledger = run.out / "results.jsonl"
    done = {r["cell"] for r in read_ledger(ledger)}
    todo = [c for c in cells if cell_id(*c) not in done]
    for d, _, _, r, s in todo:
        base = run.out / "prepared" / d
        if not (base / f"mask_rate{rate_tag(r)}_seed{s}.csv").exists():
            raise FileNotFoundError(f"prepared data missing for {d} rate={r} seed={s}; "
                                    "run 'tandem prepare' first")
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    # searches are shared between cells; run them before fanning out
    if run.search_budget > 0:
        for key in sorted({(d, b, v) for d, b, v, _, _ in todo}):
            tuned_configs(run, *key)
    results = []
    args = [(run, *c) for c in todo]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            stream = pool.map(_run_cell_args, args)
            results = _append(ledger, run.out / "timings.jsonl", stream)
    else:
        results = _append(ledger, run.out / "timings.jsonl", map(_run_cell_args, args))
    return results


def _append(ledger: Path, timings: Path, stream) -> list[dict]:
    out = []
    for line, timing in stream:
        with open(ledger, "a") as fh:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
        with open(timings, "a") as fh:
            fh.write(json.dumps(timing, sort_keys=True) + "\n")
        log.info("%s: %s", line["cell"], line.get("test_accuracy", line["status"]))
        out.append(line)
    return out


# -- report -----------------------------------------------------------------

def _mean_sd(vals: list[float]) -> tuple[float, float]:
    a = np.asarray(vals, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def summary_rows(results: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in results:
        if r.get("status") != "ok":
            continue
        groups.setdefault((r["dataset"], r["backbone"], r["variant"], r["missing_rate"]), []).append(r)
    rows = []
    for (d, b, v, rate), runs in sorted(groups.items()):
        acc_m, acc_sd = _mean_sd([r["test_accuracy"] for r in runs])
        au = [r["test_auroc"] for r in runs if r.get("test_auroc") is not None]
        au_m, au_sd = _mean_sd(au) if au else (float("nan"), float("nan"))
        rows.append({"dataset": d, "backbone": b, "variant": v, "missing_rate": rate,
                     "runs": len(runs), "accuracy_mean": acc_m, "accuracy_sd": acc_sd,
                     "auroc_mean": au_m, "auroc_sd": au_sd})
    return rows


def table_rows(summary: list[dict]) -> list[dict]:
    """Wide layout: one row per method, ``mean (sd)`` per missing rate."""
    rates = sorted({r["missing_rate"] for r in summary})
    methods: dict[tuple, dict] = {}
    for r in summary:
        key = (r["dataset"], r["backbone"], r["variant"])
        row = methods.setdefault(key, {"dataset": key[0], "method": f"{key[1]}/{key[2]}"})
        row[f"rate_{rate_tag(r['missing_rate'])}"] = f"{r['accuracy_mean']:.3f} ({r['accuracy_sd']:.3f})"
    out = []
    for row in methods.values():
        for rate in rates:
            row.setdefault(f"rate_{rate_tag(rate)}", "")
        out.append(row)
    return out


def write_csv(path: Path, rows: list[dict], fields: list[str] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def report(results_path, out_dir=None) -> dict[str, Path]:
    results = read_ledger(results_path)
    if not results:
        raise LookupError(f"no results in {results_path}")
    out_dir = Path(out_dir) if out_dir else Path(results_path).parent / "report"
    summary = summary_rows(results)
    paths = {"summary": out_dir / "summary.csv", "table": out_dir / "table.csv",
             "gates": out_dir / "gates.csv"}
    write_csv(paths["summary"], summary, ["dataset", "backbone", "variant", "missing_rate", "runs",
                                          "accuracy_mean", "accuracy_sd", "auroc_mean", "auroc_sd"])
    write_csv(paths["table"], table_rows(summary))
    gates = gate_report(r for r in results if r.get("status") == "ok")
    write_csv(paths["gates"], gates, ["backbone", "variant", "missing_rate", "stream", "mean",
                                      "sd", "stochastic_mean", "runs"])
    return paths


def dump_attention(run: RunManifest, results: list[dict], out_dir: Path,
                   samples: int = 1, split_name: str = "test") -> list[Path]:
    """Write per-head ``T x T`` attention weights for the first test samples of each cell."""
    written = []
    for r in results:
        if r.get("status") != "ok" or r["variant"] == "no_attention":
            continue
        model, _ = load_checkpoint(run.out / r["checkpoint"])
        _, tr, va, te = prepared_splits(run, r["dataset"], r["missing_rate"], r["seed"])
        part = {"train": tr, "val": va, "test": te}[split_name]
        inputs = encode(part.samples[:samples], model.config.with_time_channel)
        scores = stream_attention_scores(model, inputs)
        for stream, heads in scores.items():
            for h, w in enumerate(heads):
                for i in range(w.shape[0]):
                    p = out_dir / cell_slug(r["cell"]) / f"{split_name}{i}_{stream}_head{h}.csv"
                    p.parent.mkdir(parents=True, exist_ok=True)
                    np.savetxt(p, w[i], delimiter=",", fmt="%.17g")
                    written.append(p)
    return written


# -- compare ----------------------------------------------------------------

def method_scores(results: list[dict]) -> dict[str, dict[tuple, float]]:
    """``method -> (dataset, rate) -> seed-averaged test accuracy``."""
    acc: dict[str, dict[tuple, list[float]]] = {}
    for r in results:
        if r.get("status") != "ok":
            continue
        m = f"{r['backbone']}/{r['variant']}"
        acc.setdefault(m, {}).setdefault((r["dataset"], rate_tag(r["missing_rate"])), []).append(
            r["test_accuracy"])
    return {m: {c: float(np.mean(v)) for c, v in cells.items()} for m, cells in acc.items()}


def compare(results_path, pairs: list[tuple[str, str]]):
    results = read_ledger(results_path)
    if not results:
        raise LookupError(f"no results in {results_path}")
    scores = method_scores(results)
    for a, b in pairs:
        for m in (a, b):
            if m not in scores:
                raise CellMismatchError([], [f"{m}: no results"])
        if set(scores[a]) != set(scores[b]):
            raise CellMismatchError(set(scores[a]) - set(scores[b]), set(scores[b]) - set(scores[a]))
    return compare_methods(pairs, scores)
