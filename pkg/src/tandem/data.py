"""Time-series samples, CSV ingestion and the preprocessing pipeline.

Ingestion is manifest + CSV. A manifest is a JSON object::

    {"csv": "gunpoint.csv", "layout": "wide", "d": 1, "C": 2,
     "label_column": "label", "time_column": "time", "name": "GunPoint"}

Wide layout has one row per (sample, channel)::

    sample_id,channel_id,label,v_1,...,v_T

Trailing empty cells shorten a series; interior empty cells (or ``nan``)
mark missing observations. Long layout has one row per observation::

    sample_id,time,channel_id,value,label

Labels are integers in ``1..C`` unless the manifest lists ``classes``, in
which case the i-th entry maps to class ``i + 1``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING_RATES = (0.0, 0.3, 0.5, 0.7)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeriesSample:
    values: np.ndarray  # (T, d) ground truth
    mask: np.ndarray    # (T, d) 1 = observed
    times: np.ndarray   # (T,) in [0, 1], strictly increasing
    label: int          # 1..C

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.mask, dtype=np.float64)
        t = np.asarray(self.times, dtype=np.float64)
        if v.ndim != 2 or m.shape != v.shape or t.shape != (v.shape[0],):
            raise DataError(f"inconsistent shapes: values {v.shape}, mask {m.shape}, times {t.shape}")
        if np.any(np.diff(t) <= 0):
            raise DataError("timestamps must be strictly increasing")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "times", t)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def x_tilde(self) -> np.ndarray:
        """Zero-filled observations ``mask * values``."""
        return np.where(self.mask > 0, self.values, 0.0)


@dataclass
class Dataset:
    samples: list[TimeSeriesSample]
    C: int
    d: int
    name: str = "dataset"
    provenance: str = ""

    def __post_init__(self):
        for i, s in enumerate(self.samples):
            if s.channels != self.d:
                raise DataError(f"sample {i} has {s.channels} channels, expected {self.d}")

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=int)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return replace(self, samples=[self.samples[i] for i in indices])

    def with_samples(self, samples: list[TimeSeriesSample]) -> "Dataset":
        return replace(self, samples=list(samples))


def normalize_times(raw: Sequence[float]) -> np.ndarray:
    t = np.asarray(raw, dtype=np.float64)
    if t.size == 1:
        return np.zeros(1)
    span = t[-1] - t[0]
    if span <= 0:
        raise DataError("timestamps must be strictly increasing")
    return (t - t[0]) / span


# -- ingestion --------------------------------------------------------------

def _parse_float(cell: str, row: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"row {row}: cannot parse {cell!r} as a number") from None


def _label_map(manifest: dict) -> dict[str, int]:
    classes = manifest.get("classes")
    if classes is not None:
        if len(classes) != manifest["C"]:
            raise DataError("manifest 'classes' length must equal C")
        return {str(c): i + 1 for i, c in enumerate(classes)}
    return {str(i): i for i in range(1, manifest["C"] + 1)}


def _label(cell: str, mapping: dict[str, int], row: int) -> int:
    key = cell.strip()
    if key not in mapping:
        try:
            as_float = float(key)
            if as_float.is_integer() and str(int(as_float)) in mapping:
                return mapping[str(int(as_float))]
        except ValueError:
            pass
        raise DataError(f"row {row}: unknown label {cell!r}")
    return mapping[key]


def read_manifest(path) -> dict:
    path = Path(path)
    with open(path) as fh:
        manifest = json.load(fh)
    for key in ("csv", "layout", "d", "C"):
        if key not in manifest:
            raise DataError(f"manifest {path}: missing field {key!r}")
    if manifest["layout"] not in ("wide", "long"):
        raise DataError(f"manifest {path}: layout must be 'wide' or 'long'")
    manifest.setdefault("label_column", "label")
    manifest.setdefault("time_column", "time")
    manifest.setdefault("name", path.stem)
    manifest["_dir"] = str(path.parent)
    return manifest


def load_dataset(manifest_path) -> Dataset:
    """Parse the CSV named by a manifest into a :class:`Dataset`."""
    manifest = read_manifest(manifest_path)
    csv_path = Path(manifest["_dir"]) / manifest["csv"]
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) <= 1:
        raise DataError("no samples")
    loader = _load_wide if manifest["layout"] == "wide" else _load_long
    samples = loader(rows, manifest)
    if not samples:
        raise DataError("no samples")
    return Dataset(samples, C=int(manifest["C"]), d=int(manifest["d"]),
                   name=manifest["name"], provenance=manifest.get("provenance", str(csv_path)))


def _load_wide(rows: list[list[str]], manifest: dict) -> list[TimeSeriesSample]:
    header = rows[0]
    try:
        lab_col = header.index(manifest["label_column"])
    except ValueError:
        raise DataError(f"row 1: label column {manifest['label_column']!r} not in header") from None
    d = int(manifest["d"])
    mapping = _label_map(manifest)
    first_value = max(2, lab_col) + 1
    grouped: dict[str, dict] = {}
    order: list[str] = []
    for rnum, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        sid, cid = row[0].strip(), row[1].strip()
        try:
            channel = int(cid)
        except ValueError:
            raise DataError(f"row {rnum}: channel id {cid!r} is not an integer") from None
        if not 0 <= channel < d:
            raise DataError(f"row {rnum}: channel {channel} outside 0..{d - 1}")
        cells = row[first_value:]
        while cells and not cells[-1].strip():
            cells.pop()
        vals = [math.nan if c.strip() in ("", "nan", "NaN") else _parse_float(c, rnum)
                for c in cells]
        entry = grouped.setdefault(sid, {"channels": {}, "label": None, "row": rnum})
        if sid not in order:
            order.append(sid)
        label = _label(row[lab_col], mapping, rnum)
        if entry["label"] is not None and entry["label"] != label:
            raise DataError(f"row {rnum}: sample {sid} has conflicting labels")
        entry["label"] = label
        if channel in entry["channels"]:
            raise DataError(f"row {rnum}: duplicate channel {channel} for sample {sid}")
        entry["channels"][channel] = vals
    samples = []
    for sid in order:
        entry = grouped[sid]
        if len(entry["channels"]) != d:
            raise DataError(f"row {entry['row']}: sample {sid} has {len(entry['channels'])} "
                            f"channels, expected {d}")
        T = max(len(v) for v in entry["channels"].values())
        if T == 0:
            raise DataError(f"row {entry['row']}: sample {sid} is empty")
        values = np.full((T, d), math.nan)
        for c, v in entry["channels"].items():
            values[: len(v), c] = v
        mask = np.isfinite(values).astype(float)
        samples.append(TimeSeriesSample(np.nan_to_num(values, nan=0.0), mask,
                                        normalize_times(np.arange(T)), entry["label"]))
    return samples


def _load_long(rows: list[list[str]], manifest: dict) -> list[TimeSeriesSample]:
    header = [h.strip() for h in rows[0]]
    need = {"sample_id": "sample_id", "time": manifest["time_column"],
            "channel_id": "channel_id", "value": "value", "label": manifest["label_column"]}
    cols = {}
    for key, name in need.items():
        if name not in header:
            raise DataError(f"row 1: column {name!r} not in header")
        cols[key] = header.index(name)
    d = int(manifest["d"])
    mapping = _label_map(manifest)
    per_sample: dict[str, dict] = {}
    order: list[str] = []
    for rnum, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise DataError(f"row {rnum}: expected {len(header)} fields, got {len(row)}")
        sid = row[cols["sample_id"]].strip()
        t = _parse_float(row[cols["time"]], rnum)
        try:
            channel = int(row[cols["channel_id"]])
        except ValueError:
            raise DataError(f"row {rnum}: channel id is not an integer") from None
        if not 0 <= channel < d:
            raise DataError(f"row {rnum}: channel {channel} outside 0..{d - 1}")
        cell = row[cols["value"]].strip()
        value = math.nan if cell in ("", "nan", "NaN") else _parse_float(cell, rnum)
        label = _label(row[cols["label"]], mapping, rnum)
        entry = per_sample.setdefault(sid, {"obs": {}, "label": label, "row": rnum})
        if sid not in order:
            order.append(sid)
        if entry["label"] != label:
            raise DataError(f"row {rnum}: sample {sid} has conflicting labels")
        entry["obs"][(t, channel)] = value
    samples = []
    for sid in order:
        entry = per_sample[sid]
        times = sorted({t for t, _ in entry["obs"]})
        index = {t: i for i, t in enumerate(times)}
        values = np.full((len(times), d), math.nan)
        for (t, c), v in entry["obs"].items():
            values[index[t], c] = v
        mask = np.isfinite(values).astype(float)
        samples.append(TimeSeriesSample(np.nan_to_num(values, nan=0.0), mask,
                                        normalize_times(times), entry["label"]))
    return samples


def write_dataset(dataset: Dataset, csv_path, layout: str = "wide", mask_only: bool = False) -> None:
    """Emit a dataset (or just its masks) in the given CSV layout.

    Masked entries are written as empty cells unless ``mask_only`` is set,
    in which case 0/1 entries are written in place of the values.
    """
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if layout == "wide":
            T = max(s.length for s in dataset.samples)
            w.writerow(["sample_id", "channel_id", "label"] + [f"v_{i + 1}" for i in range(T)])
            for i, s in enumerate(dataset.samples):
                for c in range(dataset.d):
                    if mask_only:
                        cells = [str(int(m)) for m in s.mask[:, c]]
                    else:
                        cells = [repr(float(v)) if m > 0 else ""
                                 for v, m in zip(s.values[:, c], s.mask[:, c])]
                    w.writerow([i, c, s.label] + cells)
        elif layout == "long":
            w.writerow(["sample_id", "time", "channel_id", "mask" if mask_only else "value", "label"])
            for i, s in enumerate(dataset.samples):
                for k in range(s.length):
                    for c in range(dataset.d):
                        if mask_only:
                            cell = str(int(s.mask[k, c]))
                        else:
                            cell = repr(float(s.values[k, c])) if s.mask[k, c] > 0 else ""
                        w.writerow([i, repr(float(s.times[k])), c, cell, s.label])
        else:
            raise DataError(f"unknown layout {layout!r}")


def read_mask_file(csv_path, dataset: Dataset) -> Dataset:
    """Apply a wide-layout mask file (as written by ``write_dataset(mask_only=True)``)."""
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    masks = [s.mask.copy() for s in dataset.samples]
    for rnum, row in enumerate(rows, start=2):
        i, c = int(row[0]), int(row[1])
        cells = [float(x) for x in row[3: 3 + dataset.samples[i].length]]
        masks[i][:, c] = cells
    return dataset.with_samples([replace(s, mask=m) for s, m in zip(dataset.samples, masks)])


# -- missingness ------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def inject_missingness(dataset: Dataset, rate: float, seed: int, per: str = "channel") -> Dataset:
    """Mask exactly ``round(rate * T)`` time points per channel (or per time step).

    The chosen indices depend only on ``(seed, sample index, channel)``, so
    any subset of the pipeline reproduces the same masks.
    """
    if not 0.0 <= rate < 1.0:
        raise DataError(f"missing rate must lie in [0, 1), got {rate}")
    if per not in ("channel", "timestep"):
        raise DataError(f"per must be 'channel' or 'timestep', got {per!r}")
    out = []
    for i, s in enumerate(dataset.samples):
        if not np.all(s.mask == 1):
            raise DataError(f"sample {i}: missingness can only be injected into fully observed data")
        T = s.length
        k = _round_half_up(rate * T)
        if T - k < 1:
            raise DataError(f"sample {i}: rate {rate} leaves no observation (T={T})")
        mask = np.ones_like(s.mask)
        if k:
            if per == "channel":
                for c in range(s.channels):
                    rng = np.random.default_rng([seed, i, c])
                    mask[rng.choice(T, size=k, replace=False), c] = 0.0
            else:
                rng = np.random.default_rng([seed, i])
                mask[rng.choice(T, size=k, replace=False), :] = 0.0
        out.append(replace(s, mask=mask))
    return dataset.with_samples(out)


# -- splitting --------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise DataError("split fractions must sum to 1")


def _allocate(total: int, sizes: list[int], avoid: list[int]) -> list[int]:
    """Largest-remainder apportionment of ``total`` over groups of ``sizes``."""
    N = sum(sizes)
    quotas = [total * n / N for n in sizes]
    base = [int(math.floor(q)) for q in quotas]
    left = total - sum(base)
    order = sorted(range(len(sizes)), key=lambda c: (-(quotas[c] - base[c]), avoid[c], c))
    for c in order[:left]:
        base[c] += 1
    return base


def split_indices(dataset: Dataset, spec: SplitSpec) -> tuple[list[int], list[int], list[int]]:
    N = len(dataset)
    if N < 10:
        raise DataError(f"need at least 10 samples to split, got {N}")
    n_val = _round_half_up(spec.val * N)
    n_test = _round_half_up(spec.test * N)
    rng = np.random.default_rng(spec.seed)
    if not spec.stratified:
        perm = rng.permutation(N)
        val, test = perm[:n_val], perm[n_val:n_val + n_test]
        train = perm[n_val + n_test:]
        return sorted(train.tolist()), sorted(val.tolist()), sorted(test.tolist())
    labels = dataset.labels
    classes = sorted(set(labels.tolist()))
    members = [np.flatnonzero(labels == c) for c in classes]
    sizes = [len(m) for m in members]
    for c, n in zip(classes, sizes):
        if n < 3:
            raise DataError(f"class {c} has {n} samples; stratified split needs at least 3")
    val_alloc = _allocate(n_val, sizes, [0] * len(sizes))
    extra = [v - int(math.floor(n_val * n / N)) for v, n in zip(val_alloc, sizes)]
    test_alloc = _allocate(n_test, sizes, extra)
    train, val, test = [], [], []
    for m, nv, nt in zip(members, val_alloc, test_alloc):
        perm = m[rng.permutation(len(m))]
        val.extend(perm[:nv].tolist())
        test.extend(perm[nv:nv + nt].tolist())
        train.extend(perm[nv + nt:].tolist())
    return sorted(train), sorted(val), sorted(test)


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    tr, va, te = split_indices(dataset, spec)
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


# -- length rescaling and normalisation ------------------------------------

def rescale_length(sample: TimeSeriesSample, L: int) -> TimeSeriesSample:
    """Resample onto a uniform grid of ``L`` points in [0, 1].

    Values are linearly interpolated from each channel's observed points;
    the mask is carried over from the nearest original index.
    """
    if L < 2:
        raise DataError("target length must be >= 2")
    if L == sample.length:
        return sample
    new_t = np.linspace(0.0, 1.0, L)
    old_t = normalize_times(sample.times) if sample.length > 1 else np.zeros(1)
    values = np.zeros((L, sample.channels))
    for c in range(sample.channels):
        obs = sample.mask[:, c] > 0
        if obs.any():
            values[:, c] = np.interp(new_t, old_t[obs], sample.values[obs, c])
    pos = np.searchsorted(old_t, new_t)
    lo = np.clip(pos - 1, 0, sample.length - 1)
    hi = np.clip(pos, 0, sample.length - 1)
    nearest = np.where(np.abs(new_t - old_t[lo]) <= np.abs(old_t[hi] - new_t), lo, hi)
    mask = sample.mask[nearest]
    return TimeSeriesSample(values, mask, new_t, sample.label)


@dataclass
class Normalizer:
    mean: np.ndarray
    sd: np.ndarray
    floor: float = 1e-8

    def apply(self, sample: TimeSeriesSample) -> TimeSeriesSample:
        v = (sample.values - self.mean) / self.sd
        return replace(sample, values=np.where(sample.mask > 0, v, 0.0))


def fit_normalizer(train: Dataset, floor: float = 1e-8) -> Normalizer:
    """Per-channel mean / population sd over observed training entries."""
    mean = np.zeros(train.d)
    sd = np.ones(train.d)
    for c in range(train.d):
        obs = np.concatenate([s.values[s.mask[:, c] > 0, c] for s in train.samples])
        if obs.size:
            # a constant channel gets its exact value as mean, so it maps to 0
            mean[c] = obs[0] if np.all(obs == obs[0]) else obs.mean()
            sd[c] = max(obs.std(), floor)
    return Normalizer(mean, sd, floor)


def normalize(train: Dataset, val: Dataset, test: Dataset):
    """z-score observed entries with training statistics.

    Returns ``(train, val, test, (mean, sd))``.
    """
    norm = fit_normalizer(train)
    out = tuple(ds.with_samples([norm.apply(s) for s in ds.samples]) for ds in (train, val, test))
    return (*out, (norm.mean, norm.sd))


# -- synthetic data ---------------------------------------------------------

def make_separable(n: int = 100, T: int = 20, d: int = 2, seed: int = 0,
                   offset: float = 1.0, noise: float = 0.3) -> Dataset:
    """Two balanced classes whose channel means differ by ``2 * offset``."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, T)
    samples = []
    for i in range(n):
        label = 1 + (i % 2)
        sign = 1.0 if label == 1 else -1.0
        phase = rng.uniform(0, 2 * np.pi, size=d)
        base = 0.5 * np.sin(2 * np.pi * t[:, None] + phase[None, :])
        values = base + sign * offset + noise * rng.standard_normal((T, d))
        samples.append(TimeSeriesSample(values, np.ones((T, d)), t.copy(), label))
    return Dataset(samples, C=2, d=d, name="separable", provenance=f"make_separable(seed={seed})")
