"""Adam, the training loop, metrics and random hyperparameter search."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .model import BatchInputs, ModelError, TandemConfig, TandemModel, encode, forward, loss

log = logging.getLogger(__name__)

BATCH_CHOICES = (16, 32, 64, 128)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    classifier_lr_multiplier: float = 1.0
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, lr_multipliers: dict[str, float] | None = None):
    """One bias-corrected Adam update.

    Returns ``(new_params, state)``; ``state`` is updated in place. Moments
    start at zero for any parameter not yet in the state.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step_lr = lr * (lr_multipliers.get(name, 1.0) if lr_multipliers else 1.0)
        new[name] = p - step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state


# -- metrics ----------------------------------------------------------------

def accuracy(predictions, labels) -> float:
    """Fraction of correct predictions.

    ``predictions`` is either class scores ``(N, C)`` (argmax, ties to the
    lowest index) or predicted class indices ``(N,)``. Labels are zero-based.
    """
    pred = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set")
    if pred.ndim == 2:
        pred = np.argmax(pred, axis=1)
    return float(np.mean(pred == labels))


def auroc(scores, labels) -> float:
    """P(score of a positive > score of a negative), ties counting 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- training ---------------------------------------------------------------

def _as_inputs(data, with_time: bool) -> BatchInputs:
    if isinstance(data, BatchInputs):
        return data
    return encode(data.samples if hasattr(data, "samples") else data, with_time)


def evaluate(model: TandemModel, inputs: BatchInputs, batch_size: int = 256) -> dict:
    """Eval-mode loss, accuracy and (binary only) AUROC."""
    probs = []
    for start in range(0, len(inputs), batch_size):
        part = inputs.take(np.arange(start, min(start + batch_size, len(inputs))))
        probs.append(forward(model, part, "eval").data)
    p = np.concatenate(probs)
    picked = np.clip(p[np.arange(len(p)), inputs.labels], 1e-12, None)
    out = {"loss": float(-np.log(picked).mean()), "accuracy": accuracy(p, inputs.labels)}
    if p.shape[1] == 2 and len(set(inputs.labels.tolist())) == 2:
        out["auroc"] = auroc(p[:, 1], inputs.labels)
    return out


@dataclass
class TrainResult:
    model: TandemModel
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    wall_time: float


def train(model_config: TandemConfig, train_config: TrainConfig, splits,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimise cross-entropy with Adam; keep the best-validation-loss snapshot.

    ``splits`` is ``(train, val)`` or ``(train, val, test)``; each element is
    a dataset, a list of samples, or pre-encoded :class:`BatchInputs`.
    Early stopping triggers after ``patience`` epochs without improvement.
    """
    t0 = time.perf_counter()
    with_time = model_config.with_time_channel
    tr = _as_inputs(splits[0], with_time)
    va = _as_inputs(splits[1], with_time)
    model = TandemModel(model_config)
    params = model.named_parameters()
    names = list(params)
    tensors = [params[n] for n in names]
    mult = {n: train_config.classifier_lr_multiplier for n in model.classifier_parameter_names()}
    state = AdamState()
    shuffle_rng = np.random.default_rng([train_config.seed, 1])
    noise_rng = np.random.default_rng([train_config.seed, 2])
    best = (math.inf, -1, model.state_dict())
    history = []
    stale = 0
    for epoch in range(train_config.max_epochs):
        order = shuffle_rng.permutation(len(tr))
        total, count = 0.0, 0
        for start in range(0, len(tr), train_config.batch_size):
            batch = tr.take(order[start:start + train_config.batch_size])
            try:
                with ad.Tape() as tape:
                    L = loss(model, batch, "train", noise_rng)
                grads = ad.grad(L, tensors, tape)
            except ModelError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            if not math.isfinite(L.item()):
                raise TrainingError(f"epoch {epoch}: loss diverged ({L.item()})")
            try:
                new, state = adam_step({n: t.data for n, t in zip(names, tensors)},
                                       dict(zip(names, grads)), state, train_config.lr, mult)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            for n, t in zip(names, tensors):
                t.data = new[n]
            total += L.item() * len(batch)
            count += len(batch)
        try:
            val = evaluate(model, va)
        except ModelError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}") from exc
        row = {"epoch": epoch, "train_loss": total / count, "val_loss": val["loss"],
               "val_accuracy": val["accuracy"]}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        if val["loss"] < best[0]:
            best = (val["loss"], epoch, model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= train_config.patience:
                break
    model.load_state_dict(best[2])
    return TrainResult(model, history, best[1], best[0], len(history),
                       time.perf_counter() - t0)


# -- hyperparameter search --------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    lr_range: tuple[float, float] = (1e-4, 1e-1)
    layer_counts: tuple[int, ...] = (1, 2, 3, 4)
    hidden_widths: tuple[int, ...] = (16, 32, 64, 128)
    batch_sizes: tuple[int, ...] = BATCH_CHOICES

    def sample(self, rng: np.random.Generator) -> dict:
        lo, hi = np.log10(self.lr_range[0]), np.log10(self.lr_range[1])
        return {
            "lr": float(10.0 ** rng.uniform(lo, hi)),
            "n_l": int(rng.choice(self.layer_counts)),
            "n_h": int(rng.choice(self.hidden_widths)),
            "batch_size": int(rng.choice(self.batch_sizes)),
        }


@dataclass
class SearchResult:
    train_config: TrainConfig
    model_config: TandemConfig
    val_loss: float
    trials: list[dict]


def search_hyperparameters(space: SearchSpace, budget: int, seed: int,
                           base_model: TandemConfig, base_train: TrainConfig,
                           objective: Callable[[TandemConfig, TrainConfig], float]) -> SearchResult:
    """Random search: log-uniform lr, uniform draws over the discrete grids.

    ``objective`` returns a validation loss; the minimum wins, ties going to
    the lowest learning rate.
    """
    if budget < 1:
        raise ValueError("search budget must be >= 1")
    rng = np.random.default_rng([seed, 31337])
    trials = []
    for i in range(budget):
        draw = space.sample(rng)
        mc = replace(base_model, n_l=draw["n_l"], n_h=draw["n_h"])
        tc = replace(base_train, lr=draw["lr"], batch_size=draw["batch_size"])
        try:
            value = float(objective(mc, tc))
        except TrainingError as exc:
            log.warning("trial %d failed: %s", i, exc)
            value = math.inf
        trials.append({**draw, "val_loss": value})
        log.info("trial %d: %s -> %.5f", i, draw, value)
    best = min(range(budget), key=lambda i: (trials[i]["val_loss"], trials[i]["lr"]))
    b = trials[best]
    return SearchResult(replace(base_train, lr=b["lr"], batch_size=b["batch_size"]),
                        replace(base_model, n_l=b["n_l"], n_h=b["n_h"]),
                        b["val_loss"], trials)
