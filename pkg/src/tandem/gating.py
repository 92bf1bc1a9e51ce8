"""Gumbel-Sigmoid stream gates and gated concatenation."""
from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module

STREAMS = ("raw", "path", "latent")
MODES = ("train_stochastic", "eval_deterministic")

_TINY = np.nextafter(0.0, 1.0)


class GateBank(Module):
    """One trainable logit per stream (raw x~, path X, latent z)."""

    def __init__(self, temperature: float = 1.0, init_logit: float = 0.0):
        super().__init__()
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.temperature = float(temperature)
        self.logits = [self.param(f"logit_{s}", np.float64(init_logit)) for s in STREAMS]

    def values(self) -> np.ndarray:
        """Deterministic gate values ``sigmoid(logit / tau)``."""
        return expit(np.array([float(l.data) for l in self.logits]) / self.temperature)


def gumbel(rng: np.random.Generator, size=None):
    u = np.maximum(rng.random(size), _TINY)
    return -np.log(-np.log(u))


def sample_gates(bank: GateBank, rng: np.random.Generator | None = None,
                 mode: str = "train_stochastic", size=None) -> tuple[Tensor, Tensor, Tensor]:
    """Gate values for the three streams, differentiable in the logits.

    ``train_stochastic``: ``sigmoid((logit + G) / tau)`` with independent
    Gumbel noise ``G = -log(-log U)``. ``eval_deterministic``: no noise.
    ``size`` draws that many independent gates per stream (Monte-Carlo use);
    the default is one scalar gate per stream.
    """
    if bank.temperature <= 0:
        raise ValueError(f"temperature must be positive, got {bank.temperature}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    inv_tau = 1.0 / bank.temperature
    gates = []
    for logit in bank.logits:
        x = logit
        if mode == "train_stochastic":
            if rng is None:
                raise ValueError("stochastic gates need an rng")
            noise = gumbel(rng) if size is None else gumbel(rng, size)
            x = ad.add(logit, float(noise) if size is None else ad.constant(noise))
        gates.append(ad.sigmoid(ad.scale(x, inv_tau)))
    return tuple(gates)


def harden(sigma) -> np.ndarray:
    """Indicator ``sigma > 0.5`` (ties go to 0). Not differentiable."""
    s = sigma.data if isinstance(sigma, Tensor) else np.asarray(sigma, dtype=np.float64)
    return (s > 0.5).astype(np.float64)


def fuse(phis: Sequence, gates: Sequence | None = None) -> Tensor:
    """Concatenate ``gate_k * phi_k`` along the last axis.

    ``gates=None`` (or a ``None`` entry) leaves that stream unscaled.
    """
    phis = [p if isinstance(p, Tensor) else ad.constant(p) for p in phis]
    for p in phis[1:]:
        if p.shape != phis[0].shape:
            raise ad.ShapeError(f"fuse: stream shapes differ {phis[0].shape} vs {p.shape}")
    if gates is not None and len(gates) != len(phis):
        raise ValueError(f"fuse: {len(phis)} streams but {len(gates)} gates")
    parts = []
    for i, p in enumerate(phis):
        g = None if gates is None else gates[i]
        if g is None:
            parts.append(p)
            continue
        g = g if isinstance(g, Tensor) else np.float64(g)
        if np.ndim(g.data if isinstance(g, Tensor) else g) != 0:
            raise ad.ShapeError("fuse: gates must be scalars")
        parts.append(ad.mul(g, p))
    return parts[0] if len(parts) == 1 else ad.concat_last_dim(*parts)


def stochastic_gate_mean(bank: GateBank, draws: int = 1000, seed: int = 0) -> np.ndarray:
    """Monte-Carlo mean of the stochastic gates (reporting only)."""
    rng = np.random.default_rng(seed)
    logits = np.array([float(l.data) for l in bank.logits])
    g = gumbel(rng, (draws, len(logits)))
    return expit((logits[None, :] + g) / bank.temperature).mean(axis=0)


def gate_report(records: Iterable[dict]) -> list[dict]:
    """Per-stream mean and sd of eval-mode gates across runs.

    Each record carries ``backbone``, ``variant``, ``missing_rate`` and a
    ``gates`` mapping ``stream -> value`` (optionally ``gates_stochastic``).
    The sd is the sample sd (0 for a single run).
    """
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in records:
        if not r.get("gates"):
            continue
        groups[(r["backbone"], r["variant"], float(r["missing_rate"]))].append(r)
    rows = []
    for (backbone, variant, rate), runs in sorted(groups.items()):
        for s in STREAMS:
            vals = np.array([r["gates"][s] for r in runs], dtype=float)
            stoch = [r["gates_stochastic"][s] for r in runs if r.get("gates_stochastic")]
            rows.append({
                "backbone": backbone, "variant": variant, "missing_rate": rate,
                "stream": s, "mean": float(vals.mean()),
                "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                "stochastic_mean": float(np.mean(stoch)) if stoch else float("nan"),
                "runs": len(vals),
            })
    return rows
