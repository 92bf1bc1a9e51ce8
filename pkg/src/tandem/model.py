"""Gated-fusion classifier: three streams, per-stream attention, gated fusion, classifier head."""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import StreamAttention, attend_final, attention_scores
from .autodiff import Tensor
from .gating import STREAMS, GateBank, fuse, harden, sample_gates
from .interpolation import build_control_path, eval_path
from .nde import (IntegrationError, InitialStateNet, VectorFieldMLP, integrate_cde,
                  integrate_ode, integrate_sde)
from .nn import MLP, Module

BACKBONES = ("ode", "cde", "sde")
VARIANTS = ("tandem", "tandem_soft", "concat_all", "concat_z_X", "concat_z_raw",
            "z_only", "no_attention")

# streams fed to the classifier, in fusion order
VARIANT_STREAMS = {
    "tandem": ("raw", "path", "latent"),
    "tandem_soft": ("raw", "path", "latent"),
    "concat_all": ("raw", "path", "latent"),
    "concat_z_X": ("path", "latent"),
    "concat_z_raw": ("raw", "latent"),
    "z_only": ("latent",),
    "no_attention": (),
}
GATED = ("tandem", "tandem_soft")
LOG_FLOOR = 1e-12


class ModelError(RuntimeError):
    pass


@dataclass
class TandemConfig:
    backbone: str = "cde"
    variant: str = "tandem"
    d: int = 1
    d_z: int = 16
    d_h: int = 32
    H: int = 4
    n_l: int = 2
    n_h: int = 32
    C: int = 2
    seed: int = 0
    temperature: float = 1.0
    attention_axis: str = "time"
    with_time_channel: bool = False
    init_logit: float = 1.0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.C < 2:
            raise ValueError("need at least two classes")

    @property
    def path_dim(self) -> int:
        return self.d + (1 if self.with_time_channel else 0)

    @property
    def classifier_input(self) -> int:
        if self.variant == "no_attention":
            return self.d_z
        return self.d_h * len(VARIANT_STREAMS[self.variant])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchInputs:
    """Model-ready arrays for samples of a common length ``T``."""

    x_tilde: np.ndarray   # (B, T, d)
    path: np.ndarray      # (B, T, d_path), control path on the grid
    grid: np.ndarray      # (T,) if shared else (B, T)
    labels: np.ndarray    # (B,) zero-based

    def __len__(self):
        return self.x_tilde.shape[0]

    def take(self, idx) -> "BatchInputs":
        idx = np.asarray(idx)
        grid = self.grid if self.grid.ndim == 1 else self.grid[idx]
        return BatchInputs(self.x_tilde[idx], self.path[idx], grid, self.labels[idx])


def encode(samples: Sequence, with_time_channel: bool = False) -> BatchInputs:
    """Zero-fill, fit control paths and stack a list of samples."""
    if not samples:
        raise ValueError("empty batch")
    T = samples[0].length
    for s in samples:
        if s.length != T:
            raise ValueError("all samples in a batch must share a length; rescale first")
    xt = np.stack([s.x_tilde for s in samples])
    paths = np.stack([eval_path(build_control_path(s, with_time_channel), s.times)
                      for s in samples])
    grids = np.stack([s.times for s in samples])
    grid = grids[0] if np.all(grids == grids[0]) else grids
    labels = np.array([s.label - 1 for s in samples], dtype=int)
    return BatchInputs(xt, paths, grid, labels)


class TandemModel(Module):
    def __init__(self, config: TandemConfig):
        super().__init__()
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        self.initial = self.child("initial", InitialStateNet(cfg.d, cfg.d_z, rng))
        if cfg.backbone == "ode":
            self.field = self.child("field", VectorFieldMLP(cfg.d_z, cfg.d_z, cfg.n_l, cfg.n_h, rng))
        elif cfg.backbone == "cde":
            self.field = self.child("field", VectorFieldMLP(
                cfg.d_z, cfg.d_z * cfg.path_dim, cfg.n_l, cfg.n_h, rng, matrix_cols=cfg.path_dim))
        else:
            self.field = self.child("field", VectorFieldMLP(cfg.d_z, cfg.d_z, cfg.n_l, cfg.n_h, rng))
            self.diffusion = self.child("diffusion", VectorFieldMLP(
                cfg.d_z, cfg.d_z, cfg.n_l, cfg.n_h, rng))
        in_dims = {"raw": cfg.d, "path": cfg.path_dim, "latent": cfg.d_z}
        self.attention: dict[str, StreamAttention] = {}
        for s in VARIANT_STREAMS[cfg.variant]:
            self.attention[s] = self.child(f"attn_{s}", StreamAttention(
                in_dims[s], cfg.d_h, cfg.H, rng, axis=cfg.attention_axis))
        self.gates = self.child("gates", GateBank(cfg.temperature, cfg.init_logit)) \
            if cfg.variant in GATED else None
        width = cfg.classifier_input
        self.classifier = self.child("classifier", MLP(width, cfg.C, width, 1, rng, final="softmax"))

    def classifier_parameter_names(self) -> list[str]:
        return [k for k in self.named_parameters() if k.startswith("classifier.")]

    def eval_rng(self) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, 7919])


def _latent(model: TandemModel, inputs: BatchInputs, rng) -> "object":
    cfg = model.config
    z0 = model.initial(inputs.x_tilde[:, 0, :])
    if cfg.backbone == "ode":
        return integrate_ode(model.field, z0, inputs.grid)
    if cfg.backbone == "cde":
        return integrate_cde(model.field, z0, inputs.path, inputs.grid)
    return integrate_sde(model.field, model.diffusion, z0, inputs.grid, rng)


def _finite(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise ModelError(f"non-finite activation in {layer}")
    return t


def gate_values(model: TandemModel, mode: str, rng=None, forced=None):
    """Gates as used by ``forward``; ``None`` for ungated variants."""
    cfg = model.config
    if forced is not None:
        return tuple(np.float64(g) for g in forced)
    if model.gates is None:
        return None
    if mode == "train":
        return sample_gates(model.gates, rng, "train_stochastic")
    soft = sample_gates(model.gates, None, "eval_deterministic")
    if cfg.variant == "tandem":
        return tuple(np.float64(h) for h in harden([g.data for g in soft]))
    return soft


def representation(model: TandemModel, inputs: BatchInputs, mode: str = "eval", rng=None,
                   forced_gates=None) -> Tensor:
    """Classifier input: the gated fusion of the attended final-time streams,
    or ``z(T)`` for ``no_attention``."""
    cfg = model.config
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if inputs.x_tilde.shape[-1] != cfg.d:
        raise ad.ShapeError(f"model expects {cfg.d} channels, got {inputs.x_tilde.shape[-1]}")
    if rng is None:
        rng = model.eval_rng()
    try:
        traj = _latent(model, inputs, rng)
    except IntegrationError as exc:
        raise ModelError(f"non-finite activation in backbone: {exc}") from exc
    if cfg.variant == "no_attention":
        return traj.final
    seqs = {"raw": inputs.x_tilde, "path": inputs.path, "latent": traj.states}
    streams = VARIANT_STREAMS[cfg.variant]
    phis = [_finite(attend_final(seqs[s], model.attention[s]), f"attention[{s}]")
            for s in streams]
    gates = gate_values(model, mode, rng, forced_gates)
    if gates is not None:
        gates = [gates[STREAMS.index(s)] for s in streams]
    return fuse(phis, gates)


def forward(model: TandemModel, inputs: BatchInputs, mode: str = "eval", rng=None,
            forced_gates=None) -> Tensor:
    """Class probabilities ``(B, C)``.

    ``mode="train"`` draws Gumbel gate noise (and Brownian noise for the
    SDE backbone) from ``rng``; ``mode="eval"`` uses deterministic gates,
    hardened for the ``tandem`` variant. ``forced_gates`` overrides the gate
    values with constants for all three streams.
    """
    rep = representation(model, inputs, mode, rng, forced_gates)
    return _finite(model.classifier(rep), "classifier")


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood with the log clamped at ``1e-12``."""
    n = probs.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(n), np.asarray(labels, dtype=int)] = 1.0
    picked = ad.sum_(ad.mul(ad.log(ad.clip_min(probs, LOG_FLOOR)), onehot))
    return ad.scale(picked, -1.0 / n)


def loss(model: TandemModel, inputs: BatchInputs, mode: str = "train", rng=None) -> Tensor:
    if len(inputs) == 0:
        raise ValueError("empty batch")
    return cross_entropy(forward(model, inputs, mode, rng), inputs.labels)


def stream_attention_scores(model: TandemModel, inputs: BatchInputs) -> dict[str, list[np.ndarray]]:
    """Per-stream, per-head ``(B, T, T)`` attention weights (eval mode)."""
    traj = _latent(model, inputs, model.eval_rng())
    seqs = {"raw": inputs.x_tilde, "path": inputs.path, "latent": traj.states}
    return {s: attention_scores(seqs[s], att) for s, att in model.attention.items()}


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_FORMAT = "tandem-checkpoint/1"


def save_checkpoint(model: TandemModel, path, meta: dict | None = None) -> None:
    """JSON document; each parameter is little-endian float64 bytes, base64-encoded."""
    params = []
    for name, t in model.named_parameters().items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        params.append({"name": name, "shape": list(t.shape), "dtype": "<f8",
                       "data": base64.b64encode(raw).decode("ascii")})
    doc = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(),
           "meta": meta or {}, "parameters": params}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[TandemModel, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    model = TandemModel(TandemConfig(**doc["config"]))
    state = {}
    for p in doc["parameters"]:
        arr = np.frombuffer(base64.b64decode(p["data"]), dtype=p.get("dtype", "<f8"))
        state[p["name"]] = arr.reshape(p["shape"]).astype(np.float64)
    model.load_state_dict(state)
    return model, doc.get("meta", {})
