"""Neural ODE / CDE / SDE backbones integrated with explicit Euler steps.

Integration runs on the sample's own time grid, one step per interval, and
is unrolled on the tape so gradients are exact for the discretised model.
All integrators accept a batch of states ``(B, d_z)`` or a single ``(d_z,)``
state, with either a shared grid ``(T,)`` or per-sample grids ``(B, T)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .interpolation import ControlPath, eval_path
from .nn import MLP, Linear, Module

Field = Callable[[np.ndarray, Tensor], Tensor]

HIDDEN_LAYER_CHOICES = (1, 2, 3, 4)
HIDDEN_WIDTH_CHOICES = (16, 32, 64, 128)


class IntegrationError(RuntimeError):
    pass


class VectorFieldMLP(Module):
    """``f(t, z)``: ReLU MLP over ``[z, t]`` with a final Tanh.

    ``layer_count`` is the number of hidden layers. With ``matrix_cols`` set
    the output is reshaped to ``(..., d_z, matrix_cols)`` (CDE fields).
    """

    def __init__(self, d_z: int, output_dim: int, layer_count: int, hidden_width: int,
                 rng: np.random.Generator, time_dependent: bool = True,
                 matrix_cols: int | None = None):
        super().__init__()
        self.d_z = d_z
        self.time_dependent = time_dependent
        self.input_dim = d_z + (1 if time_dependent else 0)
        self.output_dim = output_dim
        self.matrix_cols = matrix_cols
        if matrix_cols is not None and output_dim != d_z * matrix_cols:
            raise ValueError(f"matrix field output {output_dim} != d_z * {matrix_cols}")
        self.net = self.child("net", MLP(self.input_dim, output_dim, hidden_width,
                                         layer_count, rng, final="tanh"))

    def __call__(self, t, z: Tensor) -> Tensor:
        if self.time_dependent:
            t = np.asarray(t, dtype=np.float64)
            if t.ndim == 0:
                tcol = np.full(z.shape[:-1] + (1,), float(t))
            else:
                tcol = t.reshape(z.shape[:-1] + (1,))
            x = ad.concat_last_dim(z, tcol)
        else:
            x = z
        out = self.net(x)
        if self.matrix_cols is not None:
            out = ad.reshape(out, z.shape[:-1] + (self.d_z, self.matrix_cols))
        return out

    @staticmethod
    def count(d_z: int, output_dim: int, layer_count: int, hidden_width: int,
              time_dependent: bool = True) -> int:
        return MLP.count(d_z + (1 if time_dependent else 0), output_dim, hidden_width, layer_count)


class InitialStateNet(Module):
    """Affine map from the zero-filled first observation to ``z(0)``."""

    def __init__(self, d: int, d_z: int, rng: np.random.Generator):
        super().__init__()
        self.d_z = d_z
        self.linear = self.child("linear", Linear(d, d_z, rng))

    def __call__(self, x_first) -> Tensor:
        return self.linear(ad.constant(np.asarray(x_first, dtype=np.float64))
                           if not isinstance(x_first, Tensor) else x_first)


@dataclass
class LatentTrajectory:
    grid_times: np.ndarray
    states: Tensor   # (..., T, d_z)
    final: Tensor    # (..., d_z), the same value as states[..., -1, :]

    @property
    def length(self) -> int:
        return self.states.shape[-2]


def init_state(net: InitialStateNet, sample_or_first) -> Tensor:
    """``z0 = eta(x_tilde(t_1))``; accepts a sample or the first zero-filled row(s)."""
    first = sample_or_first
    if hasattr(sample_or_first, "x_tilde"):
        x = sample_or_first.x_tilde
        if x.shape[0] == 0:
            raise ValueError("sample is empty")
        first = x[0]
    return net(first)


def _steps(grid, z0: Tensor):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 1:
        if np.any(np.diff(grid) <= 0):
            raise ValueError("integration grid must be strictly increasing")
        return grid, grid[:-1], np.diff(grid), True
    if grid.ndim == 2 and z0.data.ndim == 2 and grid.shape[0] == z0.shape[0]:
        if np.any(np.diff(grid, axis=1) <= 0):
            raise ValueError("integration grid must be strictly increasing")
        return grid, grid[:, :-1].T, np.diff(grid, axis=1).T, False
    raise ad.ShapeError(f"grid shape {grid.shape} incompatible with state {z0.shape}")


def _times_scaled(f: Tensor, dt, shared: bool) -> Tensor:
    if shared:
        return ad.scale(f, float(dt))
    return ad.mul(f, np.broadcast_to(np.asarray(dt)[:, None], f.shape))


def _check(z: Tensor, step: int, kind: str) -> None:
    if not np.all(np.isfinite(z.data)):
        raise IntegrationError(f"{kind}: non-finite state at step {step}")


def _trajectory(grid, states: list[Tensor]) -> LatentTrajectory:
    stacked = ad.stack(states, axis=-2 if states[0].data.ndim else 0)
    return LatentTrajectory(np.asarray(grid), stacked, states[-1])


def integrate_ode(field: Field, z0: Tensor, grid) -> LatentTrajectory:
    """Euler: ``z_{k+1} = z_k + dt_k * f(t_k, z_k)``."""
    z0 = ad.constant(z0)
    grid, t_left, dts, shared = _steps(grid, z0)
    z = z0
    states = [z]
    for k in range(len(dts)):
        z = ad.add(z, _times_scaled(field(t_left[k], z), dts[k], shared))
        _check(z, k, "ode")
        states.append(z)
    return _trajectory(grid, states)


def path_values(path, grid) -> np.ndarray:
    """Evaluate a path (or a batch of paths) on a grid: ``(..., T, d)``."""
    grid = np.asarray(grid, dtype=np.float64)
    if isinstance(path, ControlPath):
        return eval_path(path, grid)
    if isinstance(path, np.ndarray):
        return path
    paths = list(path)
    if grid.ndim == 1:
        return np.stack([eval_path(p, grid) for p in paths])
    return np.stack([eval_path(p, g) for p, g in zip(paths, grid)])


def integrate_cde(field: Field, z0: Tensor, path, grid) -> LatentTrajectory:
    """Euler for the controlled equation: ``z_{k+1} = z_k + F(t_k, z_k) (X_{k+1} - X_k)``.

    ``path`` is a :class:`ControlPath`, a sequence of them (one per batch
    element) or an array of path values already evaluated on ``grid``.
    """
    z0 = ad.constant(z0)
    grid, t_left, dts, shared = _steps(grid, z0)
    X = path_values(path, grid)
    if X.shape[-2] != len(dts) + 1:
        raise ad.ShapeError(f"path has {X.shape[-2]} grid values, grid has {len(dts) + 1}")
    dX = np.diff(X, axis=-2)
    d = X.shape[-1]
    cols = getattr(field, "matrix_cols", None)
    if cols is not None and cols != d:
        raise ad.ShapeError(f"cde: field expects {cols} path channels, path has {d}")
    z = z0
    states = [z]
    lead = z0.shape[:-1]
    for k in range(len(dts)):
        F = field(t_left[k], z)
        if F.shape != lead + (z0.shape[-1], d):
            raise ad.ShapeError(f"cde: field output {F.shape} does not match "
                                f"{lead + (z0.shape[-1], d)}")
        inc = dX[..., k, :, None]
        dz = ad.reshape(ad.matmul(F, inc), z0.shape)
        z = ad.add(z, dz)
        _check(z, k, "cde")
        states.append(z)
    return _trajectory(grid, states)


def brownian_increments(rng: np.random.Generator, grid, state_shape) -> np.ndarray:
    """``dB_k ~ N(0, dt_k)`` per coordinate, shape ``(T-1, *state_shape)``."""
    grid = np.asarray(grid, dtype=np.float64)
    dts = np.diff(grid, axis=-1)
    z = rng.standard_normal((dts.shape[-1],) + tuple(state_shape))
    if grid.ndim == 1:
        return z * np.sqrt(dts).reshape((-1,) + (1,) * len(state_shape))
    return z * np.sqrt(dts.T)[:, :, None]


def integrate_sde(drift: Field, diffusion: Field, z0: Tensor, grid, noise) -> LatentTrajectory:
    """Euler-Maruyama with diagonal noise.

    ``noise`` is a seeded ``np.random.Generator`` or pre-drawn Brownian
    increments from :func:`brownian_increments`.
    """
    z0 = ad.constant(z0)
    grid, t_left, dts, shared = _steps(grid, z0)
    out_dim = getattr(diffusion, "output_dim", z0.shape[-1])
    if out_dim != z0.shape[-1]:
        raise ad.ShapeError(f"sde: diffusion output {out_dim} != d_z {z0.shape[-1]}")
    dB = noise if isinstance(noise, np.ndarray) else brownian_increments(noise, grid, z0.shape)
    if dB.shape != (len(dts),) + z0.shape:
        raise ad.ShapeError(f"sde: noise shape {dB.shape} != {(len(dts),) + z0.shape}")
    z = z0
    states = [z]
    for k in range(len(dts)):
        t = t_left[k]
        drift_term = _times_scaled(drift(t, z), dts[k], shared)
        noise_term = ad.mul(diffusion(t, z), dB[k])
        z = ad.add(ad.add(z, drift_term), noise_term)
        _check(z, k, "sde")
        states.append(z)
    return _trajectory(grid, states)
