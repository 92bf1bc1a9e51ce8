"""Natural cubic spline control paths over observed knots."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ChannelSpline:
    """One channel: segment ``k`` is ``a + b*u + c*u**2 + d*u**3``, ``u = s - knots[k]``."""

    knots: np.ndarray
    values: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if self.knots.size == 0:
            return np.zeros_like(s)
        if self.knots.size == 1:
            return np.full_like(s, self.values[0])
        t = self.knots
        sc = np.clip(s, t[0], t[-1])
        k = np.clip(np.searchsorted(t, sc, side="right") - 1, 0, t.size - 2)
        u = sc - t[k]
        out = self.a[k] + u * (self.b[k] + u * (self.c[k] + u * self.d[k]))
        # exact knot reproduction, including the right end point
        hit = np.searchsorted(t, sc)
        hit = np.clip(hit, 0, t.size - 1)
        on_knot = t[hit] == sc
        return np.where(on_knot, self.values[hit], out)

    def derivative(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if self.knots.size < 2:
            return np.zeros_like(s)
        t = self.knots
        inside = (s >= t[0]) & (s <= t[-1])
        sc = np.clip(s, t[0], t[-1])
        k = np.clip(np.searchsorted(t, sc, side="right") - 1, 0, t.size - 2)
        u = sc - t[k]
        slope = self.b[k] + u * (2.0 * self.c[k] + 3.0 * u * self.d[k])
        return np.where(inside, slope, 0.0)


def _solve_tridiagonal(lower, diag, upper, rhs) -> np.ndarray:
    """Thomas algorithm; ``lower[0]`` and ``upper[-1]`` are ignored."""
    n = diag.size
    cp = np.zeros(n)
    dp = np.zeros(n)
    cp[0] = upper[0] / diag[0] if n > 1 else 0.0
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n):
        den = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / den if i < n - 1 else 0.0
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / den
    x = np.zeros(n)
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


def natural_spline(knots, values) -> ChannelSpline:
    t = np.asarray(knots, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("knots and values must be 1-D arrays of equal length")
    if np.any(np.diff(t) <= 0):
        raise ValueError("knot times must be strictly increasing")
    n = t.size
    if n < 2:
        empty = np.zeros(0)
        return ChannelSpline(t, y, empty, empty, empty, empty)
    h = np.diff(t)
    m = np.zeros(n)  # second derivatives; natural ends m[0] = m[-1] = 0
    if n > 2:
        slopes = np.diff(y) / h
        rhs = 6.0 * np.diff(slopes)
        diag = 2.0 * (h[:-1] + h[1:])
        lower = np.concatenate([[0.0], h[1:-1]])
        upper = np.concatenate([h[1:-1], [0.0]])
        m[1:-1] = _solve_tridiagonal(lower, diag, upper, rhs)
    a = y[:-1]
    b = (y[1:] - y[:-1]) / h - h * (2.0 * m[:-1] + m[1:]) / 6.0
    c = m[:-1] / 2.0
    d = (m[1:] - m[:-1]) / (6.0 * h)
    return ChannelSpline(t, y, a, b, c, d)


@dataclass(frozen=True)
class ControlPath:
    """Per-channel natural cubic splines, clamped outside the observed range."""

    channels: tuple[ChannelSpline, ...]
    with_time: bool = False

    @property
    def channel_count(self) -> int:
        return len(self.channels) + (1 if self.with_time else 0)

    def __call__(self, s) -> np.ndarray:
        return eval_path(self, s)


def build_control_path(sample, with_time: bool = False) -> ControlPath:
    """Fit each channel through its observed points only.

    Channels with no observed point evaluate to zero; a single observed
    point gives a constant channel. With ``with_time`` an extra channel
    ``X(s) = s`` is appended.
    """
    times = np.asarray(sample.times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    splines = []
    for c in range(sample.values.shape[1]):
        obs = sample.mask[:, c] > 0
        splines.append(natural_spline(times[obs], sample.values[obs, c]))
    return ControlPath(tuple(splines), with_time)


def eval_path(path: ControlPath, s) -> np.ndarray:
    """``X(s)``; scalar ``s`` gives a ``(d,)`` vector, an array gives ``(len(s), d)``."""
    s_arr = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s_arr)):
        raise ValueError("evaluation time must be finite")
    cols = [sp(s_arr) for sp in path.channels]
    if path.with_time:
        cols.append(s_arr.copy())
    return np.stack(cols, axis=-1)


def eval_path_derivative(path: ControlPath, s) -> np.ndarray:
    s_arr = np.asarray(s, dtype=np.float64)
    cols = [sp.derivative(s_arr) for sp in path.channels]
    if path.with_time:
        cols.append(np.ones_like(s_arr))
    return np.stack(cols, axis=-1)


def eval_path_increment(path: ControlPath, s0: float, s1: float) -> np.ndarray:
    """``X(s1) - X(s0)``."""
    if s0 > s1:
        raise ValueError(f"increment requires s0 <= s1, got {s0} > {s1}")
    return eval_path(path, s1) - eval_path(path, s0)
