"""Parameter containers and dense layers on top of :mod:`tandem.autodiff`."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter tree.

    Parameters are :class:`Tensor` attributes registered with
    :meth:`param`; sub-modules are registered with :meth:`child`. Names are
    dotted paths, which is also the checkpoint key format.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value) -> Tensor:
        t = ad.tensor(value, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, t in self._params.items():
            out[prefix + name] = t
        for name, mod in self._children.items():
            out.update(mod.named_parameters(prefix + name + "."))
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()


class Linear(Module):
    """``y = x @ W + b`` with W of shape ``(in_dim, out_dim)``.

    Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation for both W and b.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = self.param("weight", rng.uniform(-bound, bound, (in_dim, out_dim)))
        self.bias = self.param("bias", rng.uniform(-bound, bound, (out_dim,)))

    def __call__(self, x):
        shape = x.shape
        if shape[-1] != self.in_dim:
            raise ad.ShapeError(f"linear: expected last dim {self.in_dim}, got {shape}")
        if len(shape) == 1:
            x = ad.reshape(x, (1, shape[0]))
        y = ad.matmul(x, self.weight)
        y = ad.add(y, ad.broadcast_to(self.bias, y.shape))
        return ad.reshape(y, (self.out_dim,)) if len(shape) == 1 else y


class MLP(Module):
    """ReLU network: ``hidden_layers`` hidden layers of width ``hidden``.

    ``final`` is ``"tanh"``, ``"softmax"`` or ``None`` (linear output).
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int, hidden_layers: int,
                 rng: np.random.Generator, final: str | None = None):
        super().__init__()
        if hidden_layers < 1:
            raise ValueError("hidden_layers must be >= 1")
        if final not in (None, "tanh", "softmax"):
            raise ValueError(f"unknown final activation {final!r}")
        self.in_dim, self.out_dim, self.final = in_dim, out_dim, final
        self.layers = []
        dims = [in_dim] + [hidden] * hidden_layers + [out_dim]
        for i in range(len(dims) - 1):
            self.layers.append(self.child(f"l{i}", Linear(dims[i], dims[i + 1], rng)))

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        x = self.layers[-1](x)
        if self.final == "tanh":
            return ad.tanh(x)
        if self.final == "softmax":
            return ad.softmax_last_dim(x)
        return x

    @staticmethod
    def count(in_dim: int, out_dim: int, hidden: int, hidden_layers: int) -> int:
        return ((in_dim + 1) * hidden + (hidden_layers - 1) * (hidden + 1) * hidden
                + (hidden + 1) * out_dim)
