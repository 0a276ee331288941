"""Small neural-net building blocks on top of the autodiff primitives.

Networks keep their weights in a :class:`ParameterSet`, an ordered name ->
Tensor mapping.  The insertion order is the canonical flattening order used
by the optimizer, the gradient all-reduce packets, and the checkpoint format,
so it must be identical across worker replicas.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParameterSet:
    """Ordered collection of trainable tensors with flat-vector views."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True, dtype=array.dtype)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    @property
    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=t.data.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k!r}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        off = 0
        for t in self._params.values():
            t.data[...] = flat[off:off + t.size].reshape(t.shape)
            off += t.size
        if off != flat.size:
            raise ValueError(f"flat vector length {flat.size} != parameter count {off}")

    def flatten_grads(self, grad_map: dict[int, Tensor]) -> np.ndarray:
        """Flatten a backward() gradient map in canonical parameter order."""
        chunks = []
        for t in self._params.values():
            g = grad_map.get(t.node_id)
            chunks.append(g.data.ravel() if g is not None else np.zeros(t.size, dtype=t.data.dtype))
        return np.concatenate(chunks)

    def astype(self, dtype) -> "ParameterSet":
        """Shadow copy in another dtype (float64 for gradient checking)."""
        out = ParameterSet()
        for k, t in self._params.items():
            out.add(k, t.data.astype(dtype))
        return out


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def zeros(*shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def full(shape, value, dtype=np.float32) -> np.ndarray:
    return np.full(shape, value, dtype=dtype)


# ---------------------------------------------------------------------------
# layers (functional, parameters owned by the caller's ParameterSet)
# ---------------------------------------------------------------------------

class Linear:
    """y = x @ W + b with W of shape (in, out)."""

    def __init__(self, params: ParameterSet, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.w = params.add(f"{name}.w", xavier_uniform(rng, n_in, n_out, dtype))
        self.b = params.add(f"{name}.b", zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm:
    """Last-dim layer norm with learned gain and bias."""

    def __init__(self, params: ParameterSet, name: str, width: int, dtype=np.float32):
        self.gain = params.add(f"{name}.gain", full((width,), 1.0, dtype=dtype))
        self.bias = params.add(f"{name}.bias", zeros(width, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layernorm_lastdim(x), self.gain), self.bias)


class Mlp:
    """Stack of Linear layers with tanh on all but the last."""

    def __init__(self, params: ParameterSet, name: str, sizes: list[int],
                 rng: np.random.Generator, dtype=np.float32):
        self.layers = [
            Linear(params, f"{name}.{i}", sizes[i], sizes[i + 1], rng, dtype)
            for i in range(len(sizes) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ad.tanh(x)
        return x


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clamp built from relu (zero gradient outside [lo, hi])."""
    shifted = ad.relu(ad.add(x, _const_like(x, -lo)))          # max(x - lo, 0)
    capped = ad.sub(shifted, ad.relu(ad.add(x, _const_like(x, -hi))))
    return ad.add(capped, _const_like(x, lo))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min: a - relu(a - b)."""
    return ad.sub(a, ad.relu(ad.sub(a, b)))


def _const_like(x: Tensor, value: float) -> Tensor:
    return Tensor(np.asarray(value, dtype=x.data.dtype), dtype=x.data.dtype)


def constant(array, dtype=np.float32) -> Tensor:
    """Non-trainable tensor wrapper for inputs and masks."""
    return Tensor(np.asarray(array, dtype=dtype))
