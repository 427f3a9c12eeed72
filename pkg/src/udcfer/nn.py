"""Parameter store, deterministic initialization, and the Adam optimizer.

Parameters are named ``Tensor`` leaves.  Initialization is a pure
function of (seed, parameter name), so a model built twice with the same
seed has bit-identical weights regardless of registration order.
"""

from __future__ import annotations

import hashlib
import math
from typing import Dict, Iterable, Optional

import numpy as np

from .autodiff import Tensor, add, matmul, parameter
from .errors import ShapeError


def _name_entropy(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def name_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, sha256(name)); stable across platforms."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_entropy(name)]))


class ParamStore:
    """Ordered mapping of parameter name -> trainable Tensor."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.params: Dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ShapeError(f"parameter '{name}' registered twice")
        t = parameter(data, name)
        self.params[name] = t
        return t

    def xavier(self, name: str, shape: tuple, fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        data = name_rng(self.seed, name).uniform(-limit, limit, size=shape)
        return self._register(name, data)

    def linear(self, name: str, n_in: int, n_out: int, bias: bool = True) -> None:
        """Register ``name.w`` [n_in, n_out] and optionally ``name.b`` [1, n_out]."""
        self.xavier(f"{name}.w", (n_in, n_out), n_in, n_out)
        if bias:
            self.constant(f"{name}.b", np.zeros((1, n_out)))

    def conv1x1(self, name: str, c_in: int, c_out: int) -> Tensor:
        return self.xavier(name, (c_out, c_in), c_in, c_out)

    def depthwise3x3(self, name: str, channels: int) -> Tensor:
        return self.xavier(name, (channels, 3, 3), 9, 9)

    def constant(self, name: str, value: np.ndarray) -> Tensor:
        return self._register(name, np.asarray(value, dtype=np.float64))

    def freeze(self, prefixes: Iterable[str]) -> list:
        """Mark every parameter under the given prefixes as non-trainable."""
        frozen = []
        for name, p in self.params.items():
            if any(name.startswith(pre) for pre in prefixes):
                p.requires_grad = False
                frozen.append(name)
        return frozen

    def trainable(self) -> Dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                if strict:
                    raise ShapeError(f"checkpoint missing parameter '{name}'")
                continue
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise ShapeError(
                    f"checkpoint shape {a.shape} != model shape {p.shape} for '{name}'")
            p.data = a
        if strict:
            extra = set(arrays) - set(self.params)
            if extra:
                raise ShapeError(f"checkpoint has unknown parameters: {sorted(extra)}")


def apply_linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    """y = x @ name.w (+ name.b when present); x is [B, n_in]."""
    y = matmul(x, store[f"{name}.w"])
    bname = f"{name}.b"
    if bname in store:
        y = add(y, store[bname])
    return y


class Adam:
    """Adam with classic L2 regularization folded into the gradient.

    Only parameters with ``requires_grad`` participate; frozen tensors are
    skipped entirely (no state, no decay).
    """

    def __init__(self, store: ParamStore, lr: float = 3.5e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, grad_clip: float = 0.0):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.grad_clip = float(grad_clip)
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, grads: Dict[str, Tensor]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        # Global-norm clipping over the raw gradients, before weight decay.
        scale = 1.0
        if self.grad_clip > 0.0:
            total = 0.0
            for name, p in self.store.items():
                if p.requires_grad:
                    g = grads[name].data
                    total += float(np.sum(g * g))
            norm = math.sqrt(total)
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for name, p in self.store.items():
            if not p.requires_grad:
                continue
            g = grads[name].data
            if scale != 1.0:
                g = g * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
