"""Named parameter storage, freeze masks, and the Adam optimizer."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, ContractError
from .rng import Xoshiro256StarStar
from .tensor import DTYPE, Tensor


class ParamStore:
    """Map from dot-separated parameter path to Tensor.

    Iteration order is always lexicographic by path, so checkpoints and
    freeze masks are byte-reproducible.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, tensor: Tensor) -> Tensor:
        if path in self._params:
            raise ConfigError(f"duplicate parameter path: {path}")
        tensor.requires_grad = True
        self._params[path] = tensor
        return tensor

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for path in sorted(self._params):
            yield path, self._params[path]

    def tensors(self) -> list[Tensor]:
        return [self._params[p] for p in sorted(self._params)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {p: t.grad for p, t in self._params.items() if t.grad is not None}

    def replace(self, path: str, tensor: Tensor) -> Tensor:
        """Swap in a tensor at an existing path; returns the old tensor.

        Used by gradient checks to route differentiation through one chosen
        parameter without rebuilding the store.
        """
        if path not in self._params:
            raise ConfigError(f"unknown parameter path: {path}")
        old = self._params[path]
        if old.data.shape != tensor.data.shape:
            raise ConfigError(
                f"replace: shape {tensor.data.shape} differs from {old.data.shape} at {path}")
        self._params[path] = tensor
        return old

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for path, t in self.items():
            out.add(path, Tensor(t.data.copy(), requires_grad=True))
        return out

    def merge(self, other: "ParamStore") -> None:
        for path, t in other.items():
            self.add(path, t)

    def has_prefix(self, prefix: str) -> bool:
        return any(p.startswith(prefix) for p in self._params)

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())


@contextmanager
def no_grad(store: ParamStore):
    """Temporarily disable gradient tracking for every parameter in the store."""
    tensors = store.tensors()
    try:
        for t in tensors:
            t.requires_grad = False
        yield
    finally:
        for t in tensors:
            t.requires_grad = True


class FreezeMask:
    """Per-parameter boolean flags in ParamStore (lexicographic) order."""

    def __init__(self, store: ParamStore, frozen_paths: Iterable[str] = ()):
        frozen = set(frozen_paths)
        unknown = frozen - set(store.paths())
        if unknown:
            raise ConfigError(f"freeze mask names unknown parameters: {sorted(unknown)}")
        self._flags = {p: p in frozen for p in store.paths()}

    @classmethod
    def from_prefixes(cls, store: ParamStore, prefixes: Iterable[str]) -> "FreezeMask":
        prefixes = list(prefixes)
        frozen = [p for p in store.paths() if any(p.startswith(pre) for pre in prefixes)]
        return cls(store, frozen)

    def frozen(self, path: str) -> bool:
        return self._flags[path]

    def flags(self) -> list[bool]:
        return [self._flags[p] for p in sorted(self._flags)]

    def frozen_paths(self) -> list[str]:
        return [p for p in sorted(self._flags) if self._flags[p]]

    def __len__(self) -> int:
        return len(self._flags)


def uniform_init(gen: Xoshiro256StarStar, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init."""
    bound = 1.0 / np.sqrt(max(1, fan_in))
    n = int(np.prod(shape)) if shape else 1
    vals = gen.uniforms(n) * 2.0 - 1.0
    return (vals * bound).reshape(shape).astype(DTYPE)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, freeze: FreezeMask | None = None) -> None:
    """One bias-corrected Adam update over every non-frozen parameter.

    Frozen parameters and their optimizer state are left bit-identical.
    Parameters without a gradient entry are treated as zero-gradient.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for path, p in params.items():
        if freeze is not None and freeze.frozen(path):
            continue
        g = grads.get(path)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ContractError(
                f"adam_step: gradient shape {g.shape} drifted from parameter "
                f"{path} shape {p.data.shape}")
        m = state.m.get(path)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[path] = m
            state.v[path] = np.zeros_like(p.data)
        v = state.v[path]
        if m.shape != p.data.shape:
            raise ContractError(
                f"adam_step: state shape {m.shape} drifted from parameter "
                f"{path} shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Stateful convenience wrapper around adam_step for training loops."""

    def __init__(self, params: ParamStore, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 freeze: FreezeMask | None = None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.freeze = freeze
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, self.params.grads(), self.state,
                  lr=self.lr, betas=self.betas, eps=self.eps, freeze=self.freeze)

    def zero_grad(self) -> None:
        self.params.zero_grad()
