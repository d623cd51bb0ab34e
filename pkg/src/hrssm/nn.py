"""Parameters, the few layers the world model needs, and Adam."""
from __future__ import annotations

import contextlib
import logging
import math
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


class Parameter(Tensor):
    """Trainable leaf tensor carrying its own Adam moments."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=T.get_dtype()), requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


class Module:
    """Tiny container: parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0):
    return rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True,
                 zero_init: bool = False):
        w = np.zeros((n_in, n_out)) if zero_init else _init_weight(rng, n_in, n_out)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.w, self.b)


class NormLayer(Module):
    """Linear (no bias) followed by LayerNorm+SiLU."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.lin = Linear(rng, n_in, n_out, bias=False)
        self.gain = Parameter(np.ones(n_out))
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        return T.layer_norm_silu(self.lin(x), self.gain, self.bias)


class MLP(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, hidden: int, n_out: int,
                 layers: int = 2, zero_out: bool = False):
        dims = [n_in] + [hidden] * layers
        self.hidden = [NormLayer(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(rng, dims[-1], n_out, zero_init=zero_out)

    def __call__(self, x) -> Tensor:
        for layer in self.hidden:
            x = layer(x)
        return self.out(x)


class GRUCell(Module):
    """Layer-normed GRU with the update gate biased towards keeping state."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_hidden: int):
        self.inp = NormLayer(rng, n_in, n_hidden)
        self.gates = Linear(rng, 2 * n_hidden, 3 * n_hidden, bias=False)
        self.gain = Parameter(np.ones(3 * n_hidden))
        self.bias = Parameter(np.zeros(3 * n_hidden))
        self.n = n_hidden

    def __call__(self, h, x) -> Tensor:
        x = self.inp(x)
        parts = T.layer_norm(self.gates(T.concat([x, h], -1)), self.gain, self.bias)
        n = self.n
        reset = T.sigmoid(parts[..., :n])
        cand = T.tanh(reset * parts[..., n:2 * n])
        update = T.sigmoid(parts[..., 2 * n:] - 1.0)
        return update * cand + (1.0 - update) * h


@contextlib.contextmanager
def frozen(params: Iterable[Parameter]):
    """Treat ``params`` as constants while the block runs."""
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, prev):
            p.requires_grad = flag


def global_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


class Adam:
    """Adam with global-norm clipping over the whole parameter group.

    beta1/beta2 default to 0.9/0.999.  A step whose gradients contain a
    non-finite value is skipped and counted in ``skipped``.
    """

    def __init__(self, params: Iterable[Parameter], lr: float, eps: float = 1e-8,
                 clip_norm: float | None = None, beta1: float = 0.9, beta2: float = 0.999):
        self.params = list(params)
        self.lr, self.eps, self.clip_norm = lr, eps, clip_norm
        self.beta1, self.beta2 = beta1, beta2
        self.skipped = 0

    def step(self) -> float:
        return adam_step(self, self.lr, self.beta1, self.beta2, self.eps, self.clip_norm)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(opt: Adam | list[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, clip_norm: float | None = None) -> float:
    """One clipped Adam update; returns the pre-clip global gradient norm."""
    params = opt.params if isinstance(opt, Adam) else list(opt)
    norm = global_norm(params)
    if not math.isfinite(norm):
        if isinstance(opt, Adam):
            opt.skipped += 1
        log.warning("non-finite gradient norm; Adam step skipped")
        for p in params:
            p.grad = None
        return norm
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    for p in params:
        if p.grad is None:
            continue
        g = p.grad * scale
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * g * g
        mhat = p.adam_m / (1 - beta1 ** p.step_count)
        vhat = p.adam_v / (1 - beta2 ** p.step_count)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)
        p.grad = None
    return norm
