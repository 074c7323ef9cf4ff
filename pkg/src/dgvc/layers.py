"""Neural layers on top of the autograd tape: dense, conv stacks, LSTM.

Parameters are plain Tensors with requires_grad=True, registered on a
ParamRegistry in declaration order.  That order is the canonical one used
for gradient reduction, optimizer state, and checkpoint serialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ParamRegistry:
    """Ordered collection of named parameter tensors."""

    def __init__(self):
        self._names: list[str] = []
        self._tensors: list[Tensor] = []

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._names:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True)
        self._names.append(name)
        self._tensors.append(t)
        return t

    def names(self) -> list[str]:
        return list(self._names)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors)

    def zero_grad(self) -> None:
        for t in self._tensors:
            t.grad = None

    def state_vectors(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self._tensors]

    def load_state_vectors(self, vectors) -> None:
        if len(vectors) != len(self._tensors):
            raise ValueError(f"expected {len(self._tensors)} parameter arrays, got {len(vectors)}")
        for t, v in zip(self._tensors, vectors):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.data.shape:
                raise ValueError(f"parameter shape mismatch: {v.shape} vs {t.data.shape}")
            t.data = v.copy()

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._tensors)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = np.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


class Dense:
    """y = x @ W + b with W of shape (d_in, d_out)."""

    def __init__(self, reg: ParamRegistry, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = reg.register(f"{name}.w", uniform_init(rng, (d_in, d_out), d_in))
        self.b = reg.register(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.matmul(x, self.w), self.b)


class Conv2d:
    def __init__(self, reg: ParamRegistry, name: str, c_in: int, c_out: int,
                 k: int, stride: int, pad: int, rng: np.random.Generator):
        self.stride, self.pad = stride, pad
        self.w = reg.register(f"{name}.w", uniform_init(rng, (c_out, c_in, k, k), c_in * k * k))
        self.b = reg.register(f"{name}.b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.w, self.b, self.stride, self.pad)


class Deconv2d:
    def __init__(self, reg: ParamRegistry, name: str, c_in: int, c_out: int,
                 k: int, stride: int, pad: int, rng: np.random.Generator):
        self.stride, self.pad = stride, pad
        fan_in = max(1, c_in * (k // stride) ** 2)
        self.w = reg.register(f"{name}.w", uniform_init(rng, (c_in, c_out, k, k), fan_in))
        self.b = reg.register(f"{name}.b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.deconv2d(x, self.w, self.b, self.stride, self.pad)


@dataclass
class LstmState:
    """Hidden and cell vectors, each of shape (batch, hidden)."""

    h: Tensor
    c: Tensor


class LstmCell:
    """Standard LSTM cell; gate order in the packed weight is i, f, g, o.

    The forget-gate bias is initialized to 1.0.
    """

    def __init__(self, reg: ParamRegistry, name: str, d_in: int, hidden: int, rng: np.random.Generator):
        self.d_in, self.hidden = d_in, hidden
        self.w = reg.register(f"{name}.w", uniform_init(rng, (d_in + hidden, 4 * hidden), d_in + hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = reg.register(f"{name}.b", b)

    def initial_state(self, batch: int) -> LstmState:
        z = np.zeros((batch, self.hidden))
        return LstmState(Tensor(z), Tensor(z.copy()))

    def step(self, x: Tensor, state: LstmState) -> LstmState:
        if x.data.ndim != 2 or x.data.shape[1] != self.d_in:
            raise ag.GraphError(f"lstm step: input shape {x.data.shape}, expected (*,{self.d_in})")
        h, c = state.h, state.c
        hd = self.hidden
        pre = ag.add(ag.matmul(ag.concat([x, h], axis=1), self.w), self.b)
        i = ag.sigmoid(pre[:, 0 * hd:1 * hd])
        f = ag.sigmoid(pre[:, 1 * hd:2 * hd])
        g = ag.tanh(pre[:, 2 * hd:3 * hd])
        o = ag.sigmoid(pre[:, 3 * hd:4 * hd])
        c_new = ag.add(ag.mul(f, c), ag.mul(i, g))
        h_new = ag.mul(o, ag.tanh(c_new))
        return LstmState(h_new, c_new)


class BiLstm:
    """Runs one LSTM forward and one backward over a sequence of (N, D)
    steps and returns the concatenated final hidden states, shape (N, 2H)."""

    def __init__(self, reg: ParamRegistry, name: str, d_in: int, hidden: int, rng: np.random.Generator):
        self.fwd = LstmCell(reg, f"{name}.fwd", d_in, hidden, rng)
        self.bwd = LstmCell(reg, f"{name}.bwd", d_in, hidden, rng)

    def __call__(self, steps: list[Tensor]) -> Tensor:
        batch = steps[0].data.shape[0]
        sf = self.fwd.initial_state(batch)
        for x in steps:
            sf = self.fwd.step(x, sf)
        sb = self.bwd.initial_state(batch)
        for x in reversed(steps):
            sb = self.bwd.step(x, sb)
        return ag.concat([sf.h, sb.h], axis=1)
