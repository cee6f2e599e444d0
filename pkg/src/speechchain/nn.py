"""Layers built from autograd primitives.

Each layer registers its weights in a :class:`ModelParameters` under a
dotted prefix at construction time and is a plain callable afterwards.
Initialization: weights uniform in +-sqrt(1/fan_in), biases zero,
embeddings normal(0, 0.1).
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .params import ModelParameters


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, params: ModelParameters, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.W = params.add(f"{name}.W", uniform_init(rng, n_in, (n_in, n_out)))
        self.b = params.add(f"{name}.b", np.zeros(n_out)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Tensor:
        y = ag.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class Embedding:
    def __init__(self, params: ModelParameters, name: str, n: int, dim: int,
                 rng: np.random.Generator):
        self.table = params.add(f"{name}.table", rng.normal(0.0, 0.1, size=(n, dim)))

    def __call__(self, ids) -> Tensor:
        return ag.embedding_lookup(self.table, ids)


class LSTM:
    """Unidirectional LSTM usable as a whole-sequence layer or a single cell."""

    def __init__(self, params: ModelParameters, name: str, n_in: int, hidden: int,
                 rng: np.random.Generator):
        self.hidden = hidden
        self.W = params.add(f"{name}.W_in", uniform_init(rng, n_in, (n_in, 4 * hidden)))
        self.U = params.add(f"{name}.W_rec", uniform_init(rng, hidden, (hidden, 4 * hidden)))
        self.b = params.add(f"{name}.b", np.zeros(4 * hidden))

    def sequence(self, x, mask=None, reverse: bool = False) -> Tensor:
        return ag.lstm_layer(x, self.W, self.U, self.b, mask=mask, reverse=reverse)

    def step(self, x, state):
        h, c = state
        hc = ag.lstm_cell(x, h, c, self.W, self.U, self.b)
        H = self.hidden
        return hc[:, :H], hc[:, H:]

    def zero_state(self, batch: int, dtype=np.float64):
        z = Tensor(np.zeros((batch, self.hidden), dtype=dtype))
        return z, z


class BiLSTM:
    def __init__(self, params: ModelParameters, name: str, n_in: int, hidden: int,
                 rng: np.random.Generator):
        self.fwd = LSTM(params, f"{name}.fwd", n_in, hidden, rng)
        self.bwd = LSTM(params, f"{name}.bwd", n_in, hidden, rng)
        self.out_dim = 2 * hidden

    def __call__(self, x, mask=None) -> Tensor:
        return ag.concat([self.fwd.sequence(x, mask), self.bwd.sequence(x, mask, reverse=True)],
                         axis=-1)


class Conv1d:
    def __init__(self, params: ModelParameters, name: str, n_in: int, n_out: int, width: int,
                 rng: np.random.Generator):
        self.W = params.add(f"{name}.W", uniform_init(rng, width * n_in, (width, n_in, n_out)))
        self.b = params.add(f"{name}.b", np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        return ag.conv1d(x, self.W, self.b)


class Highway:
    """``T * H(x) + (1 - T) * x`` with a leaky-relu transform."""

    def __init__(self, params: ModelParameters, name: str, dim: int, rng: np.random.Generator,
                 slope: float = 0.01):
        self.H = Linear(params, f"{name}.H", dim, dim, rng)
        self.T = Linear(params, f"{name}.T", dim, dim, rng)
        self.slope = slope

    def __call__(self, x) -> Tensor:
        h = ag.leaky_relu(self.H(x), self.slope)
        t = ag.sigmoid(self.T(x))
        return t * h + (1.0 - t) * x


def _masked(x: Tensor, mask3) -> Tensor:
    return x if mask3 is None else x * mask3


class CBHG:
    """Convolution bank, max pool, projections, residual, highways, BiLSTM.

    Inputs and outputs are ``(B, S, C)``; ``mask`` is ``(B, S)``.  Padded
    frames are zeroed before every convolution so a padded batch matches
    per-sequence results.
    """

    def __init__(self, params: ModelParameters, name: str, n_in: int, rng: np.random.Generator,
                 bank_size: int = 8, channels: int = 128, projections=(128, 128),
                 highway_dim: int = 128, n_highway: int = 4, rnn_hidden: int = 128,
                 slope: float = 0.01):
        self.slope = slope
        self.bank = [Conv1d(params, f"{name}.bank{k}", n_in, channels, k, rng)
                     for k in range(1, bank_size + 1)]
        self.bank_width = bank_size * channels
        dims = [self.bank_width] + list(projections[:-1])
        self.projs = [Conv1d(params, f"{name}.proj{i}", d, p, 3, rng)
                      for i, (d, p) in enumerate(zip(dims, list(projections[:-1]) + [n_in]))]
        self.pre_highway = (Linear(params, f"{name}.pre_highway", n_in, highway_dim, rng, bias=False)
                            if n_in != highway_dim else None)
        self.highways = [Highway(params, f"{name}.highway{i}", highway_dim, rng, slope)
                         for i in range(n_highway)]
        self.rnn = BiLSTM(params, f"{name}.rnn", highway_dim, rnn_hidden, rng)
        self.out_dim = 2 * rnn_hidden

    def conv_bank(self, x, mask3=None) -> Tensor:
        x = _masked(x, mask3)
        return ag.concat([ag.leaky_relu(conv(x), self.slope) for conv in self.bank], axis=-1)

    def __call__(self, x, mask=None) -> Tensor:
        mask3 = None if mask is None else np.asarray(mask, dtype=x.data.dtype)[:, :, None]
        y = self.conv_bank(x, mask3)
        y = ag.max_pool1d(_masked(y, mask3))
        for i, conv in enumerate(self.projs):
            y = conv(_masked(y, mask3))
            if i < len(self.projs) - 1:
                y = ag.leaky_relu(y, self.slope)
        y = y + x
        if self.pre_highway is not None:
            y = self.pre_highway(y)
        for hw in self.highways:
            y = hw(y)
        return self.rnn(y, mask)
