"""Parameterized layers built from :mod:`flowpix.nn.ops`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from flowpix.nn import ops
from flowpix.nn.tensor import Parameter, Tensor, make_result


class Module:
    """Collects parameters and sub-modules from attributes in assignment order."""

    training: bool = True

    def parameters(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
            elif isinstance(value, Module):
                yield from value.parameters()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.parameters()

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Module):
    def __init__(self, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "same", bias: bool = True, dtype=np.float64):
        self.stride, self.padding = stride, padding
        self.kernel = Parameter(he_uniform(rng, (k, k, c_in, c_out), k * k * c_in, dtype), f"{name}.kernel")
        self.bias = Parameter(np.zeros(c_out, dtype), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.kernel, self.stride, self.padding)
        return y + self.bias if self.bias is not None else y


class SeparableConv2D(Module):
    """Depthwise 3x3 then pointwise 1x1."""

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator,
                 stride: int = 1, k: int = 3, bias: bool = True, dtype=np.float64):
        self.stride = stride
        self.depthwise = Parameter(he_uniform(rng, (k, k, c_in), k * k, dtype), f"{name}.depthwise")
        self.pointwise = Parameter(he_uniform(rng, (1, 1, c_in, c_out), c_in, dtype), f"{name}.pointwise")
        self.bias = Parameter(np.zeros(c_out, dtype), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.separable_conv2d(x, self.depthwise, self.pointwise, self.stride, "same")
        return y + self.bias if self.bias is not None else y


class BatchNorm(Module):
    def __init__(self, name: str, channels: int, dtype=np.float64):
        self.gamma = Parameter(np.ones(channels, dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype), f"{name}.beta")
        self.running_mean = Parameter(np.zeros(channels, dtype), f"{name}.running_mean", trainable=False)
        self.running_var = Parameter(np.ones(channels, dtype), f"{name}.running_var", trainable=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class Dense(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = Parameter(he_uniform(rng, (d_in, d_out), d_in, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out, dtype), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


class InceptionBlock(Module):
    """Parallel 1x1 / 3x3 / 5x5 branches concatenated on channels, then BN + ReLU."""

    def __init__(self, name: str, c_in: int, branch_channels: int, rng: np.random.Generator,
                 stride: int = 1, dtype=np.float64):
        self.branches = [
            Conv2D(f"{name}.b{k}", c_in, branch_channels, k, rng, stride, "same", bias=False, dtype=dtype)
            for k in (1, 3, 5)
        ]
        self.out_channels = 3 * branch_channels
        self.bn = BatchNorm(f"{name}.bn", self.out_channels, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(inception_concat(x, [b.kernel for b in self.branches], self.branches[0].stride)))


def inception_concat(x: Tensor, kernels, stride: int = 1, biases=None) -> Tensor:
    """Concatenate same-padded convolutions of ``x`` with each kernel."""
    outs = []
    for i, k in enumerate(kernels):
        y = ops.conv2d(x, k, stride, "same")
        if biases is not None and biases[i] is not None:
            y = y + biases[i]
        outs.append(y)
    return ops.concat(outs, axis=-1)


class ResidualBlock(Module):
    """conv-BN-ReLU-conv-BN plus skip, then ReLU. A 1x1 projection joins the
    skip path whenever channels or stride change."""

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator,
                 stride: int = 1, dtype=np.float64):
        self.conv1 = Conv2D(f"{name}.conv1", c_in, c_out, 3, rng, stride, "same", bias=False, dtype=dtype)
        self.bn1 = BatchNorm(f"{name}.bn1", c_out, dtype)
        self.conv2 = Conv2D(f"{name}.conv2", c_out, c_out, 3, rng, 1, "same", bias=False, dtype=dtype)
        self.bn2 = BatchNorm(f"{name}.bn2", c_out, dtype)
        self.projection = None
        if c_in != c_out or stride != 1:
            self.projection = Conv2D(f"{name}.proj", c_in, c_out, 1, rng, stride, "same", bias=True, dtype=dtype)

    def skip(self, x: Tensor) -> Tensor:
        return self.projection(x) if self.projection is not None else x

    def main(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(ops.relu(self.bn1(self.conv1(x)))))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.main(x) + self.skip(x))


class XceptionBlock(Module):
    """Two separable convolutions with BN and a residual skip."""

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator,
                 stride: int = 1, dtype=np.float64):
        self.sep1 = SeparableConv2D(f"{name}.sep1", c_in, c_out, rng, stride, bias=False, dtype=dtype)
        self.bn1 = BatchNorm(f"{name}.bn1", c_out, dtype)
        self.sep2 = SeparableConv2D(f"{name}.sep2", c_out, c_out, rng, 1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm(f"{name}.bn2", c_out, dtype)
        self.projection = None
        if c_in != c_out or stride != 1:
            self.projection = Conv2D(f"{name}.proj", c_in, c_out, 1, rng, stride, "same", bias=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.bn2(self.sep2(ops.relu(self.bn1(self.sep1(x)))))
        skip = self.projection(x) if self.projection is not None else x
        return ops.relu(y + skip)


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch: int, units: int, dtype=np.float64) -> "LstmState":
        return cls(Tensor(np.zeros((batch, units), dtype)), Tensor(np.zeros((batch, units), dtype)))


def lstm_step(x: Tensor, state: LstmState, w_input: Tensor, w_hidden: Tensor,
              bias: Tensor) -> tuple[Tensor, LstmState]:
    """One LSTM update. Gate columns are ordered input, forget, candidate, output."""
    units = w_hidden.shape[0]
    if w_input.shape != (x.shape[-1], 4 * units) or w_hidden.shape != (units, 4 * units) \
            or bias.shape != (4 * units,) or state.hidden.shape[-1] != units or state.cell.shape[-1] != units:
        raise ops.ShapeError(
            f"lstm shapes inconsistent: x {x.shape}, w_input {w_input.shape}, w_hidden {w_hidden.shape}, "
            f"bias {bias.shape}, hidden {state.hidden.shape}, cell {state.cell.shape}")
    z = x @ w_input + state.hidden @ w_hidden + bias
    zi, zf, zg, zo = (_cols(z, j * units, (j + 1) * units) for j in range(4))
    i, f, o = ops.sigmoid(zi), ops.sigmoid(zf), ops.sigmoid(zo)
    g = ops.tanh(zg)
    cell = f * state.cell + i * g
    hidden = o * ops.tanh(cell)
    return hidden, LstmState(hidden, cell)


def _cols(z: Tensor, lo: int, hi: int) -> Tensor:
    def back(g):
        full = np.zeros_like(z.data)
        full[:, lo:hi] = g
        z._accumulate(full)

    return make_result(z.data[:, lo:hi], (z,), back)


class LSTM(Module):
    def __init__(self, name: str, d_in: int, units: int, rng: np.random.Generator, dtype=np.float64):
        self.units = units
        limit = 1.0 / np.sqrt(units)
        self.w_input = Parameter(rng.uniform(-limit, limit, (d_in, 4 * units)).astype(dtype), f"{name}.w_input")
        self.w_hidden = Parameter(rng.uniform(-limit, limit, (units, 4 * units)).astype(dtype), f"{name}.w_hidden")
        self.bias = Parameter(np.zeros(4 * units, dtype), f"{name}.bias")
        self.steps = 0

    def step(self, x: Tensor, state: LstmState) -> tuple[Tensor, LstmState]:
        self.steps += 1
        return lstm_step(x, state, self.w_input, self.w_hidden, self.bias)
