"""Layer helpers on top of the autograd core: parameter init, linear and
conv application, and the stacked gated recurrent cell used by the
confidence controller."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .autograd import (
    DEFAULT_DTYPE,
    Parameter,
    ShapeError,
    Tensor,
    add,
    conv2d,
    dropout,
    matmul,
    mul,
    sigmoid,
    tanh,
)

LSTM_GATES = ("i", "f", "g", "o")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def linear_params(rng: np.random.Generator, n_in: int, n_out: int, dtype=DEFAULT_DTYPE) -> dict:
    return {
        "w": Parameter(uniform_init(rng, (n_in, n_out), n_in, dtype), dtype=dtype),
        "b": Parameter(uniform_init(rng, (n_out,), n_in, dtype), dtype=dtype),
    }


def conv_params(rng: np.random.Generator, c_in: int, c_out: int, k: int, dtype=DEFAULT_DTYPE) -> dict:
    fan_in = c_in * k * k
    return {
        "w": Parameter(uniform_init(rng, (c_out, c_in, k, k), fan_in, dtype), dtype=dtype),
        "b": Parameter(uniform_init(rng, (c_out,), fan_in, dtype), dtype=dtype),
    }


def linear(x: Tensor, p: dict) -> Tensor:
    return add(matmul(x, p["w"].tensor), p["b"].tensor)


def conv(x: Tensor, p: dict, stride: int = 1, pad: int = 0) -> Tensor:
    out = conv2d(x, p["w"].tensor, stride=stride, pad=pad)
    b = p["b"].tensor
    return add(out, b.reshape((1, b.shape[0], 1, 1)))


# ---------------------------------------------------------------------------
# stacked LSTM
# ---------------------------------------------------------------------------


def lstm_stack_params(
    rng: np.random.Generator,
    input_size: int,
    hidden_size: int,
    num_layers: int = 3,
    dtype=DEFAULT_DTYPE,
) -> dict:
    """Per-layer gate matrices. Forget-gate bias starts at 1.0, everything
    else uniform in +/- 1/sqrt(hidden)."""
    params: dict = {}
    for layer in range(num_layers):
        n_in = input_size if layer == 0 else hidden_size
        for gate in LSTM_GATES:
            params[f"lstm{layer}.w_{gate}"] = Parameter(
                uniform_init(rng, (n_in, hidden_size), hidden_size, dtype), dtype=dtype
            )
            params[f"lstm{layer}.u_{gate}"] = Parameter(
                uniform_init(rng, (hidden_size, hidden_size), hidden_size, dtype), dtype=dtype
            )
            bias = uniform_init(rng, (hidden_size,), hidden_size, dtype)
            if gate == "f":
                bias = np.ones(hidden_size, dtype=dtype)
            params[f"lstm{layer}.b_{gate}"] = Parameter(bias, dtype=dtype)
    return params


def lstm_init_state(batch: int, hidden_size: int, num_layers: int = 3, dtype=DEFAULT_DTYPE) -> list:
    zeros = lambda: Tensor(np.zeros((batch, hidden_size), dtype=dtype))
    return [(zeros(), zeros()) for _ in range(num_layers)]


def lstm_stack_step(
    x: Tensor,
    state: list,
    params: dict,
    num_layers: int = 3,
    inter_layer_dropout: float = 0.0,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
):
    """One time step through the LSTM stack.

    state is a list of (h, c) pairs, one per layer; returns the top-layer
    output and the full new state. Dropout sits between layers only.
    """
    if len(state) != num_layers:
        raise ShapeError(f"state has {len(state)} layers, expected {num_layers}")
    new_state = []
    inp = x
    for layer in range(num_layers):
        h_prev, c_prev = state[layer]
        if h_prev.shape[0] != inp.shape[0]:
            raise ShapeError("state batch size does not match input")
        gates = {}
        for gate in LSTM_GATES:
            w = params[f"lstm{layer}.w_{gate}"].tensor
            u = params[f"lstm{layer}.u_{gate}"].tensor
            b = params[f"lstm{layer}.b_{gate}"].tensor
            if w.shape[0] != inp.shape[1]:
                raise ShapeError(
                    f"lstm layer {layer} expects input width {w.shape[0]}, got {inp.shape[1]}"
                )
            gates[gate] = add(add(matmul(inp, w), matmul(h_prev, u)), b)
        i = sigmoid(gates["i"])
        f = sigmoid(gates["f"])
        g = tanh(gates["g"])
        o = sigmoid(gates["o"])
        c_new = add(mul(f, c_prev), mul(i, g))
        h_new = mul(o, tanh(c_new))
        new_state.append((h_new, c_new))
        inp = h_new
        if layer < num_layers - 1 and inter_layer_dropout > 0.0:
            inp = dropout(inp, inter_layer_dropout, train=train, rng=rng)
    return inp, new_state
