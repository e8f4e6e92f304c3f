import numpy as np
import pytest

from prognet import autograd as ag
from prognet import nn
from prognet.autograd import ShapeError, Tensor

from oracles import finite_difference_grads, max_rel_err


def zero_lstm_params(input_size, hidden, layers):
    params = nn.lstm_stack_params(np.random.default_rng(0), input_size, hidden, layers, dtype=np.float64)
    for p in params.values():
        p.tensor.data[:] = 0.0
    return params


def test_lstm_zero_everything_gives_zero_output():
    params = zero_lstm_params(3, 4, 3)
    state = nn.lstm_init_state(2, 4, 3, dtype=np.float64)
    x = Tensor(np.zeros((2, 3)), dtype=np.float64)
    out, new_state = nn.lstm_stack_step(x, state, params, num_layers=3)
    np.testing.assert_array_equal(out.data, 0.0)
    for h, c in new_state:
        np.testing.assert_array_equal(h.data, 0.0)
        np.testing.assert_array_equal(c.data, 0.0)


def test_lstm_step_is_pure():
    rng = np.random.default_rng(4)
    params = nn.lstm_stack_params(rng, 5, 6, 3, dtype=np.float64)
    x = Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
    out1, _ = nn.lstm_stack_step(x, nn.lstm_init_state(3, 6, 3, dtype=np.float64), params)
    out2, _ = nn.lstm_stack_step(x, nn.lstm_init_state(3, 6, 3, dtype=np.float64), params)
    np.testing.assert_array_equal(out1.data, out2.data)


def test_lstm_forget_bias_initialized_to_one():
    params = nn.lstm_stack_params(np.random.default_rng(0), 3, 8, 3)
    for layer in range(3):
        np.testing.assert_array_equal(params[f"lstm{layer}.b_f"].data, 1.0)


def test_lstm_state_layer_count_checked():
    params = zero_lstm_params(3, 4, 3)
    with pytest.raises(ShapeError):
        nn.lstm_stack_step(Tensor(np.zeros((1, 3))), nn.lstm_init_state(1, 4, 2), params, num_layers=3)


def test_lstm_input_width_checked():
    params = zero_lstm_params(3, 4, 3)
    with pytest.raises(ShapeError):
        nn.lstm_stack_step(
            Tensor(np.zeros((1, 5))), nn.lstm_init_state(1, 4, 3), params, num_layers=3
        )


def test_lstm_gradient_through_three_steps_vs_finite_differences():
    rng = np.random.default_rng(17)
    input_size, hidden, layers, batch = 3, 4, 3, 2
    params = nn.lstm_stack_params(rng, input_size, hidden, layers, dtype=np.float64)
    xs = [rng.normal(size=(batch, input_size)) for _ in range(3)]
    proj = rng.normal(size=(batch, hidden))

    names = sorted(params)
    arrays = [params[k].data.copy() for k in names]

    def run(arrs, collect_grads=False):
        p = {
            k: type(params[k])(a.copy(), dtype=np.float64) for k, a in zip(names, arrs)
        }
        state = nn.lstm_init_state(batch, hidden, layers, dtype=np.float64)
        out = None
        for x in xs:
            out, state = nn.lstm_stack_step(Tensor(x, dtype=np.float64), state, p, num_layers=layers)
        loss = ag.tsum(ag.mul(out, Tensor(proj, dtype=np.float64)))
        if collect_grads:
            loss.backward()
            return [p[k].tensor.grad for k in names]
        return loss.item()

    fd = finite_difference_grads(lambda *arrs: run(list(arrs)), arrays, h=1e-5)
    analytic = run(arrays, collect_grads=True)
    worst = max(max_rel_err(a, f) for a, f in zip(analytic, fd))
    assert worst < 1e-3


def test_inter_layer_dropout_only_in_train_mode():
    rng = np.random.default_rng(8)
    params = nn.lstm_stack_params(rng, 3, 4, 3, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
    eval_out, _ = nn.lstm_stack_step(
        x, nn.lstm_init_state(2, 4, 3, dtype=np.float64), params, inter_layer_dropout=0.5, train=False
    )
    eval_out2, _ = nn.lstm_stack_step(
        x, nn.lstm_init_state(2, 4, 3, dtype=np.float64), params, inter_layer_dropout=0.5, train=False
    )
    np.testing.assert_array_equal(eval_out.data, eval_out2.data)
    train_out, _ = nn.lstm_stack_step(
        x,
        nn.lstm_init_state(2, 4, 3, dtype=np.float64),
        params,
        inter_layer_dropout=0.5,
        train=True,
        rng=np.random.default_rng(1),
    )
    assert not np.array_equal(train_out.data, eval_out.data)


def test_linear_layer_shapes_and_gradient():
    rng = np.random.default_rng(2)
    p = nn.linear_params(rng, 4, 3, dtype=np.float64)
    x = Tensor(rng.normal(size=(5, 4)), dtype=np.float64, requires_grad=True)
    out = nn.linear(x, p)
    assert out.shape == (5, 3)
    ag.tsum(out).backward()
    assert p["w"].tensor.grad.shape == (4, 3)
    assert p["b"].tensor.grad.shape == (3,)


def test_conv_layer_bias_broadcasts():
    rng = np.random.default_rng(2)
    p = nn.conv_params(rng, 2, 3, 3, dtype=np.float64)
    p["w"].tensor.data[:] = 0.0
    p["b"].tensor.data[:] = np.array([1.0, 2.0, 3.0])
    x = Tensor(np.zeros((1, 2, 4, 4)), dtype=np.float64)
    out = nn.conv(x, p, stride=1, pad=1)
    for c, val in enumerate([1.0, 2.0, 3.0]):
        np.testing.assert_array_equal(out.data[:, c], val)


def test_uniform_init_bounds():
    rng = np.random.default_rng(0)
    arr = nn.uniform_init(rng, (1000,), fan_in=16)
    assert np.all(np.abs(arr) <= 0.25)
