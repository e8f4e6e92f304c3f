import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prognet import network as net
from prognet.autograd import Tensor
from prognet.network import (
    ConfigError,
    CostVector,
    NetworkConfig,
    StageSpec,
    TrainingDiverged,
    TrainSchedule,
)

from oracles import conv_macc_by_loops


def rand_batch(rng, shape=(4, 3, 8, 8)):
    return rng.normal(size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------


def test_build_p4_residual_has_four_stages_and_heads():
    model = net.build(net.p4_residual(base_width=8))
    assert model.config.num_stages == 4
    heads = [k for k in model.params if k.startswith("head") and k.endswith(".w")]
    assert sorted(heads) == ["head1.w", "head2.w", "head3.w", "head4.w"]
    assert model.param_count() > 0


def test_build_s9_dense_has_nine_heads_on_one_backbone():
    model = net.build(net.s9_dense(growth=4, base_width=8))
    assert model.config.num_stages == 9
    heads = {k for k in model.params if k.startswith("head") and k.endswith(".w")}
    assert len(heads) == 9
    # single backbone: exactly one stem
    assert "stem.w" in model.params


def test_build_minimal_two_stage_mlp():
    model = net.build(net.desk_mlp(num_stages=2, multipliers=(1, 2)))
    outs = model.forward(np.zeros((1, 3, 8, 8), dtype=np.float32))
    assert len(outs.logits) == 2


def test_build_rejects_unsupported_block_kind():
    cfg = NetworkConfig(
        topology="parallel",
        stages=(StageSpec("nasnet"), StageSpec("nasnet")),
        base_width=8,
        num_classes=3,
        input_shape=(3, 8, 8),
    )
    with pytest.raises(ConfigError):
        net.build(cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        net.desk_mlp(num_stages=1, multipliers=(1,)).validate()
    with pytest.raises(ConfigError):
        net.desk_mlp(num_classes=1).validate()
    cfg = net.desk_mlp()
    bad = NetworkConfig(**{**cfg.__dict__, "stage_weights": (1.0,)})
    with pytest.raises(ConfigError):
        bad.validate()


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_zero_heads_give_zero_logits():
    model = net.build(net.desk_mlp(), init_seed=3)
    for name, p in model.params.items():
        if name.startswith("head"):
            p.tensor.data[:] = 0.0
    outs = model.forward(np.zeros((2, 3, 8, 8), dtype=np.float32))
    for logits in outs.logits:
        np.testing.assert_array_equal(logits.data, 0.0)


@pytest.mark.parametrize("preset", ["parallel", "serial"])
def test_stage_causality_under_last_stage_perturbation(preset):
    model = net.build(net.desk_mlp(topology=preset), init_seed=5)
    x = rand_batch(np.random.default_rng(0))
    before = [o.data.copy() for o in model.forward(x).logits]
    m = model.config.num_stages
    for name, p in model.params.items():
        if name.startswith((f"stage{m}", f"g{m}", f"fuse{m}", f"head{m}")):
            p.tensor.data += 7.0
    after = [o.data.copy() for o in model.forward(x).logits]
    for s in range(m - 1):
        np.testing.assert_array_equal(before[s], after[s])
    assert not np.array_equal(before[m - 1], after[m - 1])


@pytest.mark.parametrize("preset", ["parallel", "serial"])
def test_prefix_execution_reproduces_full_run_logits(preset):
    model = net.build(net.desk_mlp(topology=preset), init_seed=7)
    x = rand_batch(np.random.default_rng(1))
    full = model.forward(x)
    for n in range(1, model.config.num_stages + 1):
        prefix = model.forward(x, upto=n)
        assert len(prefix.logits) == n
        np.testing.assert_array_equal(prefix.logits[-1].data, full.logits[n - 1].data)


def test_fused_carry_starts_as_first_feature():
    model = net.build(net.desk_mlp(), init_seed=2)
    outs = model.forward(rand_batch(np.random.default_rng(2)))
    assert outs.fused[0] is outs.features[0]


def test_forward_rejects_wrong_input_shape():
    model = net.build(net.desk_mlp())
    with pytest.raises(Exception):
        model.forward(np.zeros((2, 3, 9, 9), dtype=np.float32))


def test_residual_forward_shapes():
    model = net.build(net.p4_residual(base_width=8), init_seed=0)
    x = np.random.default_rng(0).normal(size=(2, 3, 32, 32)).astype(np.float32)
    outs = model.forward(x)
    assert [o.shape for o in outs.logits] == [(2, 10)] * 4
    # columns end at 4x4 after the stride-2 stem and two pools
    assert outs.features[0].shape[2:] == (4, 4)


# ---------------------------------------------------------------------------
# joint loss
# ---------------------------------------------------------------------------


def fake_outputs(logits_list):
    return net.StageOutputs(features=[], fused=[], logits=logits_list)


def test_joint_loss_sums_weighted_stage_losses():
    # two stages engineered to CE = ln2 each; weights 1,1 -> 2 ln2
    logits = [Tensor(np.zeros((1, 2)), dtype=np.float64) for _ in range(2)]
    loss = net.joint_loss(fake_outputs(logits), np.array([0]), [1.0, 1.0])
    assert loss.item() == pytest.approx(2 * math.log(2), rel=1e-12)


def test_joint_loss_zero_weight_masks_stage_gradient():
    model = net.build(net.desk_mlp(num_stages=2, multipliers=(1, 1)), init_seed=0)
    x = rand_batch(np.random.default_rng(3))
    labels = np.array([0, 1, 2, 0])
    outs = model.forward(x)
    loss = net.joint_loss(outs, labels, [1.0, 0.0])
    loss.backward()
    np.testing.assert_array_equal(model.params["head2.w"].tensor.grad, 0.0)
    assert np.any(model.params["head1.w"].tensor.grad != 0.0)


def test_joint_loss_matches_per_stage_oracle():
    rng = np.random.default_rng(9)
    labels = np.array([1, 0, 2])
    logits = [rng.normal(size=(3, 3)) for _ in range(3)]
    weights = [1.0, 0.5, 2.0]

    def ce(rows):
        total = 0.0
        for row, lab in zip(rows, labels):
            p = np.exp(row - row.max())
            total += -math.log(p[lab] / p.sum())
        return total / len(labels)

    expected = sum(w * ce(l) for w, l in zip(weights, logits))
    loss = net.joint_loss(
        fake_outputs([Tensor(l, dtype=np.float64) for l in logits]), labels, weights
    )
    assert loss.item() == pytest.approx(expected, rel=1e-9)


def test_joint_loss_weight_length_checked():
    logits = [Tensor(np.zeros((1, 2)))]
    with pytest.raises(Exception):
        net.joint_loss(fake_outputs(logits), np.array([0]), [1.0, 1.0])


# ---------------------------------------------------------------------------
# MACC accounting
# ---------------------------------------------------------------------------


def test_conv_macc_reference_case():
    assert net.conv_macc(3, 16, 32, 8, 8) == 294_912
    assert conv_macc_by_loops(3, 16, 32, 8, 8) == 294_912


@given(
    k=st.sampled_from([1, 3, 5]),
    c_in=st.integers(1, 8),
    c_out=st.integers(1, 8),
    h=st.integers(1, 10),
    w=st.integers(1, 10),
)
def test_conv_macc_matches_loop_count(k, c_in, c_out, h, w):
    assert net.conv_macc(k, c_in, c_out, h, w) == conv_macc_by_loops(k, c_in, c_out, h, w)


def test_cost_vector_symmetry_and_simplex():
    cost = CostVector((1234, 1234))
    np.testing.assert_allclose(cost.normalized, [0.5, 0.5])
    assert cost.prefix[-1] == pytest.approx(1.0)


def test_cost_vector_rejects_nonpositive():
    with pytest.raises(ConfigError):
        CostVector((10, 0))


@pytest.mark.parametrize("cfg", [net.p4_residual(8), net.s9_dense(4, 8), net.desk_mlp()])
def test_cost_prefix_strictly_increasing(cfg):
    model = net.build(cfg)
    prefix = model.cost.prefix
    assert np.all(np.diff(prefix) > 0)
    assert prefix[-1] == pytest.approx(1.0)
    assert np.all(model.cost.normalized > 0)


def test_macc_count_returns_model_cost():
    model = net.build(net.desk_mlp())
    assert net.macc_count(model) is model.cost


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def synthetic_blob(rng, n=64, classes=3, shape=(3, 8, 8)):
    labels = rng.integers(0, classes, size=n)
    centers = rng.normal(size=(classes,) + shape).astype(np.float32)
    images = centers[labels] + 0.3 * rng.normal(size=(n,) + shape).astype(np.float32)
    return images.astype(np.float32), labels


def test_train_base_loss_strictly_decreases_full_batch():
    rng = np.random.default_rng(0)
    images, labels = synthetic_blob(rng)
    model = net.build(net.desk_mlp(), init_seed=0)
    # full-batch steps so successive losses are directly comparable
    sched = TrainSchedule(epochs=10, batch_size=64, lr=0.01, momentum=0.0, weight_decay=0.0)
    result = net.train_base(model, images, labels, images, labels, sched, seed=0)
    losses = [row["train_loss"] for row in result.history]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_base_lr_zero_is_noop():
    rng = np.random.default_rng(1)
    images, labels = synthetic_blob(rng, n=32)
    model = net.build(net.desk_mlp(), init_seed=1)
    before = model.state_dict()
    sched = TrainSchedule(epochs=2, batch_size=16, lr=0.0, momentum=0.9, weight_decay=0.0)
    net.train_base(model, images, labels, images, labels, sched, seed=1)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_decay_epochs_match_stated_fractions():
    assert net.decay_epochs(60) == [15, 30, 48]
    assert net.decay_epochs(350) == [88, 175, 280]
    # rate drops only after a milestone epoch completes
    assert net.lr_at_epoch(15, 60, 0.1) == pytest.approx(0.1)
    assert net.lr_at_epoch(16, 60, 0.1) == pytest.approx(0.01)
    assert net.lr_at_epoch(49, 60, 0.1) == pytest.approx(1e-4)
    assert net.lr_at_epoch(1, 1, 0.1) == pytest.approx(0.1)


def test_train_base_divergence_aborts_with_diagnostic():
    rng = np.random.default_rng(2)
    images, labels = synthetic_blob(rng, n=16)
    model = net.build(net.desk_mlp(), init_seed=2)
    for p in model.params.values():
        p.tensor.data[:] = 1e30
    sched = TrainSchedule(epochs=1, batch_size=16, lr=0.1, momentum=0.0, weight_decay=0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDiverged, match="epoch 1"):
            net.train_base(model, images, labels, images, labels, sched, seed=0)


def test_train_base_keeps_best_mean_accuracy_state():
    rng = np.random.default_rng(3)
    images, labels = synthetic_blob(rng, n=48)
    model = net.build(net.desk_mlp(), init_seed=3)
    sched = TrainSchedule(epochs=3, batch_size=16, lr=0.05, momentum=0.9, weight_decay=0.0)
    result = net.train_base(model, images, labels, images, labels, sched, seed=3)
    best_from_history = max(row["val_acc_mean"] for row in result.history)
    assert result.best_metric == pytest.approx(best_from_history)
    assert set(result.best_state) == set(model.params)
