"""The progressive multi-stage classifier.

A model is a sequence of M stages. Each stage contributes new features,
those features are fused with everything carried over from earlier
stages, and a per-stage head turns the fused features into class logits.
Inference can stop after any stage, which is the whole point.

Two topologies:

* parallel  - M independent thin columns over the input whose widths
              scale with per-stage multipliers; fusion is channel
              concatenation followed by a 1x1 conv at the final feature
              map resolution.
* serial    - one backbone with M tap points; each tap global-pools the
              current feature map and concatenates it onto the running
              pooled-feature carry that feeds the per-stage heads.

Block kinds: "residual" (parallel), "dense" (serial), and "mlp", a
test-only kind for both topologies that keeps property tests in the
millisecond range while obeying every stage/fusion contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import nn
from .autograd import (
    NumericsError,
    ShapeError,
    Tensor,
    add,
    concat,
    cross_entropy,
    global_avg_pool,
    max_pool2d,
    mul,
    no_grad,
    relu,
    reshape,
)
from .optim import sgd_step


class ConfigError(ValueError):
    """Invalid network configuration."""


class TrainingDiverged(RuntimeError):
    """Training hit NaN/Inf; optimizer state is not recoverable."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

SUPPORTED_BLOCKS = {
    "parallel": ("residual", "mlp"),
    "serial": ("dense", "mlp"),
}


@dataclass(frozen=True)
class StageSpec:
    block_kind: str
    width_multiplier: int = 1
    depth_per_resolution: tuple = (1,)
    growth_k: int = 12


@dataclass(frozen=True)
class NetworkConfig:
    topology: str
    stages: tuple  # of StageSpec, length M >= 2
    base_width: int
    num_classes: int
    input_shape: tuple  # (C, H, W)
    stage_weights: tuple = ()
    serial_pools: tuple = ()  # serial only: pool after these stage indices (1-based)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def weights(self) -> tuple:
        return self.stage_weights if self.stage_weights else (1.0,) * self.num_stages

    def validate(self) -> None:
        if self.topology not in SUPPORTED_BLOCKS:
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.num_stages < 2:
            raise ConfigError(f"need at least 2 stages, got {self.num_stages}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.base_width < 1:
            raise ConfigError("base_width must be positive")
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (C, H, W)")
        if self.stage_weights and len(self.stage_weights) != self.num_stages:
            raise ConfigError(
                f"stage_weights length {len(self.stage_weights)} != {self.num_stages} stages"
            )
        kinds = {s.block_kind for s in self.stages}
        if len(kinds) != 1:
            raise ConfigError(f"mixed block kinds are unsupported: {sorted(kinds)}")
        kind = self.stages[0].block_kind
        if kind not in SUPPORTED_BLOCKS[self.topology]:
            raise ConfigError(
                f"unsupported block kind {kind!r} for topology {self.topology!r}"
            )
        for i, s in enumerate(self.stages, 1):
            if s.width_multiplier < 1:
                raise ConfigError(f"stage {i}: width_multiplier must be >= 1")
            if len(s.depth_per_resolution) == 0:
                raise ConfigError(f"stage {i}: depth list is empty")
            if any(d < 0 for d in s.depth_per_resolution):
                raise ConfigError(f"stage {i}: negative block count")
        if self.topology == "serial":
            for p in self.serial_pools:
                if not 1 <= p < self.num_stages:
                    raise ConfigError(f"serial pool index {p} out of range")

    @property
    def block_kind(self) -> str:
        return self.stages[0].block_kind


# ready-made configurations
def p4_residual(base_width: int = 16, num_classes: int = 10) -> NetworkConfig:
    """4-stage parallel residual net for 32x32 inputs, multipliers 1,1,2,3."""
    return NetworkConfig(
        topology="parallel",
        stages=tuple(
            StageSpec("residual", m, depth_per_resolution=(2, 3, 3)) for m in (1, 1, 2, 3)
        ),
        base_width=base_width,
        num_classes=num_classes,
        input_shape=(3, 32, 32),
    )


def p6_residual(base_width: int = 16, num_classes: int = 10) -> NetworkConfig:
    """6-stage parallel residual net, multipliers 1,1,1,2,3,4."""
    return NetworkConfig(
        topology="parallel",
        stages=tuple(
            StageSpec("residual", m, depth_per_resolution=(2, 3, 3))
            for m in (1, 1, 1, 2, 3, 4)
        ),
        base_width=base_width,
        num_classes=num_classes,
        input_shape=(3, 32, 32),
    )


def s9_dense(growth: int = 12, base_width: int = 24, num_classes: int = 10) -> NetworkConfig:
    """9-head serial dense net: taps after each block group, pools between
    resolutions, final head after global pooling."""
    groups = (2, 2, 2, 2, 2, 2, 3, 3)
    stages = tuple(
        StageSpec("dense", 1, depth_per_resolution=(g,), growth_k=growth) for g in groups
    ) + (StageSpec("dense", 1, depth_per_resolution=(0,), growth_k=growth),)
    return NetworkConfig(
        topology="serial",
        stages=stages,
        base_width=base_width,
        num_classes=num_classes,
        input_shape=(3, 32, 32),
        serial_pools=(3, 6),
    )


def desk_mlp(
    num_stages: int = 4,
    multipliers: tuple = (1, 1, 2, 3),
    base_width: int = 16,
    depth=1,
    num_classes: int = 3,
    input_shape: tuple = (3, 8, 8),
    topology: str = "parallel",
) -> NetworkConfig:
    """Test-only mlp-block configuration that trains in seconds.

    depth may be a single int or a per-stage tuple of layer counts.
    """
    if len(multipliers) != num_stages:
        raise ConfigError("multipliers length must equal num_stages")
    depths = depth if isinstance(depth, (tuple, list)) else (depth,) * num_stages
    if len(depths) != num_stages:
        raise ConfigError("depth tuple length must equal num_stages")
    return NetworkConfig(
        topology=topology,
        stages=tuple(
            StageSpec("mlp", m, depth_per_resolution=(d,))
            for m, d in zip(multipliers, depths)
        ),
        base_width=base_width,
        num_classes=num_classes,
        input_shape=input_shape,
    )


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def conv_macc(k: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    """Multiply-accumulates of one conv layer per image: every output pixel
    runs a k*k*c_in dot product."""
    return k * k * c_in * c_out * h_out * w_out


def fc_macc(n_in: int, n_out: int) -> int:
    return n_in * n_out


@dataclass(frozen=True)
class CostVector:
    """Per-stage compute, raw MACC and normalized to the unit simplex."""

    raw: tuple

    def __post_init__(self):
        if any(r <= 0 for r in self.raw):
            raise ConfigError("every stage must have positive cost")

    @property
    def normalized(self) -> np.ndarray:
        raw = np.asarray(self.raw, dtype=np.float64)
        return raw / raw.sum()

    @property
    def prefix(self) -> np.ndarray:
        """Cumulative normalized cost of running stages 1..m."""
        return np.cumsum(self.normalized)

    def __len__(self) -> int:
        return len(self.raw)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class StageOutputs:
    features: list  # F_n per stage
    fused: list  # carried fused feature per stage; fused[0] is features[0]
    logits: list  # pre-softmax class scores per stage


class Model:
    """Built progressive network: parameters plus the forward program."""

    def __init__(self, config: NetworkConfig, params: dict, cost: CostVector):
        self.config = config
        self.params = params
        self.cost = cost

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list:
        return [self.params[k] for k in sorted(self.params)]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = sorted(set(self.params) - set(state))
        unknown = sorted(set(state) - set(self.params))
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={missing}, unknown={unknown}")
        for k, arr in state.items():
            self.params[k].data = np.asarray(arr)

    def _p(self, prefix: str) -> dict:
        return {"w": self.params[f"{prefix}.w"], "b": self.params[f"{prefix}.b"]}

    # -- forward ------------------------------------------------------------

    def _as_input(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        expected = self.config.input_shape
        if x.data.ndim != 4 or tuple(x.data.shape[1:]) != tuple(expected):
            raise ShapeError(
                f"batch shape {tuple(x.data.shape)} does not match input {expected}"
            )
        return x

    def iter_stages(self, batch) -> Iterator[tuple]:
        """Lazily yield (feature, fused, logits) stage by stage.

        Stopping early really does skip the remaining stages' compute,
        so the early-termination engine consumes this directly.
        """
        x = self._as_input(batch)
        if self.config.topology == "parallel":
            yield from self._iter_parallel(x)
        else:
            yield from self._iter_serial(x)

    def forward(self, batch, upto: Optional[int] = None) -> StageOutputs:
        """Run stages 1..upto (default all M) in one pass."""
        m = self.config.num_stages if upto is None else upto
        if not 1 <= m <= self.config.num_stages:
            raise ShapeError(f"upto must be in 1..{self.config.num_stages}")
        outs = StageOutputs([], [], [])
        for feature, fused, logits in self.iter_stages(batch):
            outs.features.append(feature)
            outs.fused.append(fused)
            outs.logits.append(logits)
            if len(outs.logits) == m:
                break
        return outs

    # -- parallel topology ----------------------------------------------------

    def _column(self, x: Tensor, n: int) -> Tensor:
        cfg = self.config
        spec = cfg.stages[n - 1]
        width = cfg.base_width * spec.width_multiplier
        prefix = f"stage{n}"
        if spec.block_kind == "mlp":
            batch = x.shape[0]
            h = reshape(x, (batch, int(np.prod(cfg.input_shape))))
            layers = sum(spec.depth_per_resolution)
            for i in range(layers):
                h = nn.linear(h, self._p(f"{prefix}.l{i}"))
                if i < layers - 1:  # embedding-style column: last layer stays linear
                    h = relu(h)
            return reshape(h, (batch, width, 1, 1))
        h = relu(nn.conv(x, self._p(f"{prefix}.stem"), stride=2, pad=1))
        n_res = len(spec.depth_per_resolution)
        for r, blocks in enumerate(spec.depth_per_resolution):
            for i in range(blocks):
                t = relu(nn.conv(h, self._p(f"{prefix}.r{r}_{i}.c1"), stride=1, pad=1))
                t = nn.conv(t, self._p(f"{prefix}.r{r}_{i}.c2"), stride=1, pad=1)
                h = relu(add(h, t))
            if r < n_res - 1:
                h = max_pool2d(h, kernel=3, stride=2, pad=1)
        return h

    def _iter_parallel(self, x: Tensor) -> Iterator[tuple]:
        fused = None
        for n in range(1, self.config.num_stages + 1):
            feature = self._column(x, n)
            if fused is None:
                fused = feature
            else:
                stacked = concat([fused, feature], axis=1)
                fused = relu(nn.conv(stacked, self._p(f"fuse{n}"), stride=1, pad=0))
            logits = nn.linear(global_avg_pool(fused), self._p(f"head{n}"))
            yield feature, fused, logits

    # -- serial topology ------------------------------------------------------

    def _iter_serial(self, x: Tensor) -> Iterator[tuple]:
        cfg = self.config
        kind = cfg.block_kind
        batch = x.shape[0]
        if kind == "mlp":
            h = relu(nn.linear(reshape(x, (batch, int(np.prod(cfg.input_shape)))), self._p("stem")))
        else:
            h = relu(nn.conv(x, self._p("stem"), stride=2, pad=1))
        carry = None
        for n in range(1, cfg.num_stages + 1):
            spec = cfg.stages[n - 1]
            for i in range(sum(spec.depth_per_resolution)):
                if kind == "mlp":
                    h = relu(nn.linear(h, self._p(f"g{n}.b{i}")))
                else:
                    grown = relu(nn.conv(h, self._p(f"g{n}.b{i}"), stride=1, pad=1))
                    h = concat([h, grown], axis=1)
            feature = h if kind == "mlp" else global_avg_pool(h)
            carry = feature if carry is None else concat([carry, feature], axis=1)
            logits = nn.linear(carry, self._p(f"head{n}"))
            yield feature, carry, logits
            if n in cfg.serial_pools and kind != "mlp":
                h = max_pool2d(h, kernel=3, stride=2, pad=1)


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------


def _half(size: int) -> int:
    # 3x3 stride-2 with pad 1, floor arithmetic
    return (size + 2 - 3) // 2 + 1


def build(config: NetworkConfig, init_seed: int = 0) -> Model:
    """Instantiate parameters and the per-stage MACC account for a config."""
    config.validate()
    rng = np.random.default_rng(init_seed)
    params: dict = {}
    c_in, h_in, w_in = config.input_shape
    classes = config.num_classes
    stage_macc = [0] * config.num_stages

    def add_linear(name, n_in, n_out, stage):
        params.update({f"{name}.{k}": v for k, v in nn.linear_params(rng, n_in, n_out).items()})
        stage_macc[stage - 1] += fc_macc(n_in, n_out)

    def add_conv(name, ci, co, k, h_out, w_out, stage):
        params.update({f"{name}.{k_}": v for k_, v in nn.conv_params(rng, ci, co, k).items()})
        stage_macc[stage - 1] += conv_macc(k, ci, co, h_out, w_out)

    if config.topology == "parallel":
        fused_ch = 0
        final_hw = None
        for n, spec in enumerate(config.stages, 1):
            width = config.base_width * spec.width_multiplier
            if spec.block_kind == "mlp":
                d = int(np.prod(config.input_shape))
                for i in range(sum(spec.depth_per_resolution)):
                    add_linear(f"stage{n}.l{i}", d if i == 0 else width, width, n)
                final_hw = (1, 1)
            else:
                h, w = _half(h_in), _half(w_in)
                add_conv(f"stage{n}.stem", c_in, width, 3, h, w, n)
                n_res = len(spec.depth_per_resolution)
                for r, blocks in enumerate(spec.depth_per_resolution):
                    for i in range(blocks):
                        add_conv(f"stage{n}.r{r}_{i}.c1", width, width, 3, h, w, n)
                        add_conv(f"stage{n}.r{r}_{i}.c2", width, width, 3, h, w, n)
                    if r < n_res - 1:
                        h, w = _half(h), _half(w)
                final_hw = (h, w)
            if n == 1:
                fused_ch = width
            else:
                add_conv(f"fuse{n}", fused_ch + width, width, 1, final_hw[0], final_hw[1], n)
                fused_ch = width
            add_linear(f"head{n}", fused_ch, classes, n)
    else:
        kind = config.block_kind
        h, w = (_half(h_in), _half(w_in)) if kind != "mlp" else (1, 1)
        width = config.base_width
        if kind == "mlp":
            add_linear("stem", int(np.prod(config.input_shape)), width, 1)
            channels = width
        else:
            add_conv("stem", c_in, width, 3, h, w, 1)
            channels = width
        carry_len = 0
        for n, spec in enumerate(config.stages, 1):
            growth = spec.growth_k
            for i in range(sum(spec.depth_per_resolution)):
                if kind == "mlp":
                    add_linear(f"g{n}.b{i}", channels, width, n)
                    channels = width
                else:
                    add_conv(f"g{n}.b{i}", channels, growth, 3, h, w, n)
                    channels += growth
            carry_len += channels
            add_linear(f"head{n}", carry_len, classes, n)
            if n in config.serial_pools and kind != "mlp":
                h, w = _half(h), _half(w)

    cost = CostVector(tuple(stage_macc))
    return Model(config, params, cost)


def macc_count(model: Model) -> CostVector:
    """Analytic per-stage multiply-accumulate account of a built model."""
    return model.cost


# ---------------------------------------------------------------------------
# joint loss and base training
# ---------------------------------------------------------------------------


def joint_loss(outputs: StageOutputs, labels: np.ndarray, weights) -> Tensor:
    """Weighted sum over stages of per-head cross-entropy."""
    if len(weights) != len(outputs.logits):
        raise ShapeError(
            f"{len(weights)} weights for {len(outputs.logits)} stages"
        )
    total = None
    for w, logits in zip(weights, outputs.logits):
        term = mul(cross_entropy(logits, labels), float(w))
        total = term if total is None else add(total, term)
    return total


def decay_epochs(total_epochs: int, fractions=(0.25, 0.5, 0.8)) -> list:
    """Epoch milestones at the configured fractions of the run."""
    return [math.ceil(f * total_epochs) for f in fractions]


def lr_at_epoch(epoch: int, total_epochs: int, lr0: float, factor: float = 0.1,
                fractions=(0.25, 0.5, 0.8)) -> float:
    """Step schedule: the rate drops by `factor` after each milestone epoch
    completes, so a 1-epoch run trains entirely at lr0."""
    drops = sum(1 for b in decay_epochs(total_epochs, fractions) if epoch > b)
    return lr0 * factor**drops


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int
    batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_factor: float = 0.1
    decay_fractions: tuple = (0.25, 0.5, 0.8)


@dataclass
class TrainResult:
    history: list  # one dict per epoch
    best_state: dict
    best_epoch: int
    best_metric: float


def _to_float_batch(images: np.ndarray) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(np.float32) / 255.0
    return images.astype(np.float32, copy=False)


def evaluate_heads(model: Model, images: np.ndarray, labels: np.ndarray,
                   batch_size: int = 512) -> np.ndarray:
    """Per-stage accuracy of the evaluation heads on a dataset."""
    m = model.config.num_stages
    correct = np.zeros(m, dtype=np.int64)
    with no_grad():
        for start in range(0, len(labels), batch_size):
            xb = _to_float_batch(images[start : start + batch_size])
            yb = labels[start : start + batch_size]
            outs = model.forward(xb)
            for s, logits in enumerate(outs.logits):
                correct[s] += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / len(labels)


def train_base(
    model: Model,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    schedule: TrainSchedule,
    seed: int = 0,
    augment_fn: Optional[Callable[[np.ndarray, np.random.Generator], np.ndarray]] = None,
    log_fn: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """SGD on the joint loss with the step-decay schedule; keeps the
    checkpoint with the best mean per-stage validation accuracy."""
    if len(train_labels) == 0:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(seed)
    weights = model.config.weights()
    params = model.parameters()
    history = []
    best_metric = -1.0
    best_state = model.state_dict()
    best_epoch = 0
    for epoch in range(1, schedule.epochs + 1):
        lr = lr_at_epoch(epoch, schedule.epochs, schedule.lr, schedule.decay_factor,
                         schedule.decay_fractions)
        order = rng.permutation(len(train_labels))
        losses = []
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            xb = train_images[idx]
            xb = augment_fn(xb, rng) if augment_fn is not None else _to_float_batch(xb)
            try:
                outs = model.forward(xb)
                loss = joint_loss(outs, train_labels[idx], weights)
                loss_val = loss.item()
                loss.backward()
                sgd_step(params, lr=lr, momentum=schedule.momentum,
                         weight_decay=schedule.weight_decay)
            except NumericsError as exc:
                raise TrainingDiverged(
                    f"non-finite values at epoch {epoch}, step {start // schedule.batch_size}, "
                    f"lr {lr}: {exc}"
                ) from exc
            losses.append(loss_val)
        stage_acc = evaluate_heads(model, val_images, val_labels)
        mean_acc = float(stage_acc.mean())
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
               "val_acc": [float(a) for a in stage_acc], "val_acc_mean": mean_acc}
        history.append(row)
        if log_fn is not None:
            log_fn(row)
        if mean_acc > best_metric:
            best_metric = mean_acc
            best_state = model.state_dict()
            best_epoch = epoch
    return TrainResult(history, best_state, best_epoch, best_metric)
