"""Runtime termination engine and evaluator.

Three modes over a trained model (and controller, where applicable):

* dynamic(t) - run stages sequentially, stop at the first controller
  confidence >= t (the final stage always stops); the prediction is the
  controller's refined class output at the emit stage.
* fixed(m)   - run exactly m stages, predict from the stage-m evaluation
  head; the controller is never consulted, so this exercises the base
  network as a plain non-progressive net.
* random(s)  - emit stage uniform in 1..M per image; prediction from the
  evaluation head at that stage.

Cost is always the prefix sum of the model's normalized per-stage MACC
account at the emit stage, looked up from one shared table so the cost
identity is exact by construction and checkable against re-runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .autograd import ShapeError, Tensor, no_grad
from .controller import Controller, ThresholdGrid
from .network import Model, _to_float_batch
from . import nn


class PolicyError(ValueError):
    """Invalid policy mode parameters."""


@dataclass(frozen=True)
class PolicyMode:
    kind: str  # dynamic | fixed | random
    t: Optional[float] = None
    m: Optional[int] = None
    seed: Optional[int] = None

    @classmethod
    def dynamic(cls, t: float) -> "PolicyMode":
        if not 0.0 < t < 1.0:
            raise PolicyError(f"dynamic threshold must be in (0, 1), got {t}")
        return cls("dynamic", t=float(t))

    @classmethod
    def fixed(cls, m: int) -> "PolicyMode":
        if m < 1:
            raise PolicyError(f"fixed stage must be >= 1, got {m}")
        return cls("fixed", m=int(m))

    @classmethod
    def random(cls, seed: int) -> "PolicyMode":
        return cls("random", seed=int(seed))

    def check_against(self, model: Model) -> None:
        if self.kind == "fixed" and not 1 <= self.m <= model.config.num_stages:
            raise PolicyError(
                f"fixed stage {self.m} out of range 1..{model.config.num_stages}"
            )


@dataclass
class StageTrace:
    """Per-image record: everything observed up to and including the emit
    stage, and nothing past it."""

    image_id: int
    logits: list  # per executed stage, np arrays of head logits
    confidences: list  # per executed stage (dynamic mode only)
    emit_stage: int
    predicted: int
    correct: int
    cost: float

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "emit_stage": self.emit_stage,
            "predicted": self.predicted,
            "correct": self.correct,
            "cost": self.cost,
            "confidences": [float(c) for c in self.confidences],
        }


@dataclass
class EvalResult:
    accuracy: float
    mean_cost: float
    emit_hist: np.ndarray  # counts per stage, sums to dataset size
    traces: Optional[list] = None


@dataclass
class SweepRow:
    t: float
    mean_cost: float
    accuracy: float
    emit_hist: np.ndarray
    wall_ms_mean: float = 0.0


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    CSV_HEADER_PREFIX = "t,mean_cost,accuracy"

    def csv_text(self) -> str:
        m = len(self.rows[0].emit_hist) if self.rows else 0
        header = (
            self.CSV_HEADER_PREFIX
            + "".join(f",emit_hist_{i}" for i in range(1, m + 1))
            + ",wall_ms_mean"
        )
        lines = [header]
        for r in sorted(self.rows, key=lambda r: r.t):
            hist = ",".join(str(int(h)) for h in r.emit_hist)
            lines.append(f"{r.t!r},{r.mean_cost!r},{r.accuracy!r},{hist},{r.wall_ms_mean!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.csv_text())


# ---------------------------------------------------------------------------
# single-image inference (true early stopping)
# ---------------------------------------------------------------------------


def infer_one(model: Model, controller: Optional[Controller], image: np.ndarray,
              label: int, mode: PolicyMode, image_id: int = 0) -> StageTrace:
    """Run one image under a policy, executing only the stages it needs."""
    mode.check_against(model)
    num_stages = model.config.num_stages
    prefix = model.cost.prefix
    x = _to_float_batch(image[None])
    if mode.kind == "random":
        rng = np.random.default_rng([mode.seed, image_id])
        stop_at = int(rng.integers(1, num_stages + 1))
    elif mode.kind == "fixed":
        stop_at = mode.m
    else:
        stop_at = num_stages  # upper bound; controller decides earlier
        if controller is None:
            raise PolicyError("dynamic mode needs a controller")
        state = controller.begin_state(batch=1)

    logits_seen, confs_seen = [], []
    predicted = None
    emit = stop_at
    with no_grad():
        for n, (_, _, logits) in enumerate(model.iter_stages(x), start=1):
            logits_seen.append(logits.data[0].copy())
            if mode.kind == "dynamic":
                class_scores, conf, state = controller.step(logits, state, stage_idx=n - 1)
                conf = float(conf[0])
                confs_seen.append(conf)
                if conf >= mode.t or n == num_stages:
                    emit = n
                    predicted = int(class_scores[0].argmax())
                    break
            elif n == stop_at:
                emit = n
                predicted = int(logits.data[0].argmax())
                break
    cost = float(prefix[emit - 1])
    return StageTrace(
        image_id=image_id,
        logits=logits_seen,
        confidences=confs_seen,
        emit_stage=emit,
        predicted=predicted,
        correct=int(predicted == int(label)),
        cost=cost,
    )


# ---------------------------------------------------------------------------
# batched evaluation
# ---------------------------------------------------------------------------


def _head_logits(model: Model, images: np.ndarray, batch_size: int) -> np.ndarray:
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            outs = model.forward(_to_float_batch(images[start : start + batch_size]))
            chunks.append(np.stack([o.data for o in outs.logits], axis=1))
    return np.concatenate(chunks, axis=0)


def _dynamic_emit(confs: np.ndarray, t: float) -> np.ndarray:
    """Vectorized emit rule over (N, M) confidences, 1-based stages."""
    n, m = confs.shape
    cleared = confs >= t
    has = cleared.any(axis=1)
    first = cleared.argmax(axis=1)
    return np.where(has, first + 1, m)


def evaluate(
    model: Model,
    controller: Optional[Controller],
    images: np.ndarray,
    labels: np.ndarray,
    mode: PolicyMode,
    batch_size: int = 512,
    collect_traces: bool = False,
    trace_path: Optional[str] = None,
) -> EvalResult:
    """Aggregate accuracy / mean cost / emit histogram under a policy.

    The batched pass computes every stage's outputs once and applies the
    emit rule analytically; per-image streaming keeps memory bounded when
    traces are written to disk.
    """
    if len(labels) == 0:
        raise ValueError("evaluation dataset is empty")
    mode.check_against(model)
    num_stages = model.config.num_stages
    prefix = model.cost.prefix
    head_logits = _head_logits(model, images, batch_size)  # (N, M, n)
    n_images = len(labels)

    if mode.kind == "dynamic":
        if controller is None:
            raise PolicyError("dynamic mode needs a controller")
        scores, confs = controller.scores_and_confidences(head_logits)
        emit = _dynamic_emit(confs, mode.t)
        predicted = scores[np.arange(n_images), emit - 1].argmax(axis=1)
    elif mode.kind == "fixed":
        emit = np.full(n_images, mode.m, dtype=np.int64)
        predicted = head_logits[:, mode.m - 1, :].argmax(axis=1)
        confs = None
    else:
        rng = np.random.default_rng(mode.seed)
        emit = rng.integers(1, num_stages + 1, size=n_images)
        predicted = head_logits[np.arange(n_images), emit - 1].argmax(axis=1)
        confs = None

    correct = (predicted == labels).astype(np.int64)
    costs = prefix[emit - 1]
    hist = np.bincount(emit, minlength=num_stages + 1)[1:]

    traces = [] if collect_traces else None
    writer = open(trace_path, "w") if trace_path else None
    if collect_traces or writer:
        for i in range(n_images):
            tr = StageTrace(
                image_id=i,
                logits=[head_logits[i, s] for s in range(emit[i])],
                confidences=[] if confs is None else [float(c) for c in confs[i, : emit[i]]],
                emit_stage=int(emit[i]),
                predicted=int(predicted[i]),
                correct=int(correct[i]),
                cost=float(costs[i]),
            )
            if writer:
                writer.write(json.dumps(tr.to_record(), sort_keys=True) + "\n")
            if collect_traces:
                traces.append(tr)
        if writer:
            writer.close()

    return EvalResult(
        accuracy=float(correct.mean()),
        mean_cost=float(costs.mean()),
        emit_hist=hist,
        traces=traces,
    )


def sweep(
    model: Model,
    controller: Controller,
    images: np.ndarray,
    labels: np.ndarray,
    grid: Optional[ThresholdGrid] = None,
    batch_size: int = 512,
    measure_wall: bool = False,
    wall_sample: int = 32,
) -> SweepResult:
    """Evaluate the dynamic policy at every grid threshold.

    Wall-clock numbers are off by default so sweep CSVs stay byte-stable
    across reruns; pass measure_wall=True to time true sequential
    inference on a dataset sample.
    """
    grid = grid or ThresholdGrid.default()
    head_logits = _head_logits(model, images, batch_size)
    scores, confs = controller.scores_and_confidences(head_logits)
    n_images = len(labels)
    prefix = model.cost.prefix
    result = SweepResult()
    for t in grid.values:
        emit = _dynamic_emit(confs, t)
        predicted = scores[np.arange(n_images), emit - 1].argmax(axis=1)
        correct = (predicted == labels).astype(np.int64)
        costs = prefix[emit - 1]
        hist = np.bincount(emit, minlength=model.config.num_stages + 1)[1:]
        wall = 0.0
        if measure_wall:
            wall = _wall_ms_mean(model, controller, images, labels, PolicyMode.dynamic(t),
                                 sample=wall_sample)
        result.rows.append(
            SweepRow(
                t=float(t),
                mean_cost=float(costs.mean()),
                accuracy=float(correct.mean()),
                emit_hist=hist,
                wall_ms_mean=wall,
            )
        )
    return result


def _wall_ms_mean(model, controller, images, labels, mode, sample=32, warmup=4) -> float:
    idx = range(min(sample + warmup, len(labels)))
    times = []
    for k, i in enumerate(idx):
        start = time.perf_counter()
        infer_one(model, controller, images[i], labels[i], mode, image_id=i)
        elapsed = (time.perf_counter() - start) * 1e3
        if k >= warmup:
            times.append(elapsed)
    return float(np.mean(times)) if times else 0.0


def bench(
    model: Model,
    controller: Optional[Controller],
    images: np.ndarray,
    labels: np.ndarray,
    modes: Iterable[PolicyMode],
    repeats: int = 5,
    warmup: int = 2,
    sample: int = 64,
) -> list:
    """Median-of-repeats wall-clock per mode on true sequential inference;
    warm-up runs are discarded."""
    report = []
    n = min(sample, len(labels))
    for mode in modes:
        per_run = []
        for r in range(repeats + warmup):
            start = time.perf_counter()
            for i in range(n):
                infer_one(model, controller, images[i], labels[i], mode, image_id=i)
            total_ms = (time.perf_counter() - start) * 1e3
            if r >= warmup:
                per_run.append(total_ms / n)
        report.append(
            {
                "mode": mode.kind,
                "t": mode.t,
                "m": mode.m,
                "seed": mode.seed,
                "images": n,
                "repeats": repeats,
                "warmup_discarded": warmup,
                "median_ms_per_image": float(np.median(per_run)),
                "mean_ms_per_image": float(np.mean(per_run)),
                "min_ms_per_image": float(np.min(per_run)),
                "max_ms_per_image": float(np.max(per_run)),
            }
        )
    return report


def random_baseline(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    trials: int,
    seed: int,
    batch_size: int = 512,
) -> np.ndarray:
    """(trials, 2) array of (mean_cost, accuracy), one point per trial of
    uniformly random per-image emit stages."""
    if trials < 1:
        raise PolicyError(f"trials must be >= 1, got {trials}")
    num_stages = model.config.num_stages
    prefix = model.cost.prefix
    head_logits = _head_logits(model, images, batch_size)
    head_pred = head_logits.argmax(axis=2)  # (N, M)
    head_correct = (head_pred == labels[:, None]).astype(np.float64)
    n_images = len(labels)
    points = np.empty((trials, 2), dtype=np.float64)
    seeds = np.random.SeedSequence(seed).spawn(trials)
    for k in range(trials):
        rng = np.random.default_rng(seeds[k])
        emit = rng.integers(1, num_stages + 1, size=n_images)
        points[k, 0] = prefix[emit - 1].mean()
        points[k, 1] = head_correct[np.arange(n_images), emit - 1].mean()
    return points
