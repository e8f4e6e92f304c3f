import os

import numpy as np
import pytest

from prognet import cli
from prognet.checkpoint import load_checkpoint


@pytest.fixture()
def workdir(tmp_path):
    net_path = tmp_path / "network.txt"
    net_path.write_text(
        "topology = parallel\n"
        "block = mlp\n"
        "classes = 3\n"
        "base_width = 8\n"
        "input = 3,6,6\n"
        "multipliers = 1,1,2\n"
        "depths = 1\n"
    )
    spec_path = tmp_path / "synth.txt"
    spec_path.write_text(
        "classes = 3\n"
        "shape = 3,6,6\n"
        "tier_separations = 3.0,1.0\n"
        "samples_per_tier = 40\n"
        "val_samples_per_tier = 20\n"
        "seed = 5\n"
    )
    return tmp_path


def run(args):
    return cli.main([str(a) for a in args])


def base_args(workdir, out, extra=()):
    return [
        "--network", workdir / "network.txt",
        "--synthetic", workdir / "synth.txt",
        "--out", workdir / out,
        *extra,
    ]


def train_base(workdir, out="base", seed=0):
    code = run(
        ["train-base", *base_args(workdir, out), "--epochs", 2, "--batch-size", 32,
         "--lr", 0.05, "--seed", seed]
    )
    assert code == 0
    return workdir / out / "base.ckpt"


def train_controller(workdir, ckpt, out="ctl", seed=0, extra=()):
    code = run(
        ["train-controller", *base_args(workdir, out), "--base-checkpoint", ckpt,
         "--epochs", 2, "--hidden", 8, "--batch-size", 40, "--lr", 0.1,
         "--seed", seed, *extra]
    )
    assert code == 0
    return workdir / out / "controller.ckpt"


# ---------------------------------------------------------------------------


def test_missing_dataset_dir_exits_2(workdir, capsys):
    code = run([
        "train-base", "--network", workdir / "network.txt",
        "--cifar10", workdir / "missing_dir", "--out", workdir / "o",
    ])
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_no_dataset_selector_exits_2(workdir, monkeypatch, capsys):
    monkeypatch.delenv(cli.ENV_DATA_DIR, raising=False)
    code = run([
        "train-base", "--network", workdir / "network.txt", "--out", workdir / "o",
    ])
    assert code == 2
    assert "no dataset" in capsys.readouterr().err


def test_train_base_smoke_writes_outputs(workdir):
    ckpt = train_base(workdir)
    out = workdir / "base"
    assert ckpt.exists()
    assert (out / "resolved_config.txt").exists()
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_acc_1,val_acc_2,val_acc_3,val_acc_mean"
    assert len(lines) == 3  # header + 2 epochs
    ck = load_checkpoint(str(ckpt))
    assert ck.kind == "model"


def test_train_base_same_seed_is_byte_identical(workdir):
    train_base(workdir, out="r1", seed=3)
    train_base(workdir, out="r2", seed=3)
    a = (workdir / "r1" / "metrics.csv").read_bytes()
    b = (workdir / "r2" / "metrics.csv").read_bytes()
    assert a == b
    ck_a = (workdir / "r1" / "base.ckpt").read_bytes()
    ck_b = (workdir / "r2" / "base.ckpt").read_bytes()
    assert ck_a == ck_b


def test_controller_defaults_encode_stated_protocol():
    parser = cli.build_parser()
    args = parser.parse_args(
        ["train-controller", "--network", "n", "--out", "o", "--base-checkpoint", "b"]
    )
    assert args.lr == 0.5
    assert args.weight_decay == 0.0
    assert args.momentum == 0.0
    assert args.switch_fraction == 0.8
    assert args.layers == 3


def test_random_baseline_default_is_1000_trials():
    parser = cli.build_parser()
    args = parser.parse_args(
        ["random-baseline", "--network", "n", "--out", "o", "--base-checkpoint", "b"]
    )
    assert args.trials == 1000


def test_train_controller_and_cache_equivalence(workdir):
    base = train_base(workdir)
    c1 = train_controller(workdir, base, out="c1", seed=1)
    cache = workdir / "c1" / "targets.npz"
    assert cache.exists()
    # rerun pointing at the already-populated cache: identical checkpoint
    c2 = train_controller(
        workdir, base, out="c2", seed=1, extra=["--target-cache", cache]
    )
    assert c1.read_bytes() == c2.read_bytes()


def test_alpha_zero_leaves_confidence_head_at_init(workdir):
    base = train_base(workdir)
    ck_path = train_controller(workdir, base, out="a0", seed=2, extra=["--alpha", 0.0])
    from prognet.controller import Controller, ControllerConfig

    ck = load_checkpoint(str(ck_path))
    cfg = ControllerConfig(**ck.extra["controller_config"])
    fresh = Controller.init(cfg, seed=2)
    np.testing.assert_array_equal(ck.params["out_conf.w"], fresh.params["out_conf.w"].data)
    np.testing.assert_array_equal(ck.params["out_conf.b"], fresh.params["out_conf.b"].data)


def test_eval_modes_and_validation(workdir, capsys):
    base = train_base(workdir)
    ctl = train_controller(workdir, base)

    code = run(["eval", *base_args(workdir, "e1"), "--base-checkpoint", base,
                "--mode", "fixed:3"])
    assert code == 0
    row = (workdir / "e1" / "eval.csv").read_text().splitlines()
    assert row[0].startswith("mode,param,accuracy,mean_cost")
    assert row[1].startswith("fixed,3,")

    code = run(["eval", *base_args(workdir, "e2"), "--base-checkpoint", base,
                "--controller-checkpoint", ctl, "--mode", "dynamic:0.5"])
    assert code == 0

    code = run(["eval", *base_args(workdir, "e3"), "--base-checkpoint", base,
                "--mode", "random:7"])
    assert code == 0

    # t = 1.0 is outside (0, 1): rejected with a clear message
    code = run(["eval", *base_args(workdir, "e4"), "--base-checkpoint", base,
                "--mode", "dynamic:1.0"])
    assert code == 2
    assert "invalid mode" in capsys.readouterr().err

    code = run(["eval", *base_args(workdir, "e5"), "--base-checkpoint", base,
                "--mode", "fixed:9"])
    assert code == 2
    assert "out of range" in capsys.readouterr().err


def test_eval_dynamic_without_controller_exits_2(workdir, capsys):
    base = train_base(workdir)
    code = run(["eval", *base_args(workdir, "e6"), "--base-checkpoint", base,
                "--mode", "dynamic:0.5"])
    assert code == 2
    assert "controller" in capsys.readouterr().err


def test_sweep_default_grid_has_nine_rows_and_reruns_identically(workdir):
    base = train_base(workdir)
    ctl = train_controller(workdir, base)
    assert run(["sweep", *base_args(workdir, "s1"), "--base-checkpoint", base,
                "--controller-checkpoint", ctl]) == 0
    assert run(["sweep", *base_args(workdir, "s2"), "--base-checkpoint", base,
                "--controller-checkpoint", ctl]) == 0
    s1 = (workdir / "s1" / "sweep.csv").read_bytes()
    s2 = (workdir / "s2" / "sweep.csv").read_bytes()
    assert s1 == s2
    lines = s1.decode().splitlines()
    assert len(lines) == 10
    assert lines[0] == "t,mean_cost,accuracy,emit_hist_1,emit_hist_2,emit_hist_3,wall_ms_mean"


def test_random_baseline_rows_match_trials(workdir):
    base = train_base(workdir)
    assert run(["random-baseline", *base_args(workdir, "rb"), "--base-checkpoint", base,
                "--trials", 5, "--seed", 11]) == 0
    lines = (workdir / "rb" / "random_baseline.csv").read_text().splitlines()
    assert lines[0] == "trial,mean_cost,accuracy"
    assert len(lines) == 6


def test_bench_writes_ndjson(workdir):
    import json

    base = train_base(workdir)
    assert run(["bench", *base_args(workdir, "b1"), "--base-checkpoint", base,
                "--modes", "fixed:1,fixed:3", "--repeats", 2, "--warmup", 1,
                "--sample", 4]) == 0
    rows = [json.loads(l) for l in (workdir / "b1" / "bench.ndjson").read_text().splitlines()]
    assert [r["mode"] for r in rows] == ["fixed", "fixed"]
    assert all(r["median_ms_per_image"] > 0 for r in rows)


def test_checkpoint_config_mismatch_exits_1(workdir, capsys):
    base = train_base(workdir)
    other_net = workdir / "other.txt"
    other_net.write_text(
        "topology = parallel\nblock = mlp\nclasses = 3\nbase_width = 8\n"
        "input = 3,6,6\nmultipliers = 1,2\ndepths = 1\n"
    )
    code = run(["eval", "--network", other_net, "--synthetic", workdir / "synth.txt",
                "--out", workdir / "x", "--base-checkpoint", base, "--mode", "fixed:1"])
    assert code == 1
    assert "digest" in capsys.readouterr().err


def test_workers_validation(workdir, capsys):
    code = run(["train-base", *base_args(workdir, "w"), "--workers", 0])
    assert code == 2


def test_usage_error_exit_code():
    assert cli.main(["definitely-not-a-command"]) == 2
