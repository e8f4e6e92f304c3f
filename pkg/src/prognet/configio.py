"""Flat key-value config text: `key = value` lines, `#` comments.

Network configs and synthetic dataset specs are stored in this format;
every CLI run also writes its fully resolved settings back out in it so
a run can be reproduced from the output directory alone.
"""

from __future__ import annotations

import hashlib
import os

from .data import SyntheticSpec
from .network import NetworkConfig, StageSpec


class ConfigFileError(ValueError):
    """Malformed config text or missing/invalid keys."""


def parse_kv_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigFileError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigFileError(f"config file not found: {path}")
    with open(path) as fh:
        return parse_kv_text(fh.read())


def format_kv(d: dict) -> str:
    return "".join(f"{k} = {d[k]}\n" for k in sorted(d))


def write_kv(path: str, d: dict) -> None:
    with open(path, "w") as fh:
        fh.write(format_kv(d))


def kv_digest(d: dict) -> str:
    return hashlib.sha256(format_kv(d).encode()).hexdigest()


def _ints(value: str) -> tuple:
    try:
        return tuple(int(v) for v in value.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigFileError(f"expected comma-separated ints, got {value!r}") from exc


def _floats(value: str) -> tuple:
    try:
        return tuple(float(v) for v in value.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigFileError(f"expected comma-separated floats, got {value!r}") from exc


# ---------------------------------------------------------------------------
# network config
# ---------------------------------------------------------------------------


def network_config_from_kv(kv: dict) -> NetworkConfig:
    try:
        topology = kv["topology"]
        block = kv["block"]
        classes = int(kv["classes"])
        base_width = int(kv["base_width"])
        input_shape = _ints(kv["input"])
    except KeyError as exc:
        raise ConfigFileError(f"missing network config key: {exc.args[0]}") from exc

    weights = _floats(kv["stage_weights"]) if "stage_weights" in kv else ()
    growth = int(kv.get("growth", 12))

    if topology == "parallel":
        if "multipliers" not in kv:
            raise ConfigFileError("parallel topology needs 'multipliers'")
        multipliers = _ints(kv["multipliers"])
        depths = _ints(kv.get("depths", "1"))
        stages = tuple(
            StageSpec(block, m, depth_per_resolution=depths, growth_k=growth)
            for m in multipliers
        )
        pools = ()
    elif topology == "serial":
        if "groups" not in kv:
            raise ConfigFileError("serial topology needs 'groups'")
        groups_per_res = [
            _ints(part) for part in kv["groups"].split("/") if part.strip() != ""
        ]
        stages = []
        pools = []
        count = 0
        for res_i, group_list in enumerate(groups_per_res):
            for g in group_list:
                stages.append(StageSpec(block, 1, depth_per_resolution=(g,), growth_k=growth))
                count += 1
            if res_i < len(groups_per_res) - 1:
                pools.append(count)
        stages.append(StageSpec(block, 1, depth_per_resolution=(0,), growth_k=growth))
        stages = tuple(stages)
        pools = tuple(pools)
    else:
        raise ConfigFileError(f"unknown topology {topology!r}")

    cfg = NetworkConfig(
        topology=topology,
        stages=stages,
        base_width=base_width,
        num_classes=classes,
        input_shape=tuple(input_shape),
        stage_weights=weights,
        serial_pools=pools,
    )
    cfg.validate()
    return cfg


def network_config_to_kv(cfg: NetworkConfig) -> dict:
    kv = {
        "topology": cfg.topology,
        "block": cfg.block_kind,
        "classes": str(cfg.num_classes),
        "base_width": str(cfg.base_width),
        "input": ",".join(str(v) for v in cfg.input_shape),
        "growth": str(cfg.stages[0].growth_k),
    }
    if cfg.stage_weights:
        kv["stage_weights"] = ",".join(repr(float(w)) for w in cfg.stage_weights)
    if cfg.topology == "parallel":
        kv["multipliers"] = ",".join(str(s.width_multiplier) for s in cfg.stages)
        kv["depths"] = ",".join(str(d) for d in cfg.stages[0].depth_per_resolution)
    else:
        groups = [s.depth_per_resolution[0] for s in cfg.stages[:-1]]
        parts = []
        prev = 0
        for p in list(cfg.serial_pools) + [len(groups)]:
            parts.append(",".join(str(g) for g in groups[prev:p]))
            prev = p
        kv["groups"] = "/".join(parts)
    return kv


def network_config_digest(cfg: NetworkConfig) -> str:
    return kv_digest(network_config_to_kv(cfg))


# ---------------------------------------------------------------------------
# synthetic spec
# ---------------------------------------------------------------------------


def synthetic_spec_from_kv(kv: dict) -> SyntheticSpec:
    try:
        spec = SyntheticSpec(
            num_classes=int(kv["classes"]),
            shape=_ints(kv["shape"]),
            tier_separations=_floats(kv["tier_separations"]),
            samples_per_tier=int(kv["samples_per_tier"]),
            seed=int(kv.get("seed", 0)),
            modes_per_class=int(kv.get("modes_per_class", 1)),
        )
    except KeyError as exc:
        raise ConfigFileError(f"missing synthetic spec key: {exc.args[0]}") from exc
    spec.validate()
    return spec


def synthetic_spec_to_kv(spec: SyntheticSpec) -> dict:
    return {
        "classes": str(spec.num_classes),
        "shape": ",".join(str(v) for v in spec.shape),
        "tier_separations": ",".join(repr(float(s)) for s in spec.tier_separations),
        "samples_per_tier": str(spec.samples_per_tier),
        "seed": str(spec.seed),
        "modes_per_class": str(spec.modes_per_class),
    }
