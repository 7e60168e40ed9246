"""Experiment configuration: one JSON file, validated up front, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .model import NetConfig
from .stream import REGIMES
from .strategies import StrategyConfig, TransferConfig
from .synth import GenConfig

_TOP_KEYS = {"name", "seed", "data", "eval", "stream", "model", "training", "strategies", "transfer",
             "checkpoints", "output_dir"}
_TRAINING_KEYS = {f.name for f in fields(StrategyConfig)} - {"kind", "loss_family", "loss", "transfer"}


@dataclass(frozen=True)
class DataSource:
    gen: GenConfig | None = None
    path: str | None = None
    split_path: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    data: DataSource
    eval_instances: int
    queries_per_instance: int
    regime: str
    num_batches: int
    stream_seed: int
    model: NetConfig
    strategies: tuple[StrategyConfig, ...]
    transfer: TransferConfig | None = None
    pretrain_data: GenConfig | None = None
    checkpoints: bool = True
    output_dir: str = "runs/default"
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def loss_families(self) -> list[str]:
        return list(dict.fromkeys(s.loss_family for s in self.strategies))


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _build(cls, d: dict, where: str):
    _check_keys(d, {f.name for f in fields(cls)}, where)
    try:
        return cls(**d)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(raw: dict, seed_override: int | None = None, base_dir: Path | None = None) -> ExperimentConfig:
    _check_keys(raw, _TOP_KEYS, "config")
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    base_dir = base_dir or Path(".")

    data_raw = raw.get("data")
    if data_raw is None:
        raise ConfigError("config.data is required")
    _check_keys(data_raw, set(GenConfig.__dataclass_fields__) | {"path", "split"}, "data")
    if "path" in data_raw:
        extra = set(data_raw) - {"path", "split"}
        if extra:
            raise ConfigError(f"data.path cannot be combined with generator keys {sorted(extra)}")
        if "split" not in data_raw:
            raise ConfigError("data.split is required with data.path")
        data = DataSource(path=str(base_dir / data_raw["path"]), split_path=str(base_dir / data_raw["split"]))
    else:
        data = DataSource(gen=_build(GenConfig, data_raw, "data"))

    ev = raw.get("eval", {})
    _check_keys(ev, {"instances", "queries_per_instance"}, "eval")
    eval_instances = int(ev.get("instances", 10))
    qpi = int(ev.get("queries_per_instance", 2))
    if qpi < 1:
        raise ConfigError("eval.queries_per_instance must be >= 1")
    if data.gen is not None and not 1 <= eval_instances < data.gen.num_instances:
        raise ConfigError("eval.instances must be between 1 and data.num_instances - 1")

    st = raw.get("stream", {})
    _check_keys(st, {"regime", "num_batches", "seed"}, "stream")
    regime = st.get("regime", "incremental")
    if regime not in REGIMES:
        raise ConfigError(f"stream.regime must be one of {REGIMES}, got {regime!r}")
    num_batches = int(st.get("num_batches", 5))
    if num_batches < 1:
        raise ConfigError("stream.num_batches must be >= 1")
    stream_seed = seed if st.get("seed") is None or seed_override is not None else int(st["seed"])

    model = _build(NetConfig, raw.get("model", {}), "model")

    training = raw.get("training", {})
    _check_keys(training, _TRAINING_KEYS, "training")

    transfer = pretrain_data = None
    if raw.get("transfer") is not None:
        tr = dict(raw["transfer"])
        _check_keys(tr, {"pretrain_data", "frozen_layers", "transfer_lr", "pretrain_epochs"}, "transfer")
        if "pretrain_data" not in tr:
            raise ConfigError("transfer.pretrain_data is required")
        pretrain_data = _build(GenConfig, tr.pop("pretrain_data"), "transfer.pretrain_data")
        if tr.get("frozen_layers") is not None:
            tr["frozen_layers"] = tuple(tr["frozen_layers"])
        transfer = _build(TransferConfig, tr, "transfer")

    strategies = []
    specs = raw.get("strategies")
    if not specs:
        raise ConfigError("config.strategies must list at least one strategy")
    for i, s in enumerate(specs):
        where = f"strategies[{i}]"
        _check_keys(s, _TRAINING_KEYS | {"kind", "loss_family", "loss"}, where)
        merged = {**training, **{k: v for k, v in s.items() if k != "loss"}}
        merged["loss"] = _build(LossConfig, s.get("loss", {}), f"{where}.loss")
        merged["transfer"] = transfer
        strategies.append(_build(StrategyConfig, merged, where))

    return ExperimentConfig(
        name=str(raw.get("name", "toy")),
        seed=seed,
        data=data,
        eval_instances=eval_instances,
        queries_per_instance=qpi,
        regime=regime,
        num_batches=num_batches,
        stream_seed=stream_seed,
        model=model,
        strategies=tuple(strategies),
        transfer=transfer,
        pretrain_data=pretrain_data,
        checkpoints=bool(raw.get("checkpoints", True)),
        output_dir=str(raw.get("output_dir", "runs/default")),
        raw=raw,
    )


def load_config(path, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = parse_config(raw, seed_override, path.parent)
    if out_override is not None:
        cfg = replace(cfg, output_dir=out_override)
    return cfg


def toy_config(**overrides) -> dict:
    """The default desk-scale benchmark: 20 training instances x 12 views, 5 incremental batches."""
    raw = {
        "name": "toy",
        "seed": 0,
        "data": {"num_instances": 30, "views_per_instance": 12, "pose_grid": 12, "seed": 0},
        "eval": {"instances": 10, "queries_per_instance": 2},
        "stream": {"regime": "incremental", "num_batches": 5},
        "model": {},
        "training": {},
        "strategies": [{"kind": "naive", "loss_family": "triplet"}],
        "output_dir": "runs/toy",
    }
    raw.update(overrides)
    return raw
