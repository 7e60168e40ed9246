"""Experiment orchestration, metrics CSV persistence and plain-text reports."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import ExperimentConfig
from .errors import ConfigError, PersistenceError
from .model import save_checkpoint
from .retrieval import MetricsRecord, RetrievalSplit, forget_ratio
from .stream import InstanceDataset, StreamPlan, make_plan
from .strategies import BatchFeed, StrategyConfig, check_protocol, pretrain, reference_maps, run_stream, synthetic_transfer
from .synth import generate, load_dataset, load_split, make_retrieval_split, save_dataset, save_split

log = logging.getLogger(__name__)

BASE_COLUMNS = ("dataset", "strategy", "loss", "t", "mAP", "ref_mAP", "forget")
REQUIRED_COLUMNS = ("strategy", "loss", "t", "mAP", "ref_mAP", "forget")
CURVE_COLUMNS = ("dataset", "strategy", "loss", "transfer", "t", "mAP")


# ---------------------------------------------------------------------------
# data


def split_generated(ds: InstanceDataset, eval_instances: int, queries_per_instance: int,
                    seed: int) -> tuple[InstanceDataset, RetrievalSplit]:
    """The last ``eval_instances`` ids are held out as the fixed query/gallery split."""
    ids = ds.instances
    if not 1 <= eval_instances < len(ids):
        raise ConfigError(f"eval.instances={eval_instances} must leave at least one training instance")
    train_ids, eval_ids = ids[:-eval_instances], ids[-eval_instances:]
    split = make_retrieval_split(ds.subset_instances(eval_ids), queries_per_instance, seed)
    return ds.subset_instances(train_ids), split


def build_data(cfg: ExperimentConfig) -> tuple[InstanceDataset, RetrievalSplit]:
    if cfg.data.gen is not None:
        return split_generated(generate(cfg.data.gen), cfg.eval_instances, cfg.queries_per_instance,
                               cfg.data.gen.seed)
    return load_dataset(cfg.data.path), load_split(cfg.data.split_path)


def write_data(cfg: ExperimentConfig, out: Path) -> dict[str, int]:
    if cfg.data.gen is None:
        raise ConfigError("data: generate-data needs generator settings, not a dataset path")
    train, split = build_data(cfg)
    save_dataset(train, out / "dataset.json")
    save_split(split, out / "split.json")
    counts = {
        "train_instances": len(train.instances),
        "train_images": len(train),
        "eval_instances": len(split.instances),
        "queries": len(split.query_ids),
        "gallery": len(split.gallery_ids),
        "outliers": len(train.meta.get("outliers", [])),
    }
    if cfg.pretrain_data is not None:
        synth = generate(cfg.pretrain_data)
        save_dataset(synth, out / "pretrain.json")
        counts["pretrain_images"] = len(synth)
    return counts


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunOutput:
    rows: list[dict]
    plan: StreamPlan
    feeds: list[BatchFeed] = field(default_factory=list)


def _row(dataset: str, rec: MetricsRecord, transfer: bool | None) -> dict:
    row = {"dataset": dataset, "strategy": rec.strategy, "loss": rec.loss_family, "t": rec.t,
           "mAP": rec.mAP, "ref_mAP": rec.ref_mAP, "forget": rec.forget}
    if transfer is not None:
        row["transfer"] = transfer
    return row


def _checkpoint_hook(out: Path | None, prefix: str):
    if out is None:
        return None

    def hook(scfg: StrategyConfig, t: int, state) -> None:
        save_checkpoint(state.net, state.adam, out / "checkpoints" / f"{prefix}{scfg.loss_family}_{scfg.name}_t{t}.json")

    return hook


def _ordered(cfg: ExperimentConfig, family: str) -> tuple[StrategyConfig, list[StrategyConfig]]:
    """Cumulative config for ``family`` (explicit or implied) plus the remaining strategies."""
    specs = [s for s in cfg.strategies if s.loss_family == family]
    cum = next((s for s in specs if s.kind == "cumulative"), None)
    if cum is None:
        cum = replace(specs[0], kind="cumulative")
    return cum, [s for s in specs if s.kind != "cumulative"]


def run_experiment(cfg: ExperimentConfig, out: Path | None = None, transfer: bool = False,
                   data: tuple[InstanceDataset, RetrievalSplit] | None = None) -> RunOutput:
    """Cumulative reference first, then every strategy, per loss family."""
    if transfer and (cfg.transfer is None or cfg.pretrain_data is None):
        raise ConfigError("transfer: config must name transfer.pretrain_data")
    ds, split = data or build_data(cfg)
    plan = make_plan(ds, cfg.regime, cfg.num_batches, cfg.stream_seed)
    check_protocol(ds, plan, split)
    result = RunOutput([], plan)
    col = None if not transfer else False
    hook = _checkpoint_hook(out if cfg.checkpoints else None, "")
    for family in cfg.loss_families:
        cum, rest = _ordered(cfg, family)
        refs_records = run_stream(ds, plan, cum, cfg.model, split, cfg.seed, on_batch_end=hook)
        refs = reference_maps(refs_records)
        result.rows += [_row(cfg.name, r, col) for r in refs_records]
        for scfg in rest:
            feed = BatchFeed(ds, plan)
            result.feeds.append(feed)
            records = run_stream(ds, plan, scfg, cfg.model, split, cfg.seed, refs, feed=feed, on_batch_end=hook)
            result.rows += [_row(cfg.name, r, col) for r in records]
    if transfer:
        result.rows += _transfer_rows(cfg, ds, plan, split, out)
    return result


def _transfer_rows(cfg: ExperimentConfig, ds, plan, split, out: Path | None) -> list[dict]:
    synth = generate(cfg.pretrain_data)
    hook = _checkpoint_hook(out if cfg.checkpoints else None, "transfer_")
    rows = []
    for family in cfg.loss_families:
        cum, rest = _ordered(cfg, family)
        pre = pretrain(synth, cum, cfg.model, cfg.seed)
        refs_records = synthetic_transfer(cum, synth, ds, plan, split, cfg.model, cfg.seed,
                                          pretrained=pre, on_batch_end=hook)
        refs = reference_maps(refs_records)
        rows += [_row(cfg.name, r, True) for r in refs_records]
        for scfg in rest:
            records = synthetic_transfer(scfg, synth, ds, plan, split, cfg.model, cfg.seed, refs,
                                         pretrained=pre, on_batch_end=hook)
            rows += [_row(cfg.name, r, True) for r in records]
    return rows


# ---------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.2f}"
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    columns = list(BASE_COLUMNS) + (["transfer"] if rows and "transfer" in rows[0] else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def write_metrics(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_csv(rows))


def read_metrics(path) -> list[dict]:
    """Parse and validate a metrics CSV; schema problems raise ConfigError naming the column."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise PersistenceError(f"cannot read metrics CSV {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    for col in REQUIRED_COLUMNS:
        if col not in header:
            raise ConfigError(f"metrics CSV is missing column {col!r}")
    unknown = [c for c in header if c not in BASE_COLUMNS + ("transfer",)]
    if unknown:
        raise ConfigError(f"metrics CSV has unexpected column {unknown[0]!r}")
    rows = []
    for line, raw in enumerate(reader, start=2):
        row = {"dataset": raw.get("dataset") or "-", "strategy": raw["strategy"], "loss": raw["loss"]}
        for col in ("t", "mAP", "ref_mAP", "forget"):
            try:
                row[col] = int(raw[col]) if col == "t" else float(raw[col])
            except (TypeError, ValueError):
                raise ConfigError(f"metrics CSV line {line}: column {col!r} is not numeric ({raw[col]!r})") from None
        if "transfer" in header:
            if raw["transfer"] not in ("true", "false"):
                raise ConfigError(f"metrics CSV line {line}: column 'transfer' must be true/false")
            row["transfer"] = raw["transfer"] == "true"
        if not math.isnan(row["ref_mAP"]) and abs(forget_ratio(row["ref_mAP"], row["mAP"]) - row["forget"]) > 0.01 + 1e-9:
            raise ConfigError(f"metrics CSV line {line}: column 'forget' disagrees with ref_mAP/mAP")
        rows.append(row)
    if not rows:
        raise ConfigError("metrics CSV has no rows")
    return rows


# ---------------------------------------------------------------------------
# reports


def _final_rows(rows: list[dict]) -> list[dict]:
    last: dict[tuple, dict] = {}
    for r in rows:
        key = (r["dataset"], r.get("transfer", False), r["loss"], r["strategy"])
        if key not in last or r["t"] >= last[key]["t"]:
            last[key] = r
    return list(last.values())


def _min_forget(block: list[dict]) -> dict | None:
    cands = [r for r in block if r["strategy"] != "cumulative" and not math.isnan(r["forget"])]
    return min(cands, key=lambda r: r["forget"]) if cands else None


def table_final(rows: list[dict]) -> str:
    """Final-t rows grouped by dataset; '*' marks the lowest Forget in each block."""
    lines = []
    final = _final_rows(rows)
    for dataset in dict.fromkeys(r["dataset"] for r in final):
        for tr in dict.fromkeys(r.get("transfer", False) for r in final if r["dataset"] == dataset):
            block = [r for r in final if r["dataset"] == dataset and r.get("transfer", False) == tr]
            best = _min_forget(block)
            title = dataset + (" (transfer)" if tr else "")
            lines.append(f"== {title} ==")
            lines.append(f"  {'strategy':<12}{'loss':<9}{'Ref(%)':>9}{'mAP(%)':>9}{'Forget(%)':>11}")
            for r in block:
                mark = " *" if r is best else ""
                lines.append(f"  {r['strategy']:<12}{r['loss']:<9}{_fmt(r['ref_mAP']):>9}{_fmt(r['mAP']):>9}"
                             f"{_fmt(r['forget']):>11}{mark}")
            lines.append("")
    return "\n".join(lines)


def _pivot(rows: list[dict], key_fn, columns: tuple, title: str, header: tuple[str, str]) -> str:
    final = _final_rows(rows)
    lines = [f"== {title} ==", f"  {'dataset':<12}{'strategy':<12}{header[0]:>14}{header[1]:>14}"]
    seen = dict.fromkeys((r["dataset"], r["strategy"]) for r in final if r["strategy"] != "cumulative")
    for dataset, strategy in seen:
        cells = []
        for c in columns:
            match = [r for r in final if r["dataset"] == dataset and r["strategy"] == strategy and key_fn(r) == c]
            cells.append(_fmt(match[0]["forget"]) if match else "-")
        lines.append(f"  {dataset:<12}{strategy:<12}{cells[0]:>14}{cells[1]:>14}")
    return "\n".join(lines) + "\n"


def table_loss_compare(rows: list[dict]) -> str:
    plain = [r for r in rows if not r.get("transfer", False)]
    return _pivot(plain, lambda r: r["loss"], ("triplet", "nce"), "Forget by loss family",
                  ("Regression(%)", "w/ NCE(%)"))


def table_transfer_compare(rows: list[dict]) -> str:
    out = []
    for family in dict.fromkeys(r["loss"] for r in rows):
        sub = [r for r in rows if r["loss"] == family]
        out.append(_pivot(sub, lambda r: r.get("transfer", False), (False, True),
                          f"Forget with and without transfer ({family})", ("w/o(%)", "w/(%)")))
    return "\n".join(out)


def curves_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in sorted(rows, key=lambda r: (r["dataset"], r["strategy"], r["loss"], r.get("transfer", False), r["t"])):
        w.writerow([r["dataset"], r["strategy"], r["loss"], _fmt(r.get("transfer", False)), r["t"], _fmt(r["mAP"])])
    return buf.getvalue()


def render_report(rows: list[dict]) -> str:
    parts = [table_final(rows)]
    families = {r["loss"] for r in rows}
    if {"triplet", "nce"} <= families:
        parts.append(table_loss_compare(rows))
    if {True, False} <= {r.get("transfer", False) for r in rows}:
        parts.append(table_transfer_compare(rows))
    return "\n".join(parts)
