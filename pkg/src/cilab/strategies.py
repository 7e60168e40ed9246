"""Continual training over a stream plan: Naive, FT, LFL, LwF, EWC, Cumulative.

The runner hands out one continuous batch at a time through a
:class:`BatchFeed`; a batch is released (its pixels dropped) before the next
one is opened, so only parameter snapshots and Fisher estimates cross time
steps.  The cumulative reference is the one path allowed to see the union
of past batches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, ProtocolError
from .losses import (
    FisherDiagonal,
    LossConfig,
    embed_tuple_images,
    estimate_fisher,
    ewc_penalty,
    lfl_regularizer,
    lwf_distillation,
    nce_batch_logits,
    task_loss_from_embeddings,
)
from .model import (
    AdamState,
    EmbeddingNet,
    NetConfig,
    ParameterSnapshot,
    adam_step,
    clone_from,
    embed_numpy,
    freeze,
    init_xavier,
    restore,
    snapshot,
)
from .retrieval import MetricsRecord, RetrievalSplit, forget_ratio, mean_average_precision
from .stream import ContinuousBatch, InstanceDataset, StreamPlan, sample_nce_tuples, sample_triplets

log = logging.getLogger(__name__)

KINDS = ("naive", "finetune", "lfl", "lwf", "ewc", "cumulative")
FAMILIES = ("triplet", "nce")
HEAD_LAYER = "head"


@dataclass(frozen=True)
class TransferConfig:
    frozen_layers: tuple[str, ...] | None = None  # None = every conv block
    transfer_lr: float = 1e-4
    pretrain_epochs: int = 50


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "naive"
    loss_family: str = "triplet"
    loss: LossConfig = field(default_factory=LossConfig)
    epochs_per_batch: int = 50
    lr: float = 1e-3
    tuples_per_step: int = 16
    steps_per_epoch: int | None = None  # None: one tuple per batch sample per epoch
    patience: int = 5
    min_delta: float = 1e-4
    mining: str = "random"
    nce_negatives: int = 9
    fisher_samples: int = 32
    ewc_accumulate: bool = False
    transfer: TransferConfig | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}")
        if self.loss_family not in FAMILIES:
            raise ConfigError(f"unknown loss family {self.loss_family!r}; expected one of {FAMILIES}")
        if self.kind == "lwf" and self.loss_family != "nce":
            raise ConfigError("lwf needs probabilistic outputs: use loss_family='nce'")
        if self.epochs_per_batch < 1 or self.tuples_per_step < 1:
            raise ConfigError("epochs_per_batch and tuples_per_step must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.mining not in ("random", "batch_hard"):
            raise ConfigError(f"unknown mining mode {self.mining!r}")
        if self.nce_negatives < 1 or self.fisher_samples < 1:
            raise ConfigError("nce_negatives and fisher_samples must be >= 1")
        if self.transfer is not None and self.transfer.transfer_lr > self.lr:
            raise ConfigError("transfer_lr must not exceed lr")

    @property
    def name(self) -> str:
        return self.kind


@dataclass
class RunState:
    net: EmbeddingNet
    adam: AdamState
    seed: int
    snapshot_prev: ParameterSnapshot | None = None
    fisher_prev: FisherDiagonal | None = None
    pending_fisher: FisherDiagonal | None = None
    old_net: EmbeddingNet | None = None
    history: list[MetricsRecord] = field(default_factory=list)
    epoch_losses: list[tuple[int, float]] = field(default_factory=list)
    first_regularizer: dict[int, float] = field(default_factory=dict)


class BatchFeed:
    """Sequential access to a plan's batches with an access log for audits."""

    def __init__(self, ds: InstanceDataset, plan: StreamPlan):
        self.ds = ds
        self.plan = plan
        self.events: list[tuple[str, int]] = []
        self.handed_out: list[ContinuousBatch] = []

    def __iter__(self):
        for t in range(self.plan.num_batches):
            batch = self.plan.materialize(self.ds, t)
            self.events.append(("open", t))
            self.handed_out.append(batch)
            try:
                yield batch
            finally:
                batch.release()
                self.events.append(("release", t))


# ---------------------------------------------------------------------------


def new_run_state(net_config: NetConfig, cfg: StrategyConfig, seed: int,
                  init: ParameterSnapshot | None = None, frozen=(), lr: float | None = None) -> RunState:
    net = init_xavier(net_config, seed)
    if init is not None:
        restore(net, init)
    if frozen:
        freeze(net, frozen)
    return RunState(net, AdamState.for_net(net, lr=cfg.lr if lr is None else lr), seed)


def prepare_batch(state: RunState, cfg: StrategyConfig, t: int) -> RunState:
    """Carry state from batch ``t-1`` to batch ``t``; a no-op at ``t == 0``."""
    if t == 0:
        return state
    kind = cfg.kind
    if kind == "finetune":
        freeze(state.net, [layer for layer in state.net.layers if layer != HEAD_LAYER])
    if kind in ("lfl", "lwf", "ewc"):
        state.snapshot_prev = snapshot(state.net)
        state.old_net = clone_from(state.snapshot_prev, state.net.config)
    if kind == "ewc":
        if state.pending_fisher is None:
            raise ContractError(f"ewc at batch {t} has no Fisher estimate from batch {t - 1}")
        if cfg.ewc_accumulate and state.fisher_prev is not None:
            state.fisher_prev = state.fisher_prev.combined(state.pending_fisher)
        else:
            state.fisher_prev = state.pending_fisher
        state.pending_fisher = None
    if kind == "lwf":
        fresh = init_xavier(state.net.config, _derived_seed(state.seed, t, 1))
        for name, p in state.net.params.items():
            if name.split(".", 1)[0] not in state.net.frozen:
                p.data = fresh.params[name].data.copy()
        state.adam = AdamState.for_net(state.net, lr=state.adam.lr)
    return state


def _derived_seed(seed: int, t: int, purpose: int) -> list[int]:
    return [int(seed), int(t), int(purpose)]


def _sample(batch: ContinuousBatch, cfg: StrategyConfig, rng, net: EmbeddingNet, n: int):
    if cfg.loss_family == "triplet":
        return sample_triplets(batch, n, rng, cfg.mining, net if cfg.mining == "batch_hard" else None)
    return sample_nce_tuples(batch, n, cfg.nce_negatives, rng)


def step_loss(state: RunState, cfg: StrategyConfig, images: np.ndarray, tuples) -> tuple[ad.Tensor, float | None]:
    """Total training loss for one step and the raw regularizer value (if any)."""
    net, lc = state.net, cfg.loss
    emb, pos_of = embed_tuple_images(net, images, tuples)
    task = task_loss_from_embeddings(emb, pos_of, tuples, cfg.loss_family, lc)
    kind = cfg.kind
    if kind == "lfl" and state.old_net is not None:
        used = sorted(pos_of)
        e_old = ad.Tensor._wrap(embed_numpy(state.old_net, images[used]), False)
        reg = lfl_regularizer(e_old, emb)
        total = ad.add(ad.mul_scalar(task, lc.lambda_c), ad.mul_scalar(reg, lc.lambda_e))
        return total, reg.item()
    if kind == "lwf" and state.old_net is not None:
        with ad.no_grad():
            old_emb, old_pos = embed_tuple_images(state.old_net, images, tuples)
            z_old = nce_batch_logits(old_emb, old_pos, tuples)
        z_new = nce_batch_logits(emb, pos_of, tuples)
        reg = lwf_distillation(z_old, z_new, lc.kd_temperature)
        return ad.add(task, ad.mul_scalar(reg, lc.lambda_kd)), reg.item()
    if kind == "ewc" and state.fisher_prev is not None:
        reg = ewc_penalty(net, state.snapshot_prev, state.fisher_prev, lc.lambda_ewc)
        return ad.add(task, reg), reg.item()
    return task, None


def train_batch(state: RunState, batch: ContinuousBatch, cfg: StrategyConfig, rng) -> RunState:
    """Epochs of sampling and Adam steps on one continuous batch.

    Stops after ``epochs_per_batch`` epochs, or earlier once the epoch-mean
    loss has improved on the previous epoch by less than ``min_delta`` for
    ``patience`` consecutive epochs.
    """
    if len(batch) == 0:
        raise ContractError(f"batch {batch.index} is empty")
    images = batch.images
    steps = cfg.steps_per_epoch or -(-len(batch) // cfg.tuples_per_step)
    prev, stale = np.inf, 0
    for epoch in range(cfg.epochs_per_batch):
        losses = []
        for step in range(steps):
            tuples = _sample(batch, cfg, rng, state.net, cfg.tuples_per_step)
            loss, reg = step_loss(state, cfg, images, tuples)
            if reg is not None and epoch == 0 and step == 0:
                state.first_regularizer[batch.index] = reg
            ad.backward(loss)
            adam_step(state.net, state.adam)
            losses.append(loss.item())
        mean = float(np.mean(losses))
        state.epoch_losses.append((batch.index, mean))
        stale = stale + 1 if prev - mean < cfg.min_delta else 0
        if stale >= cfg.patience:
            break
        prev = mean
    log.debug("batch %d: %d epochs, final loss %.4f", batch.index, epoch + 1, mean)
    if cfg.kind == "ewc":
        fisher_rng = np.random.default_rng(_derived_seed(state.seed, batch.index, 2))
        tuples = _sample(batch, cfg, fisher_rng, state.net, cfg.fisher_samples)
        state.pending_fisher = estimate_fisher(state.net, images, tuples, cfg.loss_family, cfg.loss)
    return state


# ---------------------------------------------------------------------------
# runners


def check_protocol(ds: InstanceDataset, plan: StreamPlan, split: RetrievalSplit) -> None:
    overlap = plan.instances(ds) & split.instances
    if overlap:
        raise ProtocolError(f"evaluation instances also appear in training: {sorted(overlap)}")


def _record(cfg: StrategyConfig, t: int, map_: float, ref_maps) -> MetricsRecord:
    map_ = round(map_, 2)
    if cfg.kind == "cumulative":
        ref = map_
    elif ref_maps is not None:
        ref = round(ref_maps[t], 2)
    else:
        return MetricsRecord(cfg.name, cfg.loss_family, t, map_, float("nan"), float("nan"))
    return MetricsRecord(cfg.name, cfg.loss_family, t, map_, ref, forget_ratio(ref, map_))


Hook = Callable[[StrategyConfig, int, RunState], None]


def run_stream(
    ds: InstanceDataset,
    plan: StreamPlan,
    cfg: StrategyConfig,
    net_config: NetConfig,
    split: RetrievalSplit,
    seed: int,
    ref_maps: list[float] | None = None,
    init: ParameterSnapshot | None = None,
    frozen=(),
    lr: float | None = None,
    feed: BatchFeed | None = None,
    on_batch_end: Hook | None = None,
) -> list[MetricsRecord]:
    """Train ``cfg`` over the plan and evaluate on the fixed split after every batch."""
    check_protocol(ds, plan, split)
    if cfg.kind == "cumulative":
        return run_cumulative(ds, plan, cfg, net_config, split, seed, init, frozen, lr, on_batch_end)
    state = new_run_state(net_config, cfg, seed, init, frozen, lr)
    rng = np.random.default_rng(seed)
    feed = feed or BatchFeed(ds, plan)
    for batch in feed:
        t = batch.index
        prepare_batch(state, cfg, t)
        train_batch(state, batch, cfg, rng)
        record = _record(cfg, t, mean_average_precision(state.net, split), ref_maps)
        state.history.append(record)
        if on_batch_end is not None:
            on_batch_end(cfg, t, state)
    return state.history


def run_cumulative(
    ds: InstanceDataset,
    plan: StreamPlan,
    cfg: StrategyConfig,
    net_config: NetConfig,
    split: RetrievalSplit,
    seed: int,
    init: ParameterSnapshot | None = None,
    frozen=(),
    lr: float | None = None,
    on_batch_end: Hook | None = None,
) -> list[MetricsRecord]:
    """Reference runs: at step ``t`` retrain from the initial state on batches ``0..t``."""
    check_protocol(ds, plan, split)
    cfg = replace(cfg, kind="cumulative")
    history = []
    for t in range(plan.num_batches):
        state = new_run_state(net_config, cfg, seed, init, frozen, lr)
        rng = np.random.default_rng(seed)
        idx = np.concatenate(plan.batches[: t + 1])
        union = ContinuousBatch(t, idx, ds.images[idx], ds.instance_ids[idx])
        train_batch(state, union, cfg, rng)
        history.append(_record(cfg, t, mean_average_precision(state.net, split), None))
        if on_batch_end is not None:
            on_batch_end(cfg, t, state)
    return history


def reference_maps(records: list[MetricsRecord]) -> list[float]:
    return [r.mAP for r in sorted(records, key=lambda r: r.t)]


# ---------------------------------------------------------------------------
# synthetic transfer


def conv_layers(net_config: NetConfig) -> list[str]:
    return [f"conv{i}" for i in range(net_config.conv_blocks)]


def pretrain(synth_ds: InstanceDataset, cfg: StrategyConfig, net_config: NetConfig, seed: int,
             epochs: int | None = None) -> ParameterSnapshot:
    """Train on the whole synthetic dataset as a single batch."""
    pre_cfg = replace(cfg, kind="cumulative", transfer=None,
                      epochs_per_batch=epochs or (cfg.transfer.pretrain_epochs if cfg.transfer else cfg.epochs_per_batch))
    state = new_run_state(net_config, pre_cfg, seed)
    idx = np.arange(len(synth_ds))
    train_batch(state, ContinuousBatch(0, idx, synth_ds.images, synth_ds.instance_ids), pre_cfg,
                np.random.default_rng(_derived_seed(seed, 0, 3)))
    return snapshot(state.net)


def transfer_frozen_layers(cfg: StrategyConfig, net_config: NetConfig) -> list[str]:
    tcfg = cfg.transfer or TransferConfig()
    if tcfg.frozen_layers is None:
        layers = conv_layers(net_config)
    else:
        layers = list(tcfg.frozen_layers)
    known = set(conv_layers(net_config)) | {f"fc{i}" for i in range(len(net_config.hidden_dims))} | {HEAD_LAYER}
    unknown = [layer for layer in layers if layer not in known]
    if unknown:
        raise ConfigError(f"transfer.frozen_layers names layers absent from the network: {unknown}")
    return layers


def synthetic_transfer(
    cfg: StrategyConfig,
    synth_ds: InstanceDataset,
    ds: InstanceDataset,
    plan: StreamPlan,
    split: RetrievalSplit,
    net_config: NetConfig,
    seed: int,
    ref_maps: list[float] | None = None,
    pretrained: ParameterSnapshot | None = None,
    on_batch_end: Hook | None = None,
) -> list[MetricsRecord]:
    """Pretrain on synthetic instances, freeze conv blocks, then run the stream at the transfer LR."""
    if synth_ds is ds:
        raise ProtocolError("synthetic pretraining data must be disjoint from the target stream")
    tcfg = cfg.transfer or TransferConfig()
    frozen = transfer_frozen_layers(cfg, net_config)
    if pretrained is None:
        pretrained = pretrain(synth_ds, cfg, net_config, seed)
    return run_stream(ds, plan, cfg, net_config, split, seed, ref_maps, init=pretrained, frozen=frozen,
                      lr=tcfg.transfer_lr, on_batch_end=on_batch_end)
