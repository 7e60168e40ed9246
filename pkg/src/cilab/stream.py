"""Instance datasets, continuous-batch stream plans and tuple samplers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, HistoryAccessError, StreamStarvationError

REGIMES = ("random", "balanced", "incremental")
MINING_POOL = 32


@dataclass
class InstanceDataset:
    """Labelled images: ``images[i]`` shows instance ``instance_ids[i]`` from view ``view_ids[i]``."""

    images: np.ndarray
    instance_ids: np.ndarray
    view_ids: np.ndarray
    latents: dict[int, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        self.view_ids = np.asarray(self.view_ids, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (n,c,h,w), got {self.images.shape}")
        n = len(self.images)
        if len(self.instance_ids) != n or len(self.view_ids) != n:
            raise ConfigError("images, instance_ids and view_ids must have equal length")
        for iid in self.instances:
            views = self.view_ids[self.instance_ids == iid]
            if len(views) < 2:
                raise ConfigError(f"instance {iid} has fewer than 2 samples")
            if len(np.unique(views)) != len(views):
                raise ConfigError(f"instance {iid} has duplicate view ids")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def instances(self) -> list[int]:
        return [int(i) for i in np.unique(self.instance_ids)]

    def indices_of(self, instance_id: int) -> np.ndarray:
        return np.flatnonzero(self.instance_ids == instance_id)

    def subset_instances(self, instance_ids: Sequence[int]) -> "InstanceDataset":
        keep = np.isin(self.instance_ids, list(instance_ids))
        latents = None
        if self.latents is not None:
            latents = {i: self.latents[i] for i in instance_ids}
        return InstanceDataset(self.images[keep], self.instance_ids[keep], self.view_ids[keep], latents, dict(self.meta))


class ContinuousBatch:
    """One time-step of the stream; its pixels become unreachable once released."""

    def __init__(self, index: int, sample_indices: np.ndarray, images: np.ndarray, instance_ids: np.ndarray):
        self.index = index
        self.sample_indices = np.asarray(sample_indices, dtype=np.int64)
        self._images = images
        self.instance_ids = np.asarray(instance_ids, dtype=np.int64)

    @property
    def images(self) -> np.ndarray:
        if self._images is None:
            raise HistoryAccessError(f"continuous batch {self.index} was released")
        return self._images

    @property
    def released(self) -> bool:
        return self._images is None

    def release(self) -> None:
        self._images = None

    @property
    def instance_ids_present(self) -> set[int]:
        return {int(i) for i in np.unique(self.instance_ids)}

    def __len__(self) -> int:
        return len(self.sample_indices)


@dataclass
class StreamPlan:
    regime: str
    num_batches: int
    seed: int
    batches: list[np.ndarray]

    def materialize(self, ds: InstanceDataset, t: int) -> ContinuousBatch:
        idx = self.batches[t]
        return ContinuousBatch(t, idx, ds.images[idx], ds.instance_ids[idx])

    def instances(self, ds: InstanceDataset) -> set[int]:
        return {int(i) for b in self.batches for i in ds.instance_ids[b]}

    def to_json(self) -> str:
        return json.dumps({
            "regime": self.regime,
            "num_batches": self.num_batches,
            "seed": self.seed,
            "batches": [[int(i) for i in b] for b in self.batches],
        })

    @classmethod
    def from_json(cls, text: str) -> "StreamPlan":
        d = json.loads(text)
        return cls(d["regime"], d["num_batches"], d["seed"], [np.asarray(b, dtype=np.int64) for b in d["batches"]])


def _check_b(b: int) -> None:
    if b < 1:
        raise ConfigError("num_batches must be >= 1")


def split_random(ds: InstanceDataset, num_batches: int, seed: int) -> StreamPlan:
    _check_b(num_batches)
    if num_batches > len(ds):
        raise ConfigError(f"num_batches={num_batches} exceeds {len(ds)} samples")
    perm = np.random.default_rng(seed).permutation(len(ds))
    parts = [np.sort(p) for p in np.array_split(perm, num_batches)]
    return StreamPlan("random", num_batches, seed, parts)


def split_balanced(ds: InstanceDataset, num_batches: int, seed: int) -> StreamPlan:
    _check_b(num_batches)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_batches)]
    for iid in ds.instances:
        members = ds.indices_of(iid)
        if len(members) % num_batches:
            raise ConfigError(
                f"instance {iid} has {len(members)} samples, not divisible by num_batches={num_batches}"
            )
        for t, chunk in enumerate(np.split(rng.permutation(members), num_batches)):
            parts[t].append(chunk)
    return StreamPlan("balanced", num_batches, seed, [np.sort(np.concatenate(p)) for p in parts])


def split_incremental(ds: InstanceDataset, num_batches: int, seed: int) -> StreamPlan:
    _check_b(num_batches)
    instances = np.asarray(ds.instances)
    if num_batches > len(instances):
        raise ConfigError(f"num_batches={num_batches} exceeds {len(instances)} instances")
    groups = np.array_split(np.random.default_rng(seed).permutation(instances), num_batches)
    parts = [np.flatnonzero(np.isin(ds.instance_ids, g)) for g in groups]
    return StreamPlan("incremental", num_batches, seed, parts)


def make_plan(ds: InstanceDataset, regime: str, num_batches: int, seed: int) -> StreamPlan:
    splitters = {"random": split_random, "balanced": split_balanced, "incremental": split_incremental}
    if regime not in splitters:
        raise ConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    return splitters[regime](ds, num_batches, seed)


# ---------------------------------------------------------------------------
# tuple sampling; indices are positions inside the batch


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    labels: tuple[int, int]

    def indices(self) -> tuple[int, ...]:
        return (self.anchor, self.positive, self.negative)


@dataclass(frozen=True)
class NceTuple:
    anchor: int
    positive: int
    negatives: tuple[int, ...]
    label: int
    replaced: bool = False

    @property
    def K(self) -> int:
        return len(self.negatives)

    def indices(self) -> tuple[int, ...]:
        return (self.anchor, self.positive) + self.negatives


def _groups(batch: ContinuousBatch) -> tuple[dict[int, np.ndarray], list[int]]:
    ids = batch.instance_ids
    groups = {int(i): np.flatnonzero(ids == i) for i in np.unique(ids)}
    eligible = [i for i, g in groups.items() if len(g) >= 2]
    if len(groups) < 2:
        raise StreamStarvationError(
            f"batch {batch.index} holds {len(groups)} instance(s); at least 2 are needed for negatives"
        )
    if not eligible:
        raise StreamStarvationError(f"batch {batch.index} has no instance with two samples")
    return groups, eligible


def sample_triplets(batch: ContinuousBatch, n: int, seed, mining: str = "random", net=None) -> list[Triplet]:
    """Draw ``n`` triplets from this batch only.

    ``batch_hard`` picks, per anchor, the closest of up to 32 candidate
    negatives under ``net``.
    """
    if mining not in ("random", "batch_hard"):
        raise ConfigError(f"unknown mining mode {mining!r}")
    if mining == "batch_hard" and net is None:
        raise ConfigError("batch_hard mining needs the current network")
    rng = np.random.default_rng(seed)
    groups, eligible = _groups(batch)
    ids = batch.instance_ids
    emb = None
    if mining == "batch_hard":
        from .model import embed_numpy

        emb = embed_numpy(net, batch.images)
    out = []
    for _ in range(n):
        inst = eligible[rng.integers(len(eligible))]
        a, p = rng.choice(groups[inst], size=2, replace=False)
        pool = np.flatnonzero(ids != inst)
        if emb is None:
            neg = int(pool[rng.integers(len(pool))])
        else:
            cand = rng.choice(pool, size=min(MINING_POOL, len(pool)), replace=False)
            d = np.sum((emb[cand] - emb[a]) ** 2, axis=1)
            neg = int(cand[np.argmin(d)])
        out.append(Triplet(int(a), int(p), neg, (inst, int(ids[neg]))))
    return out


def sample_nce_tuples(batch: ContinuousBatch, n: int, K: int, seed) -> list[NceTuple]:
    """Draw ``n`` tuples with ``K`` negatives each, from this batch only."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    rng = np.random.default_rng(seed)
    groups, eligible = _groups(batch)
    ids = batch.instance_ids
    out = []
    for _ in range(n):
        inst = eligible[rng.integers(len(eligible))]
        a, p = rng.choice(groups[inst], size=2, replace=False)
        pool = np.flatnonzero(ids != inst)
        replaced = len(pool) < K
        negs = rng.choice(pool, size=K, replace=replaced)
        out.append(NceTuple(int(a), int(p), tuple(int(j) for j in negs), inst, replaced))
    return out
