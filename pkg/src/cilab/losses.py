"""Metric-learning losses and continual-learning regularizers.

Embedding arguments are either single vectors ``[D]`` or row batches
``[N, D]``; batched losses are averaged over rows unless ``reduction`` says
otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .model import EmbeddingNet, ParameterSnapshot


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    tau: float = 1.0
    lambda_c: float = 1.0
    lambda_e: float = 0.1
    lambda_ewc: float = 100.0
    lambda_kd: float = 1.0
    kd_temperature: float = 2.0

    def __post_init__(self):
        for name in ("alpha", "lambda_c", "lambda_e", "lambda_ewc", "lambda_kd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0")
        if self.tau <= 0 or self.kd_temperature <= 0:
            raise ConfigError("temperatures must be > 0")


def _reduce(per_row: Tensor, reduction: str) -> Tensor:
    total = ad.reduce_sum(per_row)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return ad.mul_scalar(total, 1.0 / per_row.size)
    raise ValueError(f"unknown reduction {reduction!r}")


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    d = ad.sub(a, b)
    return ad.reduce_sum(ad.mul(d, d), axis=-1)


def triplet_loss(e_a: Tensor, e_p: Tensor, e_n: Tensor, alpha: float = 1.0, reduction: str = "sum") -> Tensor:
    """Hinge ``max(0, |a-p|^2 - |a-n|^2 + alpha)``, summed over triplets by default."""
    margin = ad.add_scalar(ad.sub(_sq_dist(e_a, e_p), _sq_dist(e_a, e_n)), alpha)
    return _reduce(ad.relu(margin), reduction)


def nce_logits(e_a: Tensor, e_p: Tensor, negatives) -> Tensor:
    """Similarity logits with the positive pair at index 0.

    Single tuple: ``e_a, e_p`` are ``[D]`` and ``negatives`` a list of ``[D]``
    tensors (or a ``[K, D]`` tensor); batched: ``[N, D]`` and ``[N, K, D]``.
    """
    if isinstance(negatives, Tensor):
        neg = negatives
    else:
        if len(negatives) == 0:
            raise ContractError("nce_logits needs at least one negative")
        neg = ad.stack(list(negatives), axis=e_a.data.ndim - 1)
    if neg.size == 0:
        raise ContractError("nce_logits needs at least one negative")
    single = e_a.data.ndim == 1
    if single:
        e_a = ad.reshape(e_a, (1, -1))
        e_p = ad.reshape(e_p, (1, -1))
        neg = ad.reshape(neg, (1,) + neg.shape)
    if e_a.shape != e_p.shape:
        raise DimensionError(f"anchor {e_a.shape} vs positive {e_p.shape}")
    pos = ad.reshape(e_p, (e_p.shape[0], 1, e_p.shape[1]))
    z = ad.batched_dot(e_a, ad.concat([pos, neg], axis=1))
    return ad.reshape(z, (z.shape[1],)) if single else z


def nce_loss(z: Tensor, tau: float = 1.0, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``z / tau`` against index 0."""
    if tau <= 0:
        raise ConfigError("tau must be > 0")
    logp = ad.log_softmax(ad.mul_scalar(z, 1.0 / tau))
    target = np.zeros(z.shape)
    target[..., 0] = 1.0
    per_row = ad.reduce_sum(ad.mul(logp, Tensor._wrap(target, False)), axis=-1)
    return ad.mul_scalar(_reduce(per_row, reduction), -1.0)


def lfl_regularizer(e_old: Tensor, e_new: Tensor, reduction: str = "mean") -> Tensor:
    """Squared Euclidean drift between old-model and new-model embeddings.

    ``e_old`` is treated as a constant.
    """
    if e_old.shape != e_new.shape:
        raise DimensionError(f"embedding shapes differ: {e_old.shape} vs {e_new.shape}")
    return _reduce(ad.reshape(_sq_dist(e_new, e_old.detach()), (-1,)), reduction)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def lwf_distillation(z_old: Tensor, z_new: Tensor, temperature: float = 2.0, reduction: str = "mean") -> Tensor:
    """``T^2 * CE(softmax(z_old/T), softmax(z_new/T))``; ``z_old`` is constant."""
    if z_old.shape != z_new.shape:
        raise DimensionError(f"logit shapes differ: {z_old.shape} vs {z_new.shape}")
    p_old = _softmax(z_old.data / temperature)
    logq = ad.log_softmax(ad.mul_scalar(z_new, 1.0 / temperature))
    per_row = ad.reduce_sum(ad.mul(logq, Tensor._wrap(p_old, False)), axis=-1)
    return ad.mul_scalar(_reduce(ad.reshape(per_row, (-1,)), reduction), -temperature**2)


# ---------------------------------------------------------------------------
# EWC


@dataclass(frozen=True)
class FisherDiagonal:
    values: dict[str, np.ndarray]
    sample_count: int

    def combined(self, other: "FisherDiagonal") -> "FisherDiagonal":
        return FisherDiagonal({n: self.values[n] + other.values[n] for n in self.values},
                              self.sample_count + other.sample_count)


def tuple_task_loss(net: EmbeddingNet, images: np.ndarray, tuples: Sequence, family: str,
                    cfg: LossConfig, reduction: str = "mean") -> Tensor:
    """Task loss of a list of triplets or NCE tuples drawn from ``images``.

    Each referenced image is embedded once; tuples index rows of ``images``.
    """
    emb, pos_of = embed_tuple_images(net, images, tuples)
    return task_loss_from_embeddings(emb, pos_of, tuples, family, cfg, reduction)


def embed_tuple_images(net: EmbeddingNet, images: np.ndarray, tuples: Sequence) -> tuple[Tensor, dict[int, int]]:
    used = sorted({i for tup in tuples for i in tup.indices()})
    pos_of = {idx: row for row, idx in enumerate(used)}
    return net.forward(images[used]), pos_of


def task_loss_from_embeddings(emb: Tensor, pos_of: dict[int, int], tuples: Sequence, family: str,
                              cfg: LossConfig, reduction: str = "mean") -> Tensor:
    if family == "triplet":
        a = ad.take(emb, [pos_of[t.anchor] for t in tuples])
        p = ad.take(emb, [pos_of[t.positive] for t in tuples])
        n = ad.take(emb, [pos_of[t.negative] for t in tuples])
        return triplet_loss(a, p, n, cfg.alpha, reduction)
    if family == "nce":
        return nce_loss(nce_batch_logits(emb, pos_of, tuples), cfg.tau, reduction)
    raise ConfigError(f"unknown loss family {family!r}")


def nce_batch_logits(emb: Tensor, pos_of: dict[int, int], tuples: Sequence) -> Tensor:
    k = len(tuples[0].negatives)
    if any(len(t.negatives) != k for t in tuples):
        raise ContractError("all NCE tuples in a step must share K")
    a = ad.take(emb, [pos_of[t.anchor] for t in tuples])
    p = ad.take(emb, [pos_of[t.positive] for t in tuples])
    neg = ad.take(emb, [[pos_of[j] for j in t.negatives] for t in tuples])
    return nce_logits(a, p, neg)


def estimate_fisher(net: EmbeddingNet, images: np.ndarray, tuples: Sequence, loss_kind: str,
                    cfg: LossConfig | None = None) -> FisherDiagonal:
    """Empirical diagonal Fisher: mean over tuples of squared loss gradients."""
    if len(tuples) == 0:
        raise ContractError("estimate_fisher needs at least one sample")
    cfg = cfg or LossConfig()
    return fisher_from_losses(
        net, [lambda t=t: tuple_task_loss(net, images, [t], loss_kind, cfg) for t in tuples]
    )


def fisher_from_losses(net: EmbeddingNet, per_sample_losses: Sequence) -> FisherDiagonal:
    """Average squared gradients of zero-argument loss builders.

    Parameter gradients present before the call are left untouched.
    """
    if len(per_sample_losses) == 0:
        raise ContractError("estimate_fisher needs at least one sample")
    acc = {n: np.zeros_like(t.data) for n, t in net.params.items()}
    saved = {n: t.grad for n, t in net.params.items()}
    for build in per_sample_losses:
        net.zero_grad()
        ad.backward(build())
        for n, t in net.params.items():
            if t.grad is not None:
                acc[n] += t.grad * t.grad
    for n, t in net.params.items():
        t.grad = saved[n]
    count = len(per_sample_losses)
    return FisherDiagonal({n: a / count for n, a in acc.items()}, count)


def ewc_penalty(net: EmbeddingNet, snap: ParameterSnapshot, fisher: FisherDiagonal, lambda_ewc: float) -> Tensor:
    """``(lambda/2) * sum_i F_i (theta_i - theta_old_i)^2`` over all parameters."""
    names = list(net.params)
    if set(names) != set(snap.params) or set(names) != set(fisher.values):
        raise ContractError("parameter names differ between net, snapshot and Fisher")
    terms = []
    for n in names:
        p = net.params[n]
        diff = ad.sub(p, Tensor._wrap(np.asarray(snap.params[n]), False))
        weighted = ad.mul(ad.mul(diff, diff), Tensor._wrap(fisher.values[n], False))
        terms.append(ad.reduce_sum(weighted))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul_scalar(total, lambda_ewc / 2.0)

