"""Training loop: triplet/pair sampling, optimizers, early stopping.

One optimizer step per sampled unit. For the ranking losses an epoch
is ``n_pos`` units: the positives are cycled without replacement in a
per-epoch shuffled order, and fresh negatives are drawn uniformly for
each unit (two distinct ones for the triplet loss). For the bag-level
losses (cross-entropy, MSE) an epoch is one shuffled pass over all
bags. Model selection keeps the parameters of the epoch with the best
validation AUC, earliest epoch winning ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .losses import (
    LossConfig,
    LossVariant,
    bag_bce_loss,
    bag_mse_loss,
    pairwise_ranking_loss,
    triplet_ranking_loss,
)
from .metrics import auc
from .model import BagScore, ModelParams, backward_bag, init_params, score_bag
from .numerics import Rng, derive

_TRAIN_SALT = 0x7472616E  # "tran"

_TRAINABLE = (
    LossVariant.TRIPLET_RANKING,
    LossVariant.PAIRWISE_RANKING,
    LossVariant.CROSS_ENTROPY,
    LossVariant.MSE,
)


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss or score."""


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig
    hidden: int = 128
    topk_fraction: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 60
    patience: int = 20
    seed: int = 1
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.loss.variant not in _TRAINABLE:
            raise ValueError(f"loss {self.loss.variant.value!r} is not trainable on bag scores")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if not (0.0 < self.topk_fraction <= 1.0):
            raise ValueError(f"topk_fraction must be in (0, 1], got {self.topk_fraction}")
        if not (self.learning_rate > 0.0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass(frozen=True)
class EpochStats:
    loss_mean: float
    val_auc: float


@dataclass
class TrainReport:
    """Per-epoch history plus the best parameters by validation AUC."""

    epochs: tuple[EpochStats, ...]
    best_epoch: int
    params: ModelParams

    @property
    def best_val_auc(self) -> float:
        return self.epochs[self.best_epoch].val_auc


class Sgd:
    def __init__(self, learning_rate: float) -> None:
        self.learning_rate = learning_rate

    def step(self, vec: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return vec - self.learning_rate * grad


class Adam:
    """Adam with bias correction; defaults beta1=0.9, beta2=0.999,
    eps=1e-8."""

    def __init__(
        self,
        learning_rate: float,
        size: int,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, vec: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return vec - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class TripletSampler:
    """Cycles positive bags without replacement, reshuffling each epoch;
    negatives are drawn uniformly per unit."""

    def __init__(self, ds: Dataset, rng: Rng) -> None:
        self._bags = ds.bags
        self._pos = [i for i, b in enumerate(ds.bags) if b.label == 1]
        self._neg = [i for i, b in enumerate(ds.bags) if b.label == 0]
        self._rng = rng
        self._order: list[int] = []
        self._cursor = 0

    @property
    def n_pos(self) -> int:
        return len(self._pos)

    @property
    def n_neg(self) -> int:
        return len(self._neg)

    def _next_pos(self):
        if self._cursor >= len(self._order):
            self._order = list(self._pos)
            self._rng.shuffle(self._order)
            self._cursor = 0
        idx = self._order[self._cursor]
        self._cursor += 1
        return self._bags[idx]

    def next_triplet(self):
        """One positive and two distinct negatives, in random order."""
        if len(self._neg) < 2:
            raise ValueError(f"triplet sampling needs >= 2 negatives, got {len(self._neg)}")
        pos = self._next_pos()
        i = self._rng.bounded_int(len(self._neg))
        j = self._rng.bounded_int(len(self._neg) - 1)
        if j >= i:
            j += 1
        return pos, self._bags[self._neg[i]], self._bags[self._neg[j]]

    def next_pair(self):
        """One positive and one negative."""
        if not self._neg:
            raise ValueError("pair sampling needs >= 1 negative")
        pos = self._next_pos()
        return pos, self._bags[self._neg[self._rng.bounded_int(len(self._neg))]]


def score_dataset(params: ModelParams, ds: Dataset, fraction: float) -> list[BagScore]:
    """Score every bag in manifest order."""
    return [score_bag(params, bag, fraction) for bag in ds.bags]


def _val_auc(params: ModelParams, ds_val: Dataset, fraction: float) -> float:
    scores = [bs.score for bs in score_dataset(params, ds_val, fraction)]
    labels = [bag.label for bag in ds_val.bags]
    return auc(scores, labels)


def train(ds_train: Dataset, ds_val: Dataset, cfg: TrainConfig) -> TrainReport:
    """Run the configured objective and return the training history with
    the best-validation-AUC parameters.

    Deterministic for a fixed config: a single seeded stream drives
    weight init and all sampling, in that order.
    """
    if ds_train.n_pos < 1 or ds_train.n_neg < 2:
        raise ValueError(
            f"training set needs >= 1 positive and >= 2 negative bags, got "
            f"{ds_train.n_pos} and {ds_train.n_neg}"
        )
    if ds_val.n_pos < 1 or ds_val.n_neg < 1:
        raise ValueError(
            f"validation set needs both classes, got {ds_val.n_pos} positive "
            f"and {ds_val.n_neg} negative"
        )
    if len(ds_train.bags) and len(ds_val.bags) and ds_train.dim != ds_val.dim:
        raise ValueError(f"train dim {ds_train.dim} != validation dim {ds_val.dim}")

    rng = Rng(derive(cfg.seed, _TRAIN_SALT))
    params = init_params(ds_train.dim, cfg.hidden, rng)
    vec = params.to_vector()
    if cfg.optimizer == "adam":
        opt = Adam(cfg.learning_rate, vec.size, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    else:
        opt = Sgd(cfg.learning_rate)
    sampler = TripletSampler(ds_train, rng)
    variant = cfg.loss.variant
    frac = cfg.topk_fraction

    history: list[EpochStats] = []
    best_auc = -math.inf
    best_epoch = -1
    best_params = params.copy()
    stale = 0

    for epoch in range(cfg.epochs):
        losses: list[float] = []
        if variant in (LossVariant.TRIPLET_RANKING, LossVariant.PAIRWISE_RANKING):
            units = sampler.n_pos
        else:
            order = list(range(len(ds_train.bags)))
            rng.shuffle(order)
            units = len(order)
        for unit in range(units):
            try:
                if variant is LossVariant.TRIPLET_RANKING:
                    bag_p, bag_n1, bag_n2 = sampler.next_triplet()
                    out_p = score_bag(params, bag_p, frac)
                    out_n1 = score_bag(params, bag_n1, frac)
                    out_n2 = score_bag(params, bag_n2, frac)
                    loss = triplet_ranking_loss(out_p.score, out_n1.score, out_n2.score, cfg.loss)
                    g_p, g_n1, g_n2 = loss.grads
                    grad = (
                        backward_bag(params, bag_p, frac, g_p)
                        + backward_bag(params, bag_n1, frac, g_n1)
                        + backward_bag(params, bag_n2, frac, g_n2)
                    )
                elif variant is LossVariant.PAIRWISE_RANKING:
                    bag_p, bag_n = sampler.next_pair()
                    out_p = score_bag(params, bag_p, frac)
                    out_n = score_bag(params, bag_n, frac)
                    loss = pairwise_ranking_loss(out_p.score, out_n.score, cfg.loss)
                    g_p, g_n = loss.grads
                    grad = backward_bag(params, bag_p, frac, g_p) + backward_bag(
                        params, bag_n, frac, g_n
                    )
                else:
                    bag = ds_train.bags[order[unit]]
                    out = score_bag(params, bag, frac)
                    if variant is LossVariant.CROSS_ENTROPY:
                        loss = bag_bce_loss(out.score, bag.label)
                    else:
                        loss = bag_mse_loss(out.score, bag.label)
                    grad = backward_bag(params, bag, frac, loss.grads[0])
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, unit {unit}: {exc}") from exc
            if not math.isfinite(loss.value):
                raise TrainingDiverged(
                    f"epoch {epoch}, unit {unit}: non-finite loss {loss.value}"
                )
            losses.append(loss.value)
            vec = opt.step(vec, grad)
            params = ModelParams.from_vector(vec, ds_train.dim, cfg.hidden)

        try:
            val_auc = _val_auc(params, ds_val, frac)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch}, validation scoring: {exc}") from exc
        history.append(EpochStats(float(np.mean(losses)), val_auc))
        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    return TrainReport(tuple(history), best_epoch, best_params)


def write_train_log(report: TrainReport, path: str | Path) -> None:
    """Line-delimited history: ``epoch,loss,val_auc`` (CSV, six decimal
    places), one row per completed epoch."""
    lines = ["epoch,loss,val_auc"]
    lines += [
        f"{i},{st.loss_mean:.6f},{st.val_auc:.6f}" for i, st in enumerate(report.epochs)
    ]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


__all__ = [
    "Adam",
    "EpochStats",
    "Sgd",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "TripletSampler",
    "score_dataset",
    "train",
    "write_train_log",
]
