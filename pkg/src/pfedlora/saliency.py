"""Saliency scores for adapter entries and the iterative mask search."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Mapping, Sequence

import numpy as np

from .adapters import LoraPair
from .backbone import Backbone, InjectionSite, loss_and_grads, make_batch
from .exceptions import ConfigError, DataError
from .numerics import RngStream, top_k_indices
from .validation import check_fraction, check_positive_int, check_same_shape

METRICS = ("first", "second", "mixed")


def score_first_order(theta, grad) -> np.ndarray:
    """``|grad * theta|``: first-order estimate of the loss change."""
    check_same_shape(theta, grad, names=("theta", "grad"))
    return np.abs(np.asarray(grad) * np.asarray(theta))


def score_second_order(theta, fisher) -> np.ndarray:
    """``|theta * F * theta|`` with ``F`` a diagonal Fisher estimate."""
    check_same_shape(theta, fisher, names=("theta", "fisher"))
    theta = np.asarray(theta)
    return np.abs(theta * np.asarray(fisher) * theta)


def score_mixed(theta, grad, fisher) -> np.ndarray:
    check_same_shape(theta, grad, fisher, names=("theta", "grad", "fisher"))
    theta = np.asarray(theta)
    return np.abs(np.asarray(grad) * theta - 0.5 * theta * np.asarray(fisher) * theta)


@dataclass
class FisherEstimate:
    """Per-site diagonal Fisher ``(F_A, F_B)`` and the matching mean gradient."""

    diag: dict
    mean_grad: dict
    n_samples: int


def estimate_fisher(sequences: Sequence, backbone: Backbone, adapters: Mapping,
                    micro_batches: int = 1) -> FisherEstimate:
    """Mean of squared adapter gradients over ``micro_batches`` equal chunks."""
    micro_batches = check_positive_int(micro_batches, "micro_batches")
    if len(sequences) == 0:
        raise DataError("cannot estimate Fisher information on an empty batch")
    chunks = [c for c in np.array_split(np.arange(len(sequences)), micro_batches) if c.size]
    sq, mean = {}, {}
    for idx in chunks:
        _, grads = loss_and_grads(backbone, adapters, make_batch([sequences[i] for i in idx]))
        for site, (ga, gb) in grads.items():
            if site not in sq:
                sq[site] = [np.zeros_like(ga), np.zeros_like(gb)]
                mean[site] = [np.zeros_like(ga), np.zeros_like(gb)]
            sq[site][0] += ga * ga
            sq[site][1] += gb * gb
            mean[site][0] += ga
            mean[site][1] += gb
    k = len(chunks)
    return FisherEstimate(
        diag={s: (a / k, b / k) for s, (a, b) in sq.items()},
        mean_grad={s: (a / k, b / k) for s, (a, b) in mean.items()},
        n_samples=k,
    )


def compute_scores(metric: str, adapters: Mapping[InjectionSite, LoraPair],
                   estimate: FisherEstimate) -> dict:
    """Score every entry of every adapter's masked ``A`` and ``B``."""
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")
    scores = {}
    for site, pair in adapters.items():
        out = []
        for theta, g, f in zip(pair.masked_factors(), estimate.mean_grad[site], estimate.diag[site]):
            if metric == "first":
                out.append(score_first_order(theta, g))
            elif metric == "second":
                out.append(score_second_order(theta, f))
            else:
                out.append(score_mixed(theta, g, f))
        scores[site] = tuple(out)
    return scores


@dataclass(frozen=True)
class PruneSchedule:
    """Exponential keep schedule ``(1 - s) ** (t / T_p)``."""

    total_epochs: int
    sparsity: float

    def __post_init__(self):
        check_positive_int(self.total_epochs, "total_epochs")
        check_fraction(self.sparsity, "sparsity", closed_upper=False)

    def keep_fraction(self, t: int) -> float:
        if not 0 <= t <= self.total_epochs:
            raise ConfigError(f"epoch {t} outside [0, {self.total_epochs}]")
        return (1.0 - self.sparsity) ** (t / self.total_epochs)

    def keep_count(self, t: int, size: int) -> int:
        return int(math.floor(self.keep_fraction(t) * size + 0.5))


def iter_search(sequences: Sequence, backbone: Backbone,
                adapters: Mapping[InjectionSite, LoraPair], schedule: PruneSchedule,
                metric: str, rng: RngStream, score_batch: int = 64,
                micro_batch: int = 8) -> Iterator[tuple[int, dict]]:
    """Run the pruning loop, yielding ``(epoch, {site: (mask_a, mask_b)})``.

    Each epoch scores the currently masked adapters on a fresh batch drawn
    from ``rng`` and keeps, per matrix, the top ``keep_count(t)`` entries
    among those still retained. Ties go to the lower flat index.
    """
    if len(sequences) == 0:
        raise DataError("mask search needs a non-empty training split")
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")
    current = {site: pair.copy() for site, pair in adapters.items()}
    for pair in current.values():
        for m in (pair.mask_a, pair.mask_b):
            if schedule.keep_count(schedule.total_epochs, m.size) < 1:
                raise ConfigError(
                    f"sparsity {schedule.sparsity} would prune every entry of a "
                    f"{m.shape} matrix at {pair.site}")
    if schedule.sparsity == 0:
        yield schedule.total_epochs, {s: (p.mask_a, p.mask_b) for s, p in current.items()}
        return

    for t in range(1, schedule.total_epochs + 1):
        if len(sequences) <= score_batch:
            picked = list(sequences)
        else:
            idx = np.sort(rng.child(t).choice(len(sequences), score_batch))
            picked = [sequences[i] for i in idx]
        estimate = estimate_fisher(picked, backbone, current, math.ceil(len(picked) / micro_batch))
        scores = compute_scores(metric, current, estimate)
        for site, pair in current.items():
            new_masks = []
            for score, mask in zip(scores[site], (pair.mask_a, pair.mask_b)):
                keep = schedule.keep_count(t, mask.size)
                ranked = np.where(mask, score, -np.inf)
                new = np.zeros(mask.size, bool)
                new[top_k_indices(ranked, keep)] = True
                new_masks.append(new.reshape(mask.shape) & mask)
            current[site] = replace(pair, mask_a=new_masks[0], mask_b=new_masks[1])
        yield t, {s: (p.mask_a.copy(), p.mask_b.copy()) for s, p in current.items()}


def search_architecture(sequences: Sequence, backbone: Backbone,
                        adapters: Mapping[InjectionSite, LoraPair], schedule: PruneSchedule,
                        metric: str, rng: RngStream, score_batch: int = 64,
                        micro_batch: int = 8) -> dict:
    """Final per-site ``(mask_a, mask_b)`` after ``schedule.total_epochs`` epochs."""
    masks = None
    for _, masks in iter_search(sequences, backbone, adapters, schedule, metric, rng,
                                score_batch, micro_batch):
        pass
    return masks
