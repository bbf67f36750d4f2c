"""Powerset encoding of overlapping speaker activity.

Classes are ordered cardinality-major, then lexicographically by speaker
index, so with 4 speakers and at most 2 overlapping::

    0: {}   1: {0}  2: {1}  3: {2}  4: {3}
    5: {0,1} 6: {0,2} 7: {0,3} 8: {1,2} 9: {1,3} 10: {2,3}
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations, permutations
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class PowersetCatalog:
    max_speakers: int
    max_overlap: int
    classes: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @cached_property
    def mapping(self) -> np.ndarray:
        """(num_classes, max_speakers) 0/1 indicator matrix."""
        m = np.zeros((self.num_classes, self.max_speakers), dtype=np.float64)
        for c, subset in enumerate(self.classes):
            m[c, list(subset)] = 1.0
        return m

    @cached_property
    def _bitmask_to_class(self) -> np.ndarray:
        # -1 marks subsets that exceed max_overlap
        table = np.full(2 ** self.max_speakers, -1, dtype=np.int64)
        for c, subset in enumerate(self.classes):
            table[sum(1 << s for s in subset)] = c
        return table

    def subset(self, index: int) -> tuple[int, ...]:
        return self.classes[index]

    def __len__(self):
        return self.num_classes


def enumerate_powerset(max_speakers: int, max_overlap: int) -> PowersetCatalog:
    if not 0 <= max_overlap <= max_speakers:
        raise ValueError(f"need 0 <= max_overlap <= max_speakers, got ({max_speakers}, {max_overlap})")
    classes = tuple(
        subset
        for k in range(max_overlap + 1)
        for subset in combinations(range(max_speakers), k)
    )
    return PowersetCatalog(max_speakers, max_overlap, classes)


def truncate_active(active: Iterable[int], max_overlap: int,
                    weights: Sequence[float] | None = None) -> tuple[int, ...]:
    """Keep the ``max_overlap`` speakers with largest weight; ties go to lower index."""
    active = sorted(set(active))
    if len(active) <= max_overlap:
        return tuple(active)
    if weights is None:
        kept = active[:max_overlap]
    else:
        kept = sorted(active, key=lambda s: (-weights[s], s))[:max_overlap]
    return tuple(sorted(kept))


def multilabel_to_class(active: Iterable[int], catalog: PowersetCatalog,
                        weights: Sequence[float] | None = None) -> int:
    """Class index of a set of active speakers.

    Sets larger than the overlap cap are truncated to the speakers with the
    largest ``weights`` (e.g. coverage of the frame), ties by index.
    """
    active = sorted(set(active))
    if any(s < 0 or s >= catalog.max_speakers for s in active):
        raise ValueError(f"speaker index out of range for K={catalog.max_speakers}: {active}")
    subset = truncate_active(active, catalog.max_overlap, weights)
    return int(catalog._bitmask_to_class[sum(1 << s for s in subset)])


def multilabel_to_classes(reference: np.ndarray, catalog: PowersetCatalog,
                          coverage: np.ndarray | None = None) -> np.ndarray:
    """Vectorised ``multilabel_to_class`` over a (T, K) binary matrix."""
    reference = np.asarray(reference) > 0.5
    T, K = reference.shape
    if K != catalog.max_speakers:
        raise ValueError(f"reference has {K} speakers, catalog expects {catalog.max_speakers}")
    bits = reference.astype(np.int64) @ (1 << np.arange(K))
    classes = catalog._bitmask_to_class[bits]
    for t in np.flatnonzero(classes < 0):
        w = None if coverage is None else coverage[t]
        classes[t] = multilabel_to_class(np.flatnonzero(reference[t]), catalog, w)
    return classes


def class_posteriors_to_marginals(posteriors: np.ndarray, catalog: PowersetCatalog,
                                  atol: float = 1e-5) -> np.ndarray:
    """Per-speaker activity probability: sum of posteriors of classes containing it."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    sums = posteriors.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=atol, rtol=0):
        bad = np.max(np.abs(sums - 1.0))
        raise ValueError(f"posterior rows must sum to 1 (max deviation {bad:.2e})")
    return np.clip(posteriors @ catalog.mapping, 0.0, 1.0)


def _permutation_costs(log_post: np.ndarray, reference: np.ndarray, catalog: PowersetCatalog,
                       coverage: np.ndarray | None):
    perms = list(permutations(range(catalog.max_speakers)))
    T = log_post.shape[0]
    costs = np.empty(len(perms))
    classes = np.empty((len(perms), T), dtype=np.int64)
    for i, perm in enumerate(perms):
        perm = list(perm)
        cov = None if coverage is None else coverage[:, perm]
        classes[i] = multilabel_to_classes(reference[:, perm], catalog, cov)
        # correctly rounded sum, so permutations with equal cost tie exactly
        costs[i] = -math.fsum(log_post[np.arange(T), classes[i]])
    return perms, costs, classes


def align_reference(log_posteriors, reference, catalog: PowersetCatalog,
                    coverage: np.ndarray | None = None, return_permutation: bool = False):
    """Permute reference speakers to best match the prediction.

    Output speaker ``j`` is matched with reference column ``perm[j]``; the
    permutation minimises the summed powerset cross-entropy, ties broken
    by the lexicographically smallest permutation. Returns the per-frame
    class indices of the permuted reference (and the permutation when
    ``return_permutation``).
    """
    if isinstance(log_posteriors, torch.Tensor):
        log_posteriors = log_posteriors.detach().cpu().double().numpy()
    log_post = np.asarray(log_posteriors, dtype=np.float64)
    reference = np.asarray(reference)
    perms, costs, classes = _permutation_costs(log_post, reference, catalog, coverage)
    best = int(np.argmin(costs))  # first minimum == lexicographically smallest
    if return_permutation:
        return classes[best], perms[best]
    return classes[best]


def powerset_loss(log_posteriors, aligned_classes):
    """Mean per-frame cross-entropy; accepts (T, C) or (B, T, C) tensors/arrays."""
    as_numpy = not isinstance(log_posteriors, torch.Tensor)
    logp = torch.as_tensor(np.asarray(log_posteriors) if as_numpy else log_posteriors)
    target = torch.as_tensor(np.asarray(aligned_classes), dtype=torch.long, device=logp.device)
    if logp.shape[:-1] != target.shape:
        raise ValueError(f"shape mismatch: {tuple(logp.shape)} vs {tuple(target.shape)}")
    loss = F.nll_loss(logp.reshape(-1, logp.shape[-1]), target.reshape(-1))
    return float(loss) if as_numpy else loss
