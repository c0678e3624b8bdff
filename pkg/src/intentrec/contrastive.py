"""Shared InfoNCE assembly used by both contrastive schemes.

Anchors are rows of one view; the positive is the same row in another view;
negatives are the other rows of that second view (in-batch estimator, optionally
subsampled). The denominator excludes the positive pair unless
``include_positive`` asks for the conventional variant.
"""

from __future__ import annotations

import logging

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ContractError

log = logging.getLogger(__name__)


def ordered_view_pairs(n_views: int, max_enumerated: int, sample_n: int, rng) -> list[tuple[int, int]]:
    """All ordered view pairs when few views; otherwise a sampled subset per call."""
    pairs = [(a, b) for a in range(n_views) for b in range(n_views) if a != b]
    if n_views <= max_enumerated or len(pairs) <= sample_n:
        return pairs
    if rng is None:
        raise ContractError("pair sampling requested without an rng")
    chosen = rng.choice(len(pairs), size=sample_n, replace=False)
    return [pairs[int(c)] for c in chosen]


def negatives_mask(n: int, sampled: int | None, include_positive: bool, rng) -> np.ndarray:
    """Boolean (n, n) denominator mask: True entries participate."""
    if sampled is None:
        mask = ~np.eye(n, dtype=bool)
    else:
        mask = np.zeros((n, n), dtype=bool)
        k = min(sampled, n - 1)
        for i in range(n):
            others = np.concatenate([np.arange(i), np.arange(i + 1, n)])
            mask[i, rng.choice(others, size=k, replace=False)] = True
    if include_positive:
        mask |= np.eye(n, dtype=bool)
    return mask


def info_nce_pair(
    tape: Tape,
    anchor_view: Tensor,
    other_view: Tensor,
    tau: float,
    mask: np.ndarray,
    similarity: str = "cosine",
) -> Tensor:
    """Mean over anchors of -log softscore(positive | denominator entries)."""
    if anchor_view.shape != other_view.shape or anchor_view.values.ndim != 2:
        raise ContractError(
            f"info_nce_pair: views {anchor_view.shape} vs {other_view.shape}"
        )
    if similarity == "cosine":
        a = tape.normalize_rows(anchor_view)
        b = tape.normalize_rows(other_view)
    else:
        a, b = anchor_view, other_view
    sim = tape.scale(tape.matmul_nt(a, b), 1.0 / tau)
    pos = tape.take_diag(sim)
    denom = tape.masked_logsumexp_rows(sim, mask)
    return tape.mean(tape.sub(denom, pos))


def multi_view_info_nce(
    tape: Tape,
    views: list[Tensor],
    tau: float,
    *,
    similarity: str = "cosine",
    include_positive: bool = False,
    sampled_negatives: int | None = None,
    max_enumerated_views: int = 6,
    sample_pairs: int = 8,
    rng=None,
    what: str = "contrastive",
) -> Tensor:
    """Mean InfoNCE over anchors and ordered view pairs; degenerate inputs yield 0."""
    if len(views) < 2:
        log.warning("%s loss skipped: fewer than two views", what)
        return Tensor(np.zeros(()))
    n = views[0].values.shape[0]
    if n < 2:
        log.warning("%s loss skipped: batch of size %d has no negatives", what, n)
        return Tensor(np.zeros(()))
    pairs = ordered_view_pairs(len(views), max_enumerated_views, sample_pairs, rng)
    losses = []
    for a, b in pairs:
        mask = negatives_mask(n, sampled_negatives, include_positive, rng)
        losses.append(info_nce_pair(tape, views[a], views[b], tau, mask, similarity))
    return tape.scale(tape.add_n(losses), 1.0 / len(losses))
