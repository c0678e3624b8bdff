"""Ranked top-K evaluation: one held-out positive against sampled negatives.

Negatives are drawn per (user, seed) so candidate sets are reproducible
independently of evaluation order. Ties rank the positive below equal-scoring
negatives (pessimistic), so an untrained constant model cannot score well.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSplit
from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass
class EvalCandidates:
    users: np.ndarray                 # evaluated users, ascending
    positives: np.ndarray             # aligned held-out item per user
    negatives: list[np.ndarray]       # aligned sampled negative items per user
    seed: int
    requested: int                    # negatives asked for (99 by default)
    short_users: int = 0              # users with fewer eligible negatives than requested

    def __len__(self) -> int:
        return len(self.users)


def build_candidates(
    split: DatasetSplit,
    seed: int,
    num_negatives: int = 99,
    exclude: str = "target",
) -> EvalCandidates:
    """Sample the per-user candidate sets for the ranked protocol.

    ``exclude`` controls which of the user's items are barred from the negative
    pool: "target" bars train+test target-behavior items only (auxiliary
    interactions stay eligible), "all" bars every behavior's items.
    """
    if exclude not in ("target", "all"):
        raise ValidationError(f"unknown exclusion policy {exclude!r}")
    graph = split.train
    users, positives, negatives = [], [], []
    short = 0
    for u in sorted(split.test):
        pos = split.test[u]
        if exclude == "target":
            owned = set(graph.adjacency[graph.target_behavior][u].tolist())
        else:
            owned = set()
            for b in range(graph.num_behaviors):
                owned.update(graph.adjacency[b][u].tolist())
        owned.add(pos)
        eligible = np.setdiff1d(np.arange(graph.num_items), np.fromiter(owned, dtype=np.int64))
        if eligible.size == 0:
            log.warning("user %d has no eligible negatives; skipped", u)
            continue
        take = min(num_negatives, eligible.size)
        if take < num_negatives:
            short += 1
        rng = np.random.default_rng([seed, u])
        negs = rng.choice(eligible, size=take, replace=False)
        users.append(u)
        positives.append(pos)
        negatives.append(np.asarray(negs, dtype=np.int64))
    return EvalCandidates(
        users=np.array(users, dtype=np.int64),
        positives=np.array(positives, dtype=np.int64),
        negatives=negatives,
        seed=seed,
        requested=num_negatives,
        short_users=short,
    )


def rank_positives(user_table: np.ndarray, item_table: np.ndarray, cands: EvalCandidates) -> np.ndarray:
    """Rank of each held-out item in its candidate set (1 = best).

    rank = 1 + count of candidates scoring >= the positive (strictly greater
    plus ties, i.e. the pessimistic tie rule).
    """
    ranks = np.empty(len(cands), dtype=np.int64)
    for i, (u, pos, negs) in enumerate(zip(cands.users, cands.positives, cands.negatives)):
        uvec = user_table[u]
        pos_score = float(uvec @ item_table[pos])
        neg_scores = item_table[negs] @ uvec
        ranks[i] = 1 + int(np.count_nonzero(neg_scores >= pos_score))
    return ranks


def hr_at_k(ranks: np.ndarray, k: int) -> float:
    """Fraction of users whose held-out item lands in the top k."""
    if len(ranks) == 0:
        return math.nan
    return float(np.mean(ranks <= k))


def ndcg_at_k(ranks: np.ndarray, k: int) -> float:
    """Mean position-discounted gain, single-relevant-item form."""
    if len(ranks) == 0:
        return math.nan
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gains))


@dataclass
class MetricsReport:
    metrics: dict  # (metric name, k) -> value
    n_users: int
    seed: int
    requested_negatives: int
    short_users: int = 0
    ks: tuple[int, ...] = (5, 10)
    notes: dict = field(default_factory=dict)

    def validate(self) -> None:
        for (name, k), v in self.metrics.items():
            if not math.isnan(v) and not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name}@{k} = {v} out of [0, 1]")
        for k in self.ks:
            hr = self.metrics.get(("HR", k))
            ndcg = self.metrics.get(("NDCG", k))
            if hr is not None and ndcg is not None and not math.isnan(hr) and ndcg > hr + 1e-12:
                raise ValidationError(f"NDCG@{k} exceeds HR@{k}")

    def machine_lines(self) -> list[str]:
        lines = ["metric\tK\tvalue\tn_users\tseed"]
        for (name, k) in sorted(self.metrics):
            lines.append(
                f"{name}\t{k}\t{self.metrics[(name, k)]!r}\t{self.n_users}\t{self.seed}"
            )
        return lines

    def human_table(self) -> str:
        rows = [f"ranked evaluation over {self.n_users} users "
                f"({self.requested_negatives} sampled negatives, seed {self.seed})"]
        if self.short_users:
            rows.append(f"note: {self.short_users} users had fewer eligible negatives")
        rows.append("  metric     " + "".join(f"@{k:<8}" for k in self.ks))
        for name in ("HR", "NDCG"):
            vals = "".join(f"{self.metrics.get((name, k), math.nan):<9.4f}" for k in self.ks)
            rows.append(f"  {name:<9}  {vals}")
        return "\n".join(rows)


def evaluate_tables(
    user_table: np.ndarray,
    item_table: np.ndarray,
    cands: EvalCandidates,
    ks: tuple[int, ...] = (5, 10),
) -> MetricsReport:
    """HR@K / NDCG@K for a scored table pair under prepared candidates."""
    ranks = rank_positives(user_table, item_table, cands)
    if len(ranks) == 0:
        log.warning("empty test set: metrics undefined")
    metrics = {}
    for k in ks:
        metrics[("HR", k)] = hr_at_k(ranks, k)
        metrics[("NDCG", k)] = ndcg_at_k(ranks, k)
    report = MetricsReport(
        metrics=metrics,
        n_users=len(ranks),
        seed=cands.seed,
        requested_negatives=cands.requested,
        short_users=cands.short_users,
        ks=tuple(ks),
    )
    report.validate()
    return report
