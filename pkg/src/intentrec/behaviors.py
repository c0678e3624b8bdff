"""Per-behavior user modeling: intent selection, neighborhood means, gated
residual updates, attention fusion across behaviors, and the behavior-level
contrastive loss.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor
from .contrastive import multi_view_info_nce
from .errors import ContractError


def user_intent_vectors(tape: Tape, logit_rows: Tensor, intents: Tensor) -> Tensor:
    """Per-user intent mixture for one behavior: softmax(logits) @ intents."""
    return tape.matmul(tape.softmax(logit_rows), intents)


def batch_neighborhoods(adjacency, users: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flatten the given users' item lists into (item_ids, batch_positions)."""
    lists = [adjacency[int(u)] for u in users]
    sizes = [len(lst) for lst in lists]
    if sum(sizes) == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    items = np.concatenate([lst for lst in lists if len(lst)]).astype(np.intp)
    positions = np.repeat(np.arange(len(users), dtype=np.intp), sizes)
    return items, positions


def aggregate_user_items(
    tape: Tape, item_table: Tensor, flat_items: np.ndarray, positions: np.ndarray, n_users: int
) -> Tensor:
    """Mean of interacted-item rows per batch position; empty neighborhoods give zero."""
    if flat_items.size == 0:
        return Tensor(np.zeros((n_users, item_table.values.shape[1])))
    rows = tape.gather(item_table, flat_items)
    return tape.segment_mean(rows, positions, n_users)


def update_user_behavior(tape: Tape, intent_vec: Tensor, agg_vec: Tensor, prev: Tensor) -> Tensor:
    """Gated residual update: intent ⊙ aggregate + previous state."""
    return tape.add(tape.mul(intent_vec, agg_vec), prev)


def fuse_behaviors(tape: Tape, states: list[Tensor], gamma: list[float]) -> Tensor:
    """Weighted sum of per-behavior states with the (normalized) behavior weights."""
    if len(states) != len(gamma):
        raise ContractError(
            f"fuse_behaviors: {len(states)} states for {len(gamma)} weights"
        )
    return tape.add_n([tape.scale(s, g) for s, g in zip(states, gamma)])


def behavior_contrastive_loss(
    tape: Tape,
    behavior_states: list[Tensor],
    tau: float,
    *,
    similarity: str = "cosine",
    include_positive: bool = False,
    sampled_negatives: int | None = None,
    max_enumerated_behaviors: int = 6,
    sample_pairs: int = 8,
    rng=None,
) -> Tensor:
    """Behavior-view InfoNCE: positives are the same user across two behaviors,
    negatives the other batch users under the second behavior. ``behavior_states``
    rows must correspond to distinct users in a shared order.
    """
    if tau <= 0:
        raise ContractError("behavior_contrastive_loss: temperature must be positive")
    return multi_view_info_nce(
        tape,
        behavior_states,
        tau,
        similarity=similarity,
        include_positive=include_positive,
        sampled_negatives=sampled_negatives,
        max_enumerated_views=max_enumerated_behaviors,
        sample_pairs=sample_pairs,
        rng=rng,
        what="behavior contrastive",
    )
