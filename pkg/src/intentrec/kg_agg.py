"""Per-relation knowledge propagation and cross-relation item fusion.

Each relation subgraph runs its own neighborhood-mean chain: a layer maps every
entity with neighbors to the mean of (neighbor embedding ⊙ relation embedding),
while isolated entities carry their previous state forward. A single affine
fusion layer (shared with intent construction) mixes the per-relation states
into one item embedding per layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .contrastive import multi_view_info_nce
from .data import RelationSubgraph
from .errors import ContractError


@dataclass
class FusionLayer:
    """Affine map from the (num_relations * dim) concatenation space to dim."""

    w: Tensor   # (dim, num_relations * dim)
    b: Tensor   # (dim,)

    @property
    def dim(self) -> int:
        return self.w.values.shape[0]

    @property
    def num_relations(self) -> int:
        return self.w.values.shape[1] // self.dim


def propagate_relation(tape: Tape, sub: RelationSubgraph, state: Tensor, rel: Tensor) -> Tensor:
    """One propagation layer over one relation subgraph.

    Entities with no neighbors under this relation keep their previous row; a
    subgraph with no edges at all is a no-op.
    """
    if state.values.shape[0] != sub.num_entities:
        raise ContractError(
            f"propagate_relation: state has {state.values.shape[0]} rows "
            f"for {sub.num_entities} entities"
        )
    if sub.sources.size == 0:
        return state
    messages = tape.mul(tape.gather(state, sub.sources), rel)
    aggregated = tape.segment_mean(messages, sub.targets, sub.num_entities)
    return tape.add(aggregated, tape.rowscale(state, sub.isolated))


def fuse_items(tape: Tape, per_relation: list[Tensor], fusion: FusionLayer) -> Tensor:
    """Affine fusion of the per-relation states, in relation-index order."""
    if len(per_relation) != fusion.num_relations:
        raise ContractError(
            f"fuse_items: got {len(per_relation)} relation states, "
            f"fusion layer expects {fusion.num_relations}"
        )
    return tape.affine(tape.concat_cols(per_relation), fusion.w, fusion.b)


def item_contrastive_loss(
    tape: Tape,
    per_relation: list[Tensor],
    batch_items: np.ndarray,
    tau: float,
    *,
    similarity: str = "cosine",
    include_positive: bool = False,
    sampled_negatives: int | None = None,
    max_enumerated_relations: int = 6,
    sample_pairs: int = 8,
    rng=None,
) -> Tensor:
    """Relation-view InfoNCE over the batch items at the top propagation layer.

    Positives pair an item with itself across two relations; negatives are the
    other batch items under the second relation.
    """
    if tau <= 0:
        raise ContractError("item_contrastive_loss: temperature must be positive")
    batch_items = np.asarray(batch_items, dtype=np.intp)
    views = [tape.gather(state, batch_items) for state in per_relation]
    return multi_view_info_nce(
        tape,
        views,
        tau,
        similarity=similarity,
        include_positive=include_positive,
        sampled_negatives=sampled_negatives,
        max_enumerated_views=max_enumerated_relations,
        sample_pairs=sample_pairs,
        rng=rng,
        what="item contrastive",
    )
