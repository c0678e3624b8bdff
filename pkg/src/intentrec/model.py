"""Full model assembly: forward pass over both graphs, scoring, and the
training objective (ranking loss + two contrastive terms + touched-row
regularizer).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, param
from .behaviors import (
    aggregate_user_items,
    batch_neighborhoods,
    behavior_contrastive_loss,
    fuse_behaviors,
    update_user_behavior,
    user_intent_vectors,
)
from .config import TrainConfig
from .data import InteractionGraph, KnowledgeGraph, RelationSubgraph, build_relation_subgraphs
from .errors import ContractError
from .intents import IntentBank, build_intents
from .kg_agg import FusionLayer, fuse_items, item_contrastive_loss, propagate_relation

log = logging.getLogger(__name__)


@dataclass
class ModelDims:
    num_users: int
    num_items: int
    num_entities: int
    num_relations: int
    num_behaviors: int


class ModelParams:
    """Every trainable tensor, with stable names for checkpointing."""

    def __init__(
        self,
        entity_emb: Tensor,
        relation_emb: Tensor,
        fusion_w: Tensor,
        fusion_b: Tensor,
        intent_logits: Tensor,
        user_intent_logits: list[Tensor],
        user_bases: list[Tensor],
    ):
        self.entity_emb = entity_emb
        self.relation_emb = relation_emb
        self.fusion_w = fusion_w
        self.fusion_b = fusion_b
        self.intent_logits = intent_logits
        self.user_intent_logits = user_intent_logits
        self.user_bases = user_bases  # one shared table, or one per behavior

    def named(self) -> list[tuple[str, Tensor]]:
        out = [
            ("entity_emb", self.entity_emb),
            ("relation_emb", self.relation_emb),
            ("fusion_w", self.fusion_w),
            ("fusion_b", self.fusion_b),
            ("intent_logits", self.intent_logits),
        ]
        out += [(f"user_intent_logits.{b}", t) for b, t in enumerate(self.user_intent_logits)]
        if len(self.user_bases) == 1:
            out.append(("user_base", self.user_bases[0]))
        else:
            out += [(f"user_base.{b}", t) for b, t in enumerate(self.user_bases)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def zero_grads(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def values_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values for name, t in self.named()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.named():
            if name not in values:
                raise ContractError(f"checkpoint is missing tensor {name!r}")
            if values[name].shape != t.values.shape:
                raise ContractError(
                    f"checkpoint tensor {name!r} has shape {values[name].shape}, "
                    f"expected {t.values.shape}"
                )
            t.values[...] = values[name]

    def base_for(self, b: int) -> Tensor:
        return self.user_bases[0] if len(self.user_bases) == 1 else self.user_bases[b]


def anchored_intent_logits(num_intents: int, num_relations: int, rng, strength: float = 4.0, noise: float = 0.1):
    """Relation-anchored attention init: intent k starts pinned to relation k
    (cyclically) at saturation; surplus intents start near-uniform.

    Near-uniform init for every row makes all intents numerically identical,
    which zeroes the user-attention gradients (they scale with intent
    differences) and the bank never escapes the collapsed saddle. Saturated
    anchors keep the intents distinct long enough to differentiate.
    """
    logits = rng.normal(0.0, noise, size=(num_intents, num_relations))
    for k in range(min(num_intents, num_relations)):
        logits[k] -= strength
        logits[k, k % num_relations] += 2.0 * strength
    return logits


def init_params(dims: ModelDims, cfg: TrainConfig, rng, scale: float = 0.1) -> ModelParams:
    """Fresh parameters: normal(0, scale) tables, relation-anchored intent logits."""
    d = cfg.dim

    def normal(*shape):
        return rng.normal(0.0, scale, size=shape)

    n_bases = dims.num_behaviors if cfg.per_behavior_base else 1
    return ModelParams(
        entity_emb=param(normal(dims.num_entities, d), "entity_emb"),
        relation_emb=param(normal(dims.num_relations, d), "relation_emb"),
        fusion_w=param(normal(d, dims.num_relations * d), "fusion_w"),
        fusion_b=param(normal(d), "fusion_b"),
        intent_logits=param(
            anchored_intent_logits(cfg.intents, dims.num_relations, rng), "intent_logits"
        ),
        user_intent_logits=[
            param(normal(dims.num_users, cfg.intents), f"user_intent_logits.{b}")
            for b in range(dims.num_behaviors)
        ],
        user_bases=[
            param(normal(dims.num_users, d), f"user_base.{b}") for b in range(n_bases)
        ],
    )


@dataclass
class Forward:
    """Everything one forward pass produces, still attached to its tape."""

    tape: Tape
    users: np.ndarray
    per_relation_layers: list[list[Tensor]]  # [layer 1..L][relation] -> (E, d)
    item_layers: list[Tensor]                # fused item tables, layers 1..L
    intents: Tensor                           # (P, d)
    gates: list[Tensor]                       # per behavior, (n, d) user intent mixes
    behavior_layers: list[list[Tensor]]       # [layer 1..L][behavior] -> (n, d)
    user_layers: list[Tensor]                 # fused user tables, layers 1..L
    user_final: Tensor                        # (n, d) summed over layers 1..L
    item_final: Tensor                        # (E, d) summed over layers 1..L

    @property
    def per_relation_top(self) -> list[Tensor]:
        return self.per_relation_layers[-1]

    @property
    def behavior_states(self) -> list[Tensor]:
        return self.behavior_layers[-1]


def _edgeless_subgraph(num_entities: int) -> RelationSubgraph:
    return RelationSubgraph(
        relation=0,
        num_entities=num_entities,
        triples=np.empty((0, 3), dtype=np.int64),
        sources=np.empty(0, dtype=np.int64),
        targets=np.empty(0, dtype=np.int64),
        degrees=np.zeros(num_entities, dtype=np.int64),
        offsets=np.zeros(num_entities + 1, dtype=np.int64),
        isolated=np.ones(num_entities),
    )


class Model:
    """Binds parameters to one interaction graph and one knowledge graph."""

    def __init__(
        self,
        graph: InteractionGraph,
        subgraphs: list[RelationSubgraph],
        dims: ModelDims,
        cfg: TrainConfig,
        params: ModelParams,
    ):
        self.graph = graph
        self.subgraphs = subgraphs
        self.dims = dims
        self.cfg = cfg
        self.params = params
        self.gamma = cfg.behavior_weights(dims.num_behaviors)

    @classmethod
    def build(cls, graph: InteractionGraph, kg: KnowledgeGraph, cfg: TrainConfig, rng) -> "Model":
        if kg.num_items != graph.num_items:
            raise ContractError(
                f"knowledge graph covers {kg.num_items} items, graph has {graph.num_items}"
            )
        subgraphs = build_relation_subgraphs(kg)
        if not subgraphs:
            # degenerate KG: one edgeless pseudo-relation keeps the fusion and
            # intent machinery well-formed; propagation is then the identity
            log.info("knowledge graph has no relations; using one edgeless pseudo-relation")
            subgraphs = [_edgeless_subgraph(kg.num_entities)]
        dims = ModelDims(
            num_users=graph.num_users,
            num_items=graph.num_items,
            num_entities=kg.num_entities,
            num_relations=len(subgraphs),
            num_behaviors=graph.num_behaviors,
        )
        params = init_params(dims, cfg, rng)
        return cls(graph, subgraphs, dims, cfg, params)

    def fusion(self) -> FusionLayer:
        return FusionLayer(self.params.fusion_w, self.params.fusion_b)

    def intent_bank(self) -> IntentBank:
        return IntentBank(self.params.intent_logits)

    def forward(self, users: np.ndarray) -> Forward:
        """Run the full pass for the given user rows (item side is always full)."""
        users = np.asarray(users, dtype=np.intp)
        p = self.params
        cfg = self.cfg
        tape = Tape()
        fusion = self.fusion()
        n_rel = self.dims.num_relations
        n_beh = self.dims.num_behaviors

        per_rel = [p.entity_emb] * n_rel
        per_relation_layers = []
        item_layers = []
        for _layer in range(cfg.layers):
            per_rel = [
                propagate_relation(tape, self.subgraphs[j], per_rel[j], tape.row(p.relation_emb, j))
                for j in range(n_rel)
            ]
            per_relation_layers.append(per_rel)
            item_layers.append(fuse_items(tape, per_rel, fusion))

        intents = build_intents(tape, p.relation_emb, self.intent_bank(), fusion)
        if cfg.no_intent_gate:
            ones = Tensor(np.ones((len(users), cfg.dim)))
            gates = [ones] * n_beh
        else:
            gates = [
                user_intent_vectors(tape, tape.gather(p.user_intent_logits[b], users), intents)
                for b in range(n_beh)
            ]

        neighborhoods = [
            batch_neighborhoods(self.graph.adjacency[b], users) for b in range(n_beh)
        ]
        states = [tape.gather(p.base_for(b), users) for b in range(n_beh)]
        behavior_layers = []
        user_layers = []
        for layer in range(cfg.layers):
            states = [
                update_user_behavior(
                    tape,
                    gates[b],
                    aggregate_user_items(
                        tape, item_layers[layer], neighborhoods[b][0], neighborhoods[b][1], len(users)
                    ),
                    states[b],
                )
                for b in range(n_beh)
            ]
            behavior_layers.append(states)
            user_layers.append(fuse_behaviors(tape, states, self.gamma))

        user_final, item_final = final_embeddings(tape, user_layers, item_layers)
        return Forward(
            tape=tape,
            users=users,
            per_relation_layers=per_relation_layers,
            item_layers=item_layers,
            intents=intents,
            gates=gates,
            behavior_layers=behavior_layers,
            user_layers=user_layers,
            user_final=user_final,
            item_final=item_final,
        )

    def full_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """Final user and item embedding tables as plain arrays (for evaluation)."""
        fwd = self.forward(np.arange(self.dims.num_users))
        return fwd.user_final.values.copy(), fwd.item_final.values[: self.dims.num_items].copy()


def final_embeddings(tape: Tape, user_layers: list[Tensor], item_layers: list[Tensor]):
    """Sum the per-layer tables over layers 1..L (layer 0 is excluded)."""
    user = user_layers[0] if len(user_layers) == 1 else tape.add_n(user_layers)
    item = item_layers[0] if len(item_layers) == 1 else tape.add_n(item_layers)
    return user, item


def score_pairs(tape: Tape, user_rows: Tensor, item_table: Tensor, item_idx: np.ndarray) -> Tensor:
    """Dot-product scores for aligned (user row, item index) pairs."""
    return tape.rowwise_dot(user_rows, tape.gather(item_table, np.asarray(item_idx, dtype=np.intp)))


def bpr_loss(tape: Tape, pos_scores: Tensor, neg_scores: Tensor) -> Tensor:
    """Mean pairwise ranking loss: -log sigmoid(positive - negative)."""
    return tape.scale(tape.mean(tape.log_sigmoid(tape.sub(pos_scores, neg_scores))), -1.0)


def batch_regularizer(
    tape: Tape, params: ModelParams, users: np.ndarray, items: np.ndarray
) -> Tensor:
    """Squared-norm of the rows the batch touches, plus the shared small tensors."""
    terms = [
        tape.sum_sq(tape.gather(params.entity_emb, items)),
        tape.sum_sq(params.relation_emb),
        tape.sum_sq(params.fusion_w),
        tape.sum_sq(params.fusion_b),
        tape.sum_sq(params.intent_logits),
    ]
    terms += [tape.sum_sq(tape.gather(t, users)) for t in params.user_intent_logits]
    terms += [tape.sum_sq(tape.gather(t, users)) for t in params.user_bases]
    return tape.add_n(terms)


def training_loss(
    model: Model,
    users: np.ndarray,
    pos_items: np.ndarray,
    neg_items: np.ndarray,
    cl_rng=None,
) -> tuple[Tape, Tensor, dict]:
    """Assemble the total objective for one batch of (user, pos, neg) triplets.

    Contrastive anchors reuse the batch: unique positive items for the item
    scheme, unique batch users for the behavior scheme. Terms with zero weight
    are skipped entirely so ablations match a reduced model bitwise.
    """
    cfg = model.cfg
    users = np.asarray(users, dtype=np.intp)
    pos_items = np.asarray(pos_items, dtype=np.intp)
    neg_items = np.asarray(neg_items, dtype=np.intp)
    if not (len(users) == len(pos_items) == len(neg_items)) or len(users) == 0:
        raise ContractError("training_loss: triplet arrays must be nonempty and aligned")

    uniq_users, inverse = np.unique(users, return_inverse=True)
    fwd = model.forward(uniq_users)
    tape = fwd.tape

    user_rows = tape.gather(fwd.user_final, inverse)
    pos_scores = score_pairs(tape, user_rows, fwd.item_final, pos_items)
    neg_scores = score_pairs(tape, user_rows, fwd.item_final, neg_items)
    bpr = bpr_loss(tape, pos_scores, neg_scores)
    loss = bpr
    parts = {"bpr": float(bpr.values), "icl": 0.0, "bcl": 0.0, "reg": 0.0}

    lam1 = 0.0 if cfg.disable_icl else cfg.lambda1
    lam2 = 0.0 if cfg.disable_bcl else cfg.lambda2
    policy = dict(
        similarity=cfg.similarity,
        include_positive=cfg.infonce_include_positive,
        sampled_negatives=cfg.sampled_negatives(),
        sample_pairs=cfg.cl_relation_pairs,
        rng=cl_rng,
    )
    if lam1 > 0:
        icl = item_contrastive_loss(
            tape, fwd.per_relation_top, np.unique(pos_items), cfg.tau, **policy
        )
        parts["icl"] = float(icl.values)
        loss = tape.add(loss, tape.scale(icl, lam1))
    if lam2 > 0:
        bcl = behavior_contrastive_loss(tape, fwd.behavior_states, cfg.tau, **policy)
        parts["bcl"] = float(bcl.values)
        loss = tape.add(loss, tape.scale(bcl, lam2))
    if cfg.lambda3 > 0:
        touched_items = np.unique(np.concatenate([pos_items, neg_items]))
        reg = batch_regularizer(tape, model.params, uniq_users, touched_items)
        parts["reg"] = float(reg.values)
        loss = tape.add(loss, tape.scale(reg, cfg.lambda3))
    parts["total"] = float(loss.values)
    return tape, loss, parts
