"""Interaction-graph and knowledge-graph loading, filtering, and splitting.

All structures are immutable after construction and safe for concurrent reads.
Raw ids in the input files are arbitrary strings; internal ids are dense 0-based
integers with the bidirectional maps retained for reporting.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)


@dataclass
class InteractionGraph:
    """Multi-behavior user-item edges with per-behavior adjacency and its transpose."""

    num_users: int
    num_items: int
    behaviors: tuple[str, ...]
    target_behavior: int
    adjacency: list[list[np.ndarray]]       # [b][u] -> sorted item indices
    rev_adjacency: list[list[np.ndarray]]   # [b][i] -> sorted user indices
    user_ids: list[str] | None = None
    item_ids: list[str] | None = None
    duplicates_dropped: int = 0

    @property
    def num_behaviors(self) -> int:
        return len(self.behaviors)

    def num_edges(self, b: int) -> int:
        return sum(len(a) for a in self.adjacency[b])

    def edge_arrays(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        """Flat (users, items) arrays for behavior b, sorted by (user, item)."""
        lists = self.adjacency[b]
        users = np.repeat(np.arange(self.num_users), [len(a) for a in lists])
        items = np.concatenate(lists) if users.size else np.empty(0, dtype=np.int64)
        return users, items.astype(np.int64)

    def validate(self) -> None:
        if not (0 <= self.target_behavior < self.num_behaviors):
            raise ValidationError(
                f"target behavior index {self.target_behavior} out of range"
            )
        for b in range(self.num_behaviors):
            fwd = 0
            for u, items in enumerate(self.adjacency[b]):
                if len(items) != len(set(items.tolist())):
                    raise ValidationError(f"duplicate edge for user {u} behavior {b}")
                if items.size and (items.min() < 0 or items.max() >= self.num_items):
                    raise ValidationError(f"item index out of range for user {u}")
                fwd += len(items)
            rev = sum(len(a) for a in self.rev_adjacency[b])
            if fwd != rev:
                raise ValidationError(
                    f"behavior {b}: adjacency has {fwd} edges but transpose has {rev}"
                )
            for i, users in enumerate(self.rev_adjacency[b]):
                if users.size and (users.min() < 0 or users.max() >= self.num_users):
                    raise ValidationError(f"user index out of range for item {i}")


def build_interaction_graph(
    num_users: int,
    num_items: int,
    behaviors: tuple[str, ...],
    target_behavior: int,
    edges: list[tuple[int, int, int]],
    user_ids=None,
    item_ids=None,
    duplicates_dropped: int = 0,
) -> InteractionGraph:
    """Assemble adjacency and reverse adjacency from (user, item, behavior) edges."""
    adjacency = [[[] for _ in range(num_users)] for _ in behaviors]
    rev = [[[] for _ in range(num_items)] for _ in behaviors]
    for u, i, b in edges:
        adjacency[b][u].append(i)
        rev[b][i].append(u)
    adj_arrays = [
        [np.array(sorted(lst), dtype=np.int64) for lst in per_user]
        for per_user in adjacency
    ]
    rev_arrays = [
        [np.array(sorted(lst), dtype=np.int64) for lst in per_item] for per_item in rev
    ]
    graph = InteractionGraph(
        num_users=num_users,
        num_items=num_items,
        behaviors=tuple(behaviors),
        target_behavior=target_behavior,
        adjacency=adj_arrays,
        rev_adjacency=rev_arrays,
        user_ids=user_ids,
        item_ids=item_ids,
        duplicates_dropped=duplicates_dropped,
    )
    graph.validate()
    return graph


def _read_rows(path, n_fields: int):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"file not found: {path}")
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != n_fields:
                raise ParseError(
                    f"{path}:{lineno}: expected {n_fields} tab-separated fields, "
                    f"got {len(fields)}"
                )
            yield lineno, fields


def load_interactions(path, behavior_names: list[str], target_behavior: str | None = None) -> InteractionGraph:
    """Read `user<TAB>item<TAB>behavior` rows into a reindexed graph.

    Duplicate (user, item, behavior) rows are dropped with a logged count. The
    target behavior defaults to the last name in ``behavior_names``.
    """
    behavior_names = list(behavior_names)
    if target_behavior is None:
        target_behavior = behavior_names[-1]
    if target_behavior not in behavior_names:
        raise ValidationError(f"unknown target behavior {target_behavior!r}")
    b_index = {name: i for i, name in enumerate(behavior_names)}

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    seen: set[tuple[int, int, int]] = set()
    edges: list[tuple[int, int, int]] = []
    dups = 0
    for lineno, (raw_u, raw_i, raw_b) in _read_rows(path, 3):
        if raw_b not in b_index:
            raise ValidationError(
                f"{path}:{lineno}: unknown behavior {raw_b!r} "
                f"(expected one of {behavior_names})"
            )
        u = user_index.setdefault(raw_u, len(user_index))
        i = item_index.setdefault(raw_i, len(item_index))
        edge = (u, i, b_index[raw_b])
        if edge in seen:
            dups += 1
            continue
        seen.add(edge)
        edges.append(edge)
    if dups:
        log.info("dropped %d duplicate interaction rows", dups)
    return build_interaction_graph(
        num_users=len(user_index),
        num_items=len(item_index),
        behaviors=tuple(behavior_names),
        target_behavior=b_index[target_behavior],
        edges=edges,
        user_ids=list(user_index),
        item_ids=list(item_index),
        duplicates_dropped=dups,
    )


@dataclass
class KnowledgeGraph:
    """Entity-relation-entity triples; entities [0, num_items) are the items.

    Items absent from the triples file still occupy their entity slot (they
    participate through the trainable base embedding only) and are listed in
    ``uncovered_items`` as the coverage report.
    """

    num_entities: int
    num_relations: int
    num_items: int
    triples: np.ndarray  # (T, 3) int64 rows [head, relation, tail]
    entity_ids: list[str] | None = None
    relation_ids: list[str] | None = None
    uncovered_items: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    @property
    def item_entity_map(self) -> np.ndarray:
        # identity after reindexing: item i is entity i
        return np.arange(self.num_items, dtype=np.int64)

    def validate(self) -> None:
        if self.num_entities < self.num_items:
            raise ValidationError("entity count below item count")
        if self.triples.size:
            h, r, t = self.triples[:, 0], self.triples[:, 1], self.triples[:, 2]
            if h.min() < 0 or t.min() < 0 or max(h.max(), t.max()) >= self.num_entities:
                raise ValidationError("entity index out of range in triples")
            if r.min() < 0 or (self.num_relations and r.max() >= self.num_relations):
                raise ValidationError("relation index out of range in triples")
            uniq = {tuple(row) for row in self.triples.tolist()}
            if len(uniq) != len(self.triples):
                raise ValidationError("duplicate triples")
            present = np.unique(r)
            if len(present) != self.num_relations:
                raise ValidationError("a relation index has no triples")
        elif self.num_relations != 0:
            raise ValidationError("relations declared but no triples present")


def _recount_uncovered(num_items: int, triples: np.ndarray) -> np.ndarray:
    covered = np.zeros(num_items, dtype=bool)
    if triples.size:
        for col in (0, 2):
            ids = triples[:, col]
            covered[ids[ids < num_items]] = True
    return np.flatnonzero(~covered).astype(np.int64)


def load_triples(path, item_index: dict[str, int]) -> KnowledgeGraph:
    """Read `head<TAB>relation<TAB>tail` rows, reindexed so items come first.

    ``item_index`` maps raw item ids to their interaction-graph indices; a raw
    entity id equal to a raw item id denotes that item. Items with no triples
    end up in the coverage report rather than failing the load.
    """
    num_items = len(item_index)
    entity_index: dict[str, int] = dict(item_index)
    next_entity = num_items
    relation_index: dict[str, int] = {}
    rows = []
    seen = set()
    dups = 0
    for _lineno, (raw_h, raw_r, raw_t) in _read_rows(path, 3):
        if raw_h not in entity_index:
            entity_index[raw_h] = next_entity
            next_entity += 1
        if raw_t not in entity_index:
            entity_index[raw_t] = next_entity
            next_entity += 1
        r = relation_index.setdefault(raw_r, len(relation_index))
        row = (entity_index[raw_h], r, entity_index[raw_t])
        if row in seen:
            dups += 1
            continue
        seen.add(row)
        rows.append(row)
    if dups:
        log.info("dropped %d duplicate triples", dups)
    triples = np.array(rows, dtype=np.int64).reshape(-1, 3)
    inv_entities = [""] * next_entity
    for raw, idx in entity_index.items():
        inv_entities[idx] = raw
    kg = KnowledgeGraph(
        num_entities=next_entity,
        num_relations=len(relation_index),
        num_items=num_items,
        triples=triples,
        entity_ids=inv_entities,
        relation_ids=list(relation_index),
        uncovered_items=_recount_uncovered(num_items, triples),
    )
    kg.validate()
    if kg.uncovered_items.size:
        log.info(
            "%d of %d items have no knowledge-graph triples",
            kg.uncovered_items.size,
            num_items,
        )
    return kg


def filter_kg(
    kg: KnowledgeGraph, min_entity_degree: int = 1, min_relation_count: int = 10
) -> KnowledgeGraph:
    """Iteratively drop sparse relations and low-degree non-item entities.

    Runs to a fixed point: every surviving relation keeps >= min_relation_count
    triples and every surviving non-item entity keeps degree >=
    min_entity_degree. Item entities are never removed. Surviving entities and
    relations are reindexed densely, preserving order.
    """
    if min_entity_degree < 1 or min_relation_count < 1:
        raise ValidationError("filter thresholds must be >= 1")
    triples = kg.triples.copy()
    while True:
        before = len(triples)
        if before == 0:
            break
        rel_counts = np.bincount(triples[:, 1], minlength=kg.num_relations)
        keep = rel_counts[triples[:, 1]] >= min_relation_count
        triples = triples[keep]
        if len(triples):
            degree = np.bincount(triples[:, 0], minlength=kg.num_entities)
            degree += np.bincount(triples[:, 2], minlength=kg.num_entities)
            weak = degree < min_entity_degree
            weak[: kg.num_items] = False
            keep = ~(weak[triples[:, 0]] | weak[triples[:, 2]])
            triples = triples[keep]
        if len(triples) == before:
            break

    # dense reindex, order preserved: items stay put, other entities renumbered
    old_entities = np.unique(triples[:, [0, 2]]) if triples.size else np.empty(0, np.int64)
    old_non_items = old_entities[old_entities >= kg.num_items]
    entity_map = np.full(kg.num_entities, -1, dtype=np.int64)
    entity_map[: kg.num_items] = np.arange(kg.num_items)
    entity_map[old_non_items] = kg.num_items + np.arange(len(old_non_items))
    old_relations = np.unique(triples[:, 1]) if triples.size else np.empty(0, np.int64)
    relation_map = np.full(max(kg.num_relations, 1), -1, dtype=np.int64)
    relation_map[old_relations] = np.arange(len(old_relations))

    new_triples = triples.copy()
    if new_triples.size:
        new_triples[:, 0] = entity_map[triples[:, 0]]
        new_triples[:, 2] = entity_map[triples[:, 2]]
        new_triples[:, 1] = relation_map[triples[:, 1]]
    entity_ids = None
    if kg.entity_ids is not None:
        entity_ids = kg.entity_ids[: kg.num_items] + [
            kg.entity_ids[e] for e in old_non_items
        ]
    relation_ids = None
    if kg.relation_ids is not None:
        relation_ids = [kg.relation_ids[r] for r in old_relations]
    out = KnowledgeGraph(
        num_entities=kg.num_items + len(old_non_items),
        num_relations=len(old_relations),
        num_items=kg.num_items,
        triples=new_triples,
        entity_ids=entity_ids,
        relation_ids=relation_ids,
        uncovered_items=_recount_uncovered(kg.num_items, new_triples),
    )
    out.validate()
    if out.triples.size == 0 and kg.triples.size:
        log.warning(
            "knowledge-graph filtering removed every triple; "
            "items fall back to base embeddings only"
        )
    return out


@dataclass
class RelationSubgraph:
    """One relation's triples viewed as an undirected neighborhood structure.

    ``sources``/``targets`` are flattened (neighbor, entity) pairs in canonical
    sorted order so aggregation over them is independent of input triple order.
    """

    relation: int
    num_entities: int
    triples: np.ndarray
    sources: np.ndarray   # neighbor entity per flat pair
    targets: np.ndarray   # aggregating entity per flat pair (sorted, ties by source)
    degrees: np.ndarray
    offsets: np.ndarray
    isolated: np.ndarray  # 1.0 where degree == 0, else 0.0 (carry-forward mask)

    def neighbors(self, e: int) -> np.ndarray:
        return self.sources[self.offsets[e] : self.offsets[e + 1]]


def _make_subgraph(relation: int, num_entities: int, triples: np.ndarray) -> RelationSubgraph:
    if triples.size:
        h, t = triples[:, 0], triples[:, 2]
        loops = h == t
        targets = np.concatenate([h, t[~loops]])
        sources = np.concatenate([t, h[~loops]])
        order = np.lexsort((sources, targets))
        targets, sources = targets[order], sources[order]
    else:
        targets = sources = np.empty(0, dtype=np.int64)
    degrees = np.bincount(targets, minlength=num_entities).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(degrees)])
    return RelationSubgraph(
        relation=relation,
        num_entities=num_entities,
        triples=triples,
        sources=sources,
        targets=targets,
        degrees=degrees,
        offsets=offsets,
        isolated=(degrees == 0).astype(np.float64),
    )


def build_relation_subgraphs(kg: KnowledgeGraph) -> list[RelationSubgraph]:
    """Split the KG into one subgraph per relation; the triple union is exact."""
    subs = []
    for r in range(kg.num_relations):
        triples = kg.triples[kg.triples[:, 1] == r]
        subs.append(_make_subgraph(r, kg.num_entities, triples))
    return subs


@dataclass
class DatasetSplit:
    """Leave-one-out split: per-user held-out target item plus the reduced train graph."""

    train: InteractionGraph
    test: dict[int, int]
    seed: int

    def validate_against(self, full: InteractionGraph) -> None:
        b = full.target_behavior
        for u in range(full.num_users):
            orig = set(full.adjacency[b][u].tolist())
            kept = set(self.train.adjacency[b][u].tolist())
            held = {self.test[u]} if u in self.test else set()
            if kept | held != orig or kept & held:
                raise ValidationError(f"split is not a partition for user {u}")


def split_leave_one_out(graph: InteractionGraph, seed: int) -> DatasetSplit:
    """Hold out one uniformly chosen target-behavior item per user.

    Users with fewer than two target interactions stay entirely in train and
    get no test entry. Auxiliary behaviors are untouched.
    """
    rng = np.random.default_rng(seed)
    b = graph.target_behavior
    test: dict[int, int] = {}
    new_adj = []
    new_rev = [[] for _ in range(graph.num_items)]
    for u in range(graph.num_users):
        items = graph.adjacency[b][u]
        if len(items) >= 2:
            held = int(items[rng.integers(len(items))])
            test[u] = held
            kept = items[items != held]
        else:
            kept = items
        new_adj.append(kept)
        for i in kept:
            new_rev[int(i)].append(u)
    adjacency = list(graph.adjacency)
    adjacency[b] = new_adj
    rev_adjacency = list(graph.rev_adjacency)
    rev_adjacency[b] = [np.array(sorted(lst), dtype=np.int64) for lst in new_rev]
    train = InteractionGraph(
        num_users=graph.num_users,
        num_items=graph.num_items,
        behaviors=graph.behaviors,
        target_behavior=graph.target_behavior,
        adjacency=adjacency,
        rev_adjacency=rev_adjacency,
        user_ids=graph.user_ids,
        item_ids=graph.item_ids,
    )
    return DatasetSplit(train=train, test=test, seed=seed)


def write_split_manifest(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in sorted(split.test):
            f.write(f"{u}\t{split.test[u]}\t{split.seed}\n")


def read_split_manifest(path) -> tuple[dict[int, int], int]:
    test: dict[int, int] = {}
    seed = 0
    for _lineno, (u, i, s) in _read_rows(path, 3):
        test[int(u)] = int(i)
        seed = int(s)
    return test, seed


# ---- prepared dataset bundles (what `prepare` writes and `train`/`evaluate` read) ----


def save_bundle(out_dir, split: DatasetSplit, kg: KnowledgeGraph) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = split.train
    written = []

    def _emit(name, write_fn):
        p = out / name
        with open(p, "w", encoding="utf-8") as f:
            write_fn(f)
        written.append(p)

    meta = {
        "format": "intentrec-bundle v1",
        "num_users": train.num_users,
        "num_items": train.num_items,
        "behaviors": list(train.behaviors),
        "target_behavior": train.target_behavior,
        "num_entities": kg.num_entities,
        "num_relations": kg.num_relations,
        "split_seed": split.seed,
        "uncovered_items": int(kg.uncovered_items.size),
        "edges_per_behavior": [train.num_edges(b) for b in range(train.num_behaviors)],
    }
    _emit("meta.json", lambda f: json.dump(meta, f, indent=2, sort_keys=True))

    def _interactions(f):
        for b, name in enumerate(train.behaviors):
            users, items = train.edge_arrays(b)
            for u, i in zip(users, items):
                f.write(f"{u}\t{i}\t{name}\n")

    _emit("train_interactions.tsv", _interactions)

    def _triples(f):
        for h, r, t in kg.triples:
            f.write(f"{h}\t{r}\t{t}\n")

    _emit("kg_triples.tsv", _triples)
    _emit("split_manifest.tsv", lambda f: [
        f.write(f"{u}\t{split.test[u]}\t{split.seed}\n") for u in sorted(split.test)
    ])

    def _ids(values):
        def write(f):
            for idx, raw in enumerate(values or []):
                f.write(f"{idx}\t{raw}\n")

        return write

    _emit("user_ids.tsv", _ids(train.user_ids))
    _emit("item_ids.tsv", _ids(train.item_ids))
    _emit("entity_ids.tsv", _ids(kg.entity_ids))
    _emit("relation_ids.tsv", _ids(kg.relation_ids))
    return written


def load_bundle(bundle_dir) -> tuple[DatasetSplit, KnowledgeGraph]:
    bundle = Path(bundle_dir)
    with open(bundle / "meta.json", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("format") != "intentrec-bundle v1":
        raise ValidationError(f"unrecognized bundle format in {bundle / 'meta.json'}")
    behaviors = tuple(meta["behaviors"])
    b_index = {name: i for i, name in enumerate(behaviors)}
    edges = [
        (int(u), int(i), b_index[bname])
        for _ln, (u, i, bname) in _read_rows(bundle / "train_interactions.tsv", 3)
    ]
    train = build_interaction_graph(
        num_users=meta["num_users"],
        num_items=meta["num_items"],
        behaviors=behaviors,
        target_behavior=meta["target_behavior"],
        edges=edges,
    )
    rows = [
        (int(h), int(r), int(t))
        for _ln, (h, r, t) in _read_rows(bundle / "kg_triples.tsv", 3)
    ]
    triples = np.array(rows, dtype=np.int64).reshape(-1, 3)
    kg = KnowledgeGraph(
        num_entities=meta["num_entities"],
        num_relations=meta["num_relations"],
        num_items=meta["num_items"],
        triples=triples,
        uncovered_items=_recount_uncovered(meta["num_items"], triples),
    )
    kg.validate()
    test, seed = read_split_manifest(bundle / "split_manifest.tsv")
    return DatasetSplit(train=train, test=test, seed=seed), kg
