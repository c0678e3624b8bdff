"""Finite-difference verification: per-primitive checks and an end-to-end check
of the full training objective on a micro instance.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, check_gradient, param
from .config import TrainConfig
from .data import KnowledgeGraph, build_interaction_graph
from .model import Model, training_loss


def primitive_checks(seed: int = 0) -> dict[str, float]:
    """Max relative finite-difference error for every tape operation."""

    rng = np.random.default_rng(seed)

    def p(*shape):
        return param(rng.normal(0.0, 1.0, size=shape), "p")

    checks: dict[str, float] = {}

    def run(name, make_params, build):
        params = make_params()

        def loss_fn():
            t = Tape()
            return t, build(t, *params)

        checks[name] = check_gradient(loss_fn, list(params))

    run("gather", lambda: (p(5, 3),), lambda t, x: t.sum_sq(t.gather(x, np.array([0, 2, 2, 4]))))
    run("row", lambda: (p(4, 3),), lambda t, x: t.sum_sq(t.row(x, 2)))
    run("col", lambda: (p(4, 3),), lambda t, x: t.sum_sq(t.col(x, 1)))
    run("take_diag", lambda: (p(4, 4),), lambda t, x: t.sum_sq(t.take_diag(x)))
    seg = np.array([0, 0, 1, 1, 1, 3])
    run("segment_mean", lambda: (p(6, 2),), lambda t, x: t.sum_sq(t.segment_mean(x, seg, 4)))
    run("mul", lambda: (p(3, 4), p(3, 4)), lambda t, a, b: t.sum(t.mul(a, b)))
    run("mul_rowvec", lambda: (p(3, 4), p(4)), lambda t, a, b: t.sum(t.mul(a, b)))
    scale_const = rng.normal(size=3)
    run("rowscale", lambda: (p(3, 2),), lambda t, x: t.sum_sq(t.rowscale(x, scale_const)))
    run("add", lambda: (p(5), p(5)), lambda t, a, b: t.sum_sq(t.add(a, b)))
    run("add_n", lambda: (p(3, 2), p(3, 2), p(3, 2)), lambda t, a, b, c: t.sum_sq(t.add_n([a, b, c])))
    run("sub", lambda: (p(5), p(5)), lambda t, a, b: t.sum_sq(t.sub(a, b)))
    run("scale", lambda: (p(4),), lambda t, x: t.sum_sq(t.scale(x, -1.7)))
    run("concat_cols", lambda: (p(3, 2), p(3, 4)), lambda t, a, b: t.sum_sq(t.concat_cols([a, b])))
    run("affine", lambda: (p(5, 6), p(2, 6), p(2)), lambda t, x, w, b: t.sum_sq(t.affine(x, w, b)))
    run("matmul", lambda: (p(3, 4), p(4, 2)), lambda t, a, b: t.sum_sq(t.matmul(a, b)))
    run("matmul_vec", lambda: (p(4), p(4, 2)), lambda t, a, b: t.sum_sq(t.matmul(a, b)))
    run("matmul_nt", lambda: (p(3, 4), p(5, 4)), lambda t, a, b: t.sum_sq(t.matmul_nt(a, b)))
    run("outer", lambda: (p(3), p(4)), lambda t, a, b: t.sum_sq(t.outer(a, b)))
    pick = Tensor(rng.normal(size=(3, 5)))
    run("softmax", lambda: (p(3, 5),), lambda t, x: t.sum(t.mul(t.softmax(x), pick)))
    run("dot", lambda: (p(6), p(6)), lambda t, a, b: t.dot(a, b))
    run("rowwise_dot", lambda: (p(4, 3), p(4, 3)), lambda t, a, b: t.sum_sq(t.rowwise_dot(a, b)))
    pick2 = Tensor(rng.normal(size=(4, 3)))
    run("normalize_rows", lambda: (p(4, 3),), lambda t, x: t.sum(t.mul(t.normalize_rows(x), pick2)))
    run("log_sigmoid", lambda: (p(6),), lambda t, x: t.sum_sq(t.log_sigmoid(x)))
    mask = ~np.eye(4, dtype=bool)
    run("masked_logsumexp_rows", lambda: (p(4, 4),), lambda t, x: t.mean(t.masked_logsumexp_rows(x, mask)))
    run("sum", lambda: (p(3, 3),), lambda t, x: t.sum(x))
    run("mean", lambda: (p(3, 3),), lambda t, x: t.mean(x))
    run("sum_sq", lambda: (p(7),), lambda t, x: t.sum_sq(x))
    return checks


def micro_instance(seed: int = 0):
    """Tiny end-to-end setup: 4 users, 6 items, 10 entities, 2 relations,
    2 behaviors, 2 intents, dim 4, one layer."""
    rng = np.random.default_rng(seed)
    n_users, n_items, n_entities, n_relations, n_behaviors = 4, 6, 10, 2, 2
    edges = set()
    for b in range(n_behaviors):
        for _ in range(8):
            edges.add((int(rng.integers(n_users)), int(rng.integers(n_items)), b))
    # every user needs at least one target edge to form training triplets
    for u in range(n_users):
        edges.add((u, int(rng.integers(n_items)), n_behaviors - 1))
    graph = build_interaction_graph(
        n_users, n_items, ("aux", "buy"), 1, sorted(edges)
    )
    triples = set()
    for r in range(n_relations):
        for _ in range(7):
            h = int(rng.integers(n_entities))
            t = int(rng.integers(n_entities))
            triples.add((h, r, t))
    kg = KnowledgeGraph(
        num_entities=n_entities,
        num_relations=n_relations,
        num_items=n_items,
        triples=np.array(sorted(triples), dtype=np.int64),
    )
    cfg = TrainConfig(
        dim=4, layers=1, intents=2, tau=0.5,
        lambda1=0.05, lambda2=0.05, lambda3=0.01,
        batch_size=8, epochs=1, seed=seed,
    )
    model = Model.build(graph, kg, cfg, rng)
    users, pos = graph.edge_arrays(1)
    neg = np.array(
        [int(np.setdiff1d(np.arange(n_items), graph.adjacency[1][u])[0]) for u in users],
        dtype=np.int64,
    )
    return model, users, pos, neg


def end_to_end_check(seed: int = 0) -> float:
    """Finite-difference check of the full objective on the micro instance."""
    model, users, pos, neg = micro_instance(seed)

    def loss_fn():
        tape, loss, _parts = training_loss(model, users, pos, neg, cl_rng=None)
        return tape, loss

    return check_gradient(loss_fn, model.params.tensors())
