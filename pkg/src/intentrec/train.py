"""Training loop: Adam over BPR mini-batches with sampled negatives.

Deterministic given the config seed: one generator drives initialization,
shuffling, and negative sampling; a second, independently seeded generator
drives contrastive pair/negative subsampling so ablations do not shift the
data stream.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .config import TrainConfig
from .data import DatasetSplit, InteractionGraph, KnowledgeGraph
from .errors import ContractError, ValidationError
from .model import Model, training_loss

log = logging.getLogger(__name__)


class Adam:
    """Standard Adam with bias correction; moment state is checkpointable."""

    def __init__(self, tensors: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = tensors
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(t.values) for t in tensors]
        self.v = [np.zeros_like(t.values) for t in tensors]
        self._nan_strikes = 0

    def step(self) -> bool:
        """Apply one update from the accumulated gradients.

        A non-finite gradient aborts the step; three consecutive aborts raise.
        Returns False when the step was skipped.
        """
        if any(not np.all(np.isfinite(t.grad)) for t in self.tensors):
            self._nan_strikes += 1
            log.error("non-finite gradient; skipping update (%d/3)", self._nan_strikes)
            if self._nan_strikes >= 3:
                raise ContractError("three consecutive non-finite gradients")
            return False
        self._nan_strikes = 0
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for tensor, m, v in zip(self.tensors, self.m, self.v):
            g = tensor.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            tensor.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return True

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"adam_step": np.array(float(self.step_count))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam_m.{i}"] = m
            out[f"adam_v.{i}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["adam_step"])
        for i in range(len(self.tensors)):
            self.m[i][...] = state[f"adam_m.{i}"]
            self.v[i][...] = state[f"adam_v.{i}"]


def sample_negative(rng, owned_sorted: np.ndarray, num_items: int, max_tries: int = 100) -> int:
    """Uniform item with no target-behavior edge for this user.

    Rejection sampling capped at ``max_tries``, then an exact scan fallback.
    """
    if len(owned_sorted) >= num_items:
        raise ValidationError("user has interacted with every item; cannot sample a negative")
    for _ in range(max_tries):
        cand = int(rng.integers(num_items))
        pos = np.searchsorted(owned_sorted, cand)
        if pos >= len(owned_sorted) or owned_sorted[pos] != cand:
            return cand
    eligible = np.setdiff1d(np.arange(num_items), owned_sorted, assume_unique=False)
    return int(eligible[rng.integers(len(eligible))])


@dataclass
class EpochStats:
    epoch: int
    total: float
    bpr: float
    icl: float
    bcl: float
    val_hr: float = math.nan
    val_ndcg: float = math.nan


@dataclass
class FitResult:
    model: Model
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False


def make_validation(
    graph: InteractionGraph, fraction: float, seed: int
) -> tuple[InteractionGraph, dict[int, int]]:
    """Hold out one extra target item for a seeded fraction of eligible users."""
    rng = np.random.default_rng(seed)
    b = graph.target_behavior
    eligible = [u for u in range(graph.num_users) if len(graph.adjacency[b][u]) >= 2]
    n_val = max(1, int(round(fraction * len(eligible)))) if eligible else 0
    chosen = sorted(rng.choice(eligible, size=n_val, replace=False).tolist()) if n_val else []
    val_test: dict[int, int] = {}
    adjacency = [list(per_user) for per_user in graph.adjacency]
    rev = [list(per_item) for per_item in graph.rev_adjacency]
    for u in chosen:
        items = adjacency[b][u]
        held = int(items[rng.integers(len(items))])
        val_test[u] = held
        adjacency[b][u] = items[items != held]
        rev[b][held] = rev[b][held][rev[b][held] != u]
    reduced = InteractionGraph(
        num_users=graph.num_users,
        num_items=graph.num_items,
        behaviors=graph.behaviors,
        target_behavior=b,
        adjacency=adjacency,
        rev_adjacency=rev,
        user_ids=graph.user_ids,
        item_ids=graph.item_ids,
    )
    return reduced, val_test


def fit(
    cfg: TrainConfig,
    split: DatasetSplit,
    kg: KnowledgeGraph,
    callbacks=None,
    model: Model | None = None,
) -> FitResult:
    """Train a model on the split's train graph; returns per-epoch loss stats.

    Early stopping (``patience`` > 0) carves a validation hold-out from the
    train graph, tracks NDCG@10 on it every ``eval_every`` epochs, and restores
    the best parameters at the end.
    """
    from .evaluation import build_candidates, hr_at_k, ndcg_at_k, rank_positives

    rng = np.random.default_rng(cfg.seed)
    cl_rng = np.random.default_rng(cfg.seed + 1)

    train_graph = split.train
    val_test: dict[int, int] = {}
    if cfg.patience > 0:
        train_graph, val_test = make_validation(train_graph, cfg.val_fraction, cfg.seed + 2)
        log.info("validation hold-out: %d users", len(val_test))

    if model is None:
        model = Model.build(train_graph, kg, cfg, rng)
    users_all, items_all = train_graph.edge_arrays(train_graph.target_behavior)
    if users_all.size == 0:
        raise ValidationError("no target-behavior edges to train on")
    owned = train_graph.adjacency[train_graph.target_behavior]

    opt = Adam(model.params.tensors(), cfg.lr)
    result = FitResult(model=model)
    val_candidates = None
    if val_test:
        val_split = DatasetSplit(train=train_graph, test=val_test, seed=cfg.seed + 2)
        val_candidates = build_candidates(val_split, seed=cfg.seed + 2)
    best_ndcg, best_values, strikes = -np.inf, None, 0

    k_neg = max(1, cfg.negative_sampling)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(users_all.size)
        sums = {"total": 0.0, "bpr": 0.0, "icl": 0.0, "bcl": 0.0}
        n_batches = 0
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            u = np.repeat(users_all[idx], k_neg)
            pos = np.repeat(items_all[idx], k_neg)
            neg = np.array(
                [sample_negative(rng, owned[int(uu)], train_graph.num_items) for uu in u],
                dtype=np.int64,
            )
            model.params.zero_grads()
            tape, loss, parts = training_loss(model, u, pos, neg, cl_rng)
            if not np.isfinite(parts["total"]):
                log.error("non-finite loss at epoch %d; aborting step", epoch)
            tape.backward(loss)
            opt.step()
            for key in sums:
                sums[key] += parts[key]
            n_batches += 1

        stats = EpochStats(
            epoch=epoch,
            total=sums["total"] / n_batches,
            bpr=sums["bpr"] / n_batches,
            icl=sums["icl"] / n_batches,
            bcl=sums["bcl"] / n_batches,
        )
        if val_candidates is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            user_table, item_table = model.full_tables()
            ranks = rank_positives(user_table, item_table, val_candidates)
            stats.val_hr = hr_at_k(ranks, 10)
            stats.val_ndcg = ndcg_at_k(ranks, 10)
            if stats.val_ndcg > best_ndcg:
                best_ndcg = stats.val_ndcg
                best_values = {k: v.copy() for k, v in model.params.values_dict().items()}
                result.best_epoch = epoch
                strikes = 0
            else:
                strikes += 1
        result.epochs.append(stats)
        if callbacks:
            for cb in callbacks:
                cb(stats)
        if val_candidates is not None and strikes >= cfg.patience > 0:
            log.info("early stop at epoch %d (best %s)", epoch, result.best_epoch)
            result.stopped_early = True
            break

    if best_values is not None:
        model.params.load_values(best_values)
    return result


def epoch_log_lines(epochs: list[EpochStats]) -> list[str]:
    """Tab-separated epoch log: one line per epoch, repr-formatted floats."""
    header = "epoch\tL_total\tL_BPR\tL_ICL\tL_BCL\tval_HR@10\tval_NDCG@10"
    lines = [header]
    for s in epochs:
        lines.append(
            f"{s.epoch}\t{s.total!r}\t{s.bpr!r}\t{s.icl!r}\t{s.bcl!r}"
            f"\t{s.val_hr!r}\t{s.val_ndcg!r}"
        )
    return lines
