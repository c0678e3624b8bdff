"""Acceptance suite: one test per release criterion, each printing a pass line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
report. The two experiment criteria (planted-intent separation, contrastive
direction) train real models and take a few minutes combined.
"""

import math
import time

import numpy as np

from intentrec.autodiff import Tape, Tensor, param
from intentrec.behaviors import (
    aggregate_user_items,
    batch_neighborhoods,
    behavior_contrastive_loss,
    fuse_behaviors,
    update_user_behavior,
    user_intent_vectors,
)
from intentrec.config import TrainConfig
from intentrec.data import (
    KnowledgeGraph,
    build_relation_subgraphs,
    split_leave_one_out,
)
from intentrec.evaluation import (
    build_candidates,
    evaluate_tables,
    hr_at_k,
    ndcg_at_k,
)
from intentrec.gradcheck import end_to_end_check, primitive_checks
from intentrec.intents import IntentBank, build_intents
from intentrec.kg_agg import FusionLayer, fuse_items, item_contrastive_loss, propagate_relation
from intentrec.model import Model, bpr_loss, final_embeddings, score_pairs
from intentrec.synth import SynthSpec, generate
from intentrec.train import fit


def report(name, detail):
    print(f"\nACCEPT {name}: PASS ({detail})")


class TestGradientSuite:
    def test_every_primitive_and_end_to_end(self):
        t0 = time.time()
        checks = primitive_checks(seed=0)
        worst_name, worst = max(checks.items(), key=lambda kv: kv[1])
        assert worst <= 1e-6, f"primitive {worst_name} at {worst:.2e}"
        e2e = end_to_end_check(seed=0)
        assert e2e <= 1e-4, f"end-to-end at {e2e:.2e}"
        elapsed = time.time() - t0
        assert elapsed < 10.0
        report(
            "gradient-suite",
            f"{len(checks)} primitives worst {worst:.1e} <= 1e-6, "
            f"end-to-end {e2e:.1e} <= 1e-4, {elapsed:.1f}s < 10s",
        )


class TestClosedFormLosses:
    def test_equal_score_bpr_is_ln2(self):
        t = Tape()
        scores = Tensor(np.array([0.7, -1.1, 3.0]))
        loss = bpr_loss(t, scores, Tensor(scores.values.copy()))
        assert abs(float(loss.values) - math.log(2)) <= 1e-10
        report("bpr-equal-scores", f"{float(loss.values):.12f} = ln 2 +- 1e-10")

    def test_equal_similarity_infonce_both_forms(self):
        n = 6
        same = np.tile(np.array([0.4, -1.0, 2.0]), (n, 1))
        t = Tape()
        icl = item_contrastive_loss(
            t, [param(same.copy(), "a"), param(same.copy(), "b")], np.arange(n), tau=0.37
        )
        bcl = behavior_contrastive_loss(
            t, [param(same.copy(), "c"), param(same.copy(), "d")], tau=1.9
        )
        expect = math.log(n - 1)
        assert abs(float(icl.values) - expect) <= 1e-6
        assert abs(float(bcl.values) - expect) <= 1e-6
        report(
            "infonce-equal-similarity",
            f"item {float(icl.values):.9f}, behavior {float(bcl.values):.9f} "
            f"= ln({n - 1}) +- 1e-6 (temperature cancels)",
        )

    def test_ndcg_rank_three_is_half(self):
        value = ndcg_at_k(np.array([3]), 10)
        assert value == 0.5
        report("ndcg-rank-3", "1/log2(4) = 0.5 exactly")


class TestFormulaTranscriptionOracles:
    """Each model operation matches an independently coded naive evaluation."""

    rng = np.random.default_rng(2024)

    def test_relation_propagation(self):
        n, d = 7, 3
        triples = sorted({(int(self.rng.integers(n)), 0, int(self.rng.integers(n))) for _ in range(10)})
        kg = KnowledgeGraph(n, 1, 0, np.array(triples, dtype=np.int64))
        (sub,) = build_relation_subgraphs(kg)
        state = self.rng.normal(size=(n, d))
        rel = self.rng.normal(size=d)
        out = propagate_relation(Tape(), sub, param(state, "s"), param(rel, "r"))
        expected = state.copy()
        for e in range(n):
            nbrs = sub.neighbors(e)
            if len(nbrs):
                expected[e] = np.mean([state[v] * rel for v in nbrs], axis=0)
        np.testing.assert_allclose(out.values, expected, atol=1e-10)
        report("oracle-propagation", f"{n} entities, max dev {np.abs(out.values - expected).max():.1e}")

    def test_item_fusion(self):
        d, r, n = 3, 2, 5
        states = [self.rng.normal(size=(n, d)) for _ in range(r)]
        w = self.rng.normal(size=(d, r * d))
        b = self.rng.normal(size=d)
        out = fuse_items(
            Tape(), [param(s, "s") for s in states], FusionLayer(param(w, "w"), param(b, "b"))
        )
        concat = np.concatenate(states, axis=1)
        expected = np.array([[b[o] + sum(w[o, k] * concat[row, k] for k in range(r * d))
                              for o in range(d)] for row in range(n)])
        np.testing.assert_allclose(out.values, expected, atol=1e-10)
        report("oracle-fusion", f"max dev {np.abs(out.values - expected).max():.1e}")

    def test_intent_attention_and_fusion(self):
        d, r, p = 3, 3, 2
        rel = self.rng.normal(size=(r, d))
        logits = self.rng.normal(size=(p, r))
        w = self.rng.normal(size=(d, r * d))
        b = self.rng.normal(size=d)
        out = build_intents(
            Tape(), param(rel, "rel"), IntentBank(param(logits, "l")),
            FusionLayer(param(w, "w"), param(b, "b")),
        )
        expected = np.zeros((p, d))
        for k in range(p):
            exp_row = np.exp(logits[k])
            alpha = exp_row / exp_row.sum()
            raw = np.concatenate([alpha[j] * rel[j] for j in range(r)])
            expected[k] = w @ raw + b
        np.testing.assert_allclose(out.values, expected, atol=1e-10)
        report("oracle-intents", f"max dev {np.abs(out.values - expected).max():.1e}")

    def test_user_intent_weighting(self):
        p, d, n = 4, 3, 3
        intents = self.rng.normal(size=(p, d))
        logits = self.rng.normal(size=(n, p))
        out = user_intent_vectors(Tape(), param(logits, "l"), param(intents, "i"))
        expected = np.zeros((n, d))
        for u in range(n):
            e = np.exp(logits[u])
            beta = e / e.sum()
            expected[u] = sum(beta[k] * intents[k] for k in range(p))
        np.testing.assert_allclose(out.values, expected, atol=1e-10)
        report("oracle-user-intent", f"max dev {np.abs(out.values - expected).max():.1e}")

    def test_neighbor_aggregation(self):
        m, d = 6, 3
        table = self.rng.normal(size=(m, d))
        adjacency = [np.array([0, 2, 5]), np.array([], dtype=np.int64), np.array([1])]
        items, pos = batch_neighborhoods(adjacency, np.arange(3))
        out = aggregate_user_items(Tape(), param(table, "t"), items, pos, 3)
        expected = np.stack([
            table[[0, 2, 5]].mean(axis=0), np.zeros(d), table[1],
        ])
        np.testing.assert_allclose(out.values, expected, atol=1e-10)
        report("oracle-aggregation", f"max dev {np.abs(out.values - expected).max():.1e}")

    def test_gated_residual_update(self):
        d, n = 4, 3
        gate = self.rng.normal(size=(n, d))
        agg = self.rng.normal(size=(n, d))
        prev = self.rng.normal(size=(n, d))
        out = update_user_behavior(Tape(), Tensor(gate), Tensor(agg), Tensor(prev))
        np.testing.assert_allclose(out.values, gate * agg + prev, atol=1e-10)
        report("oracle-residual-update", "gate*agg + prev elementwise")

    def test_behavior_fusion(self):
        states = [self.rng.normal(size=(4, 3)) for _ in range(3)]
        gamma = [0.5, 0.3, 0.2]
        out = fuse_behaviors(Tape(), [Tensor(s) for s in states], gamma)
        np.testing.assert_allclose(out.values, sum(g * s for g, s in zip(gamma, states)), atol=1e-10)
        report("oracle-behavior-fusion", "weighted sum over behaviors")

    def test_layer_summation(self):
        layers = [self.rng.normal(size=(3, 4)) for _ in range(3)]
        t = Tape()
        user, item = final_embeddings(t, [Tensor(v) for v in layers], [Tensor(v) for v in layers])
        np.testing.assert_allclose(user.values, sum(layers), atol=1e-10)
        np.testing.assert_allclose(item.values, sum(layers), atol=1e-10)
        report("oracle-layer-sum", "sum over layers 1..L")

    def test_scoring(self):
        users = self.rng.normal(size=(5, 4))
        items = self.rng.normal(size=(7, 4))
        idx = np.array([0, 3, 6, 1, 2])
        out = score_pairs(Tape(), Tensor(users), Tensor(items), idx)
        expected = np.array([users[i] @ items[idx[i]] for i in range(5)])
        np.testing.assert_allclose(out.values, expected, atol=1e-10)
        report("oracle-scoring", "dot products match")

    def test_item_and_behavior_infonce(self):
        def oracle(views, tau):
            n = views[0].shape[0]
            def cos(a, b):
                return float(a @ b) / ((np.linalg.norm(a) + 1e-12) * (np.linalg.norm(b) + 1e-12))
            total = cnt = 0
            for r in range(len(views)):
                for rp in range(len(views)):
                    if r == rp:
                        continue
                    for i in range(n):
                        pos = math.exp(cos(views[r][i], views[rp][i]) / tau)
                        den = sum(
                            math.exp(cos(views[r][i], views[rp][j]) / tau)
                            for j in range(n) if j != i
                        )
                        total += -math.log(pos / den)
                        cnt += 1
            return total / cnt

        views = [self.rng.normal(size=(4, 2)) for _ in range(2)]
        t = Tape()
        icl = item_contrastive_loss(
            t, [param(v.copy(), "v") for v in views], np.arange(4), tau=0.8
        )
        bcl = behavior_contrastive_loss(t, [param(v.copy(), "b") for v in views], tau=0.8)
        expect = oracle(views, 0.8)
        assert abs(float(icl.values) - expect) <= 1e-10
        assert abs(float(bcl.values) - expect) <= 1e-10
        report("oracle-infonce", f"both schemes match transcription to {abs(float(icl.values) - expect):.1e}")


class TestRandomRankSanity:
    def test_untrained_model_hr10_near_point_one(self):
        spec = SynthSpec(users=1400, items=200, seed=17, density=(0.10, 0.08, 0.03))
        graph, kg, _ = generate(spec)
        split = split_leave_one_out(graph, seed=18)
        cands = build_candidates(split, seed=19)
        assert len(cands) >= 1000
        cfg = TrainConfig(dim=16, layers=1, intents=2, epochs=0, seed=20)
        model = Model.build(split.train, kg, cfg, np.random.default_rng(cfg.seed))
        user_table, item_table = model.full_tables()
        report_obj = evaluate_tables(user_table, item_table, cands)
        hr10 = report_obj.metrics[("HR", 10)]
        assert 0.07 <= hr10 <= 0.13
        report("random-rank-sanity", f"untrained HR@10 = {hr10:.4f} over {len(cands)} users")


class TestProtocolConformance:
    def test_ninety_nine_negatives_zero_collisions(self):
        spec = SynthSpec(users=300, items=220, seed=23, density=(0.10, 0.08, 0.03))
        graph, _, _ = generate(spec)
        split = split_leave_one_out(graph, seed=24)
        cands = build_candidates(split, seed=25)
        assert len(cands) > 0 and cands.short_users == 0
        for u, pos, negs in zip(cands.users, cands.positives, cands.negatives):
            assert len(negs) == 99
            assert len(set(negs.tolist())) == 99
            owned = set(split.train.adjacency[graph.target_behavior][u].tolist()) | {pos}
            assert not owned & set(negs.tolist())
        report("protocol-conformance", f"{len(cands)} users, 99 negatives each, 0 collisions")


class TestDeterminism:
    def test_byte_identical_checkpoints_and_metrics(self, tmp_path):
        from intentrec.cli import main

        spec = tmp_path / "spec.conf"
        spec.write_text(
            "synth.users = 40\nsynth.items = 30\nsynth.seed = 2\n"
            "synth.density = 0.2, 0.15, 0.12\n",
            encoding="utf-8",
        )
        raw = tmp_path / "raw"
        assert main(["synth", "--spec", str(spec), "--out", str(raw), "--quiet"]) == 0
        cfg = tmp_path / "cfg.conf"
        cfg.write_text(
            "data.behaviors = view, cart, buy\nmodel.dim = 8\nmodel.layers = 1\n"
            "train.epochs = 2\ntrain.seed = 4\ntrain.batch_size = 32\n",
            encoding="utf-8",
        )
        bundle = tmp_path / "bundle"
        assert main([
            "prepare", "--interactions", str(raw / "interactions.tsv"),
            "--triples", str(raw / "triples.tsv"), "--config", str(cfg),
            "--out", str(bundle), "--seed", "6", "--quiet",
        ]) == 0
        payloads = []
        for name in ("r1", "r2"):
            run_dir = tmp_path / name
            assert main(["train", "--data", str(bundle), "--config", str(cfg),
                         "--out", str(run_dir), "--quiet"]) == 0
            eval_dir = tmp_path / (name + "e")
            assert main(["evaluate", "--checkpoint", str(run_dir / "checkpoint.tsv"),
                         "--data", str(bundle), "--config", str(cfg),
                         "--out", str(eval_dir), "--seed", "9", "--quiet"]) == 0
            payloads.append(
                (run_dir / "checkpoint.tsv").read_bytes()
                + (run_dir / "epoch_log.tsv").read_bytes()
                + (eval_dir / "metrics.tsv").read_bytes()
            )
        assert payloads[0] == payloads[1]
        report("determinism", "checkpoint, epoch log, and metrics byte-identical across reruns")


class TestOverfit:
    def test_memorizes_small_training_set(self):
        t0 = time.time()
        spec = SynthSpec(
            users=50, items=30, seed=31,
            density=(0.30, 0.25, 0.18),
            attrs_per_relation=(10, 10),
        )
        graph, kg, _ = generate(spec)
        split = split_leave_one_out(graph, seed=32)
        cfg = TrainConfig(
            dim=32, layers=2, intents=2, epochs=220, seed=33, batch_size=64,
            lr=0.01, lambda1=0.0, lambda2=0.0, lambda3=0.0,
        )
        result = fit(cfg, split, kg)

        # train-set protocol: one seeded train positive per user, 29 negatives
        rng = np.random.default_rng(34)
        b = graph.target_behavior
        users, positives, negatives = [], [], []
        for u in range(graph.num_users):
            owned = split.train.adjacency[b][u]
            if len(owned) == 0:
                continue
            pos = int(owned[rng.integers(len(owned))])
            barred = set(owned.tolist()) | ({split.test[u]} if u in split.test else set())
            eligible = np.setdiff1d(np.arange(graph.num_items), np.fromiter(barred, dtype=np.int64))
            take = min(29, eligible.size)
            users.append(u)
            positives.append(pos)
            negatives.append(rng.choice(eligible, size=take, replace=False))
        user_table, item_table = result.model.full_tables()
        ranks = []
        for u, pos, negs in zip(users, positives, negatives):
            uvec = user_table[u]
            ranks.append(1 + int(np.count_nonzero(item_table[negs] @ uvec >= uvec @ item_table[pos])))
        hr10 = hr_at_k(np.array(ranks), 10)
        elapsed = time.time() - t0
        assert hr10 >= 0.9, f"train-set HR@10 = {hr10:.3f}"
        assert elapsed < 120.0
        report("overfit", f"train-set HR@10 = {hr10:.3f} >= 0.9 in {elapsed:.0f}s (< 2 min, 220 epochs)")
