import math

import numpy as np

from intentrec.autodiff import Tape, Tensor, check_gradient, param, softmax_values
from intentrec.behaviors import (
    aggregate_user_items,
    batch_neighborhoods,
    behavior_contrastive_loss,
    fuse_behaviors,
    update_user_behavior,
    user_intent_vectors,
)
from tests.test_kg_agg import infonce_oracle


class TestUserIntentVectors:
    def test_single_intent_returned_exactly(self):
        intents = param(np.array([[3.0, -1.0]]), "intents")
        logits = param(np.array([[0.7]]), "logits")
        t = Tape()
        out = user_intent_vectors(t, logits, intents)
        np.testing.assert_allclose(out.values, [[3.0, -1.0]])

    def test_uniform_logits_give_midpoint(self):
        intents = param(np.array([[1.0, 0.0], [0.0, 1.0]]), "intents")
        logits = param(np.zeros((1, 2)), "logits")
        t = Tape()
        out = user_intent_vectors(t, logits, intents)
        np.testing.assert_allclose(out.values, [[0.5, 0.5]])

    def test_matches_weighted_sum_oracle(self):
        rng = np.random.default_rng(0)
        intents_v = rng.normal(size=(4, 3))
        logits_v = rng.normal(size=(2, 4))
        beta = softmax_values(logits_v)
        expected = np.array(
            [sum(beta[u, k] * intents_v[k] for k in range(4)) for u in range(2)]
        )
        t = Tape()
        out = user_intent_vectors(t, param(logits_v, "l"), param(intents_v, "i"))
        np.testing.assert_allclose(out.values, expected, atol=1e-12)

    def test_beta_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        beta = softmax_values(rng.normal(0, 4, size=(10, 5)))
        np.testing.assert_allclose(beta.sum(axis=1), 1.0, atol=1e-9)


class TestAggregateUserItems:
    def test_single_item_returns_row(self):
        table = param(np.array([[1.0, 2.0], [5.0, 6.0]]), "items")
        items, pos = batch_neighborhoods([np.array([1])], np.array([0]))
        t = Tape()
        out = aggregate_user_items(t, table, items, pos, 1)
        np.testing.assert_allclose(out.values, [[5.0, 6.0]])

    def test_no_interactions_give_zero(self):
        table = param(np.ones((3, 2)), "items")
        items, pos = batch_neighborhoods([np.array([], dtype=np.int64)], np.array([0]))
        t = Tape()
        out = aggregate_user_items(t, table, items, pos, 1)
        np.testing.assert_allclose(out.values, [[0.0, 0.0]])

    def test_three_items_hand_mean(self):
        table = param(np.array([[1.0, 2.0], [0.0, 1.0], [2.0, 3.0]]), "items")
        items, pos = batch_neighborhoods([np.array([0, 1, 2])], np.array([0]))
        t = Tape()
        out = aggregate_user_items(t, table, items, pos, 1)
        np.testing.assert_allclose(out.values, [[1.0, 2.0]])


class TestUpdateUserBehavior:
    def test_identity_gate(self):
        t = Tape()
        out = update_user_behavior(
            t, Tensor(np.ones((1, 2))), param(np.array([[3.0, 4.0]]), "agg"),
            param(np.array([[1.0, 1.0]]), "prev"),
        )
        np.testing.assert_allclose(out.values, [[4.0, 5.0]])

    def test_closed_gate_passes_previous(self):
        t = Tape()
        out = update_user_behavior(
            t, Tensor(np.zeros((1, 2))), param(np.array([[3.0, 4.0]]), "agg"),
            param(np.array([[7.0, 8.0]]), "prev"),
        )
        np.testing.assert_allclose(out.values, [[7.0, 8.0]])

    def test_hand_example(self):
        t = Tape()
        out = update_user_behavior(
            t, Tensor(np.array([[2.0, 0.0]])), Tensor(np.array([[1.0, 5.0]])),
            Tensor(np.array([[0.0, 1.0]])),
        )
        np.testing.assert_allclose(out.values, [[2.0, 1.0]])


class TestFuseBehaviors:
    def test_one_hot_gamma_selects_behavior(self):
        rng = np.random.default_rng(2)
        states = [param(rng.normal(size=(3, 2)), f"s{b}") for b in range(3)]
        t = Tape()
        out = fuse_behaviors(t, states, [0.0, 1.0, 0.0])
        np.testing.assert_allclose(out.values, states[1].values)

    def test_opposite_states_cancel(self):
        x = np.array([[1.0, -2.0]])
        t = Tape()
        out = fuse_behaviors(t, [Tensor(x), Tensor(-x)], [0.5, 0.5])
        np.testing.assert_allclose(out.values, [[0.0, 0.0]])

    def test_matches_weighted_sum_oracle(self):
        rng = np.random.default_rng(3)
        states_v = [rng.normal(size=(4, 3)) for _ in range(3)]
        gamma = [0.2, 0.5, 0.3]
        expected = sum(g * s for g, s in zip(gamma, states_v))
        t = Tape()
        out = fuse_behaviors(t, [Tensor(s) for s in states_v], gamma)
        np.testing.assert_allclose(out.values, expected, atol=1e-12)

    def test_linearity_in_states(self):
        rng = np.random.default_rng(4)
        states_v = [rng.normal(size=(2, 3)) for _ in range(2)]
        gamma = [0.6, 0.4]
        t1, t2 = Tape(), Tape()
        scaled = fuse_behaviors(t1, [Tensor(2.5 * s) for s in states_v], gamma)
        base = fuse_behaviors(t2, [Tensor(s) for s in states_v], gamma)
        np.testing.assert_allclose(scaled.values, 2.5 * base.values, atol=1e-12)


class TestBehaviorContrastiveLoss:
    def test_equal_embeddings_give_log_negatives(self):
        n = 5
        same = np.tile(np.array([0.5, -0.25, 1.0]), (n, 1))
        t = Tape()
        out = behavior_contrastive_loss(
            t, [param(same.copy(), "a"), param(same.copy(), "b")], 0.3
        )
        assert abs(float(out.values) - math.log(n - 1)) < 1e-10

    def test_aligned_positives_below_equal_case(self):
        t = Tape()
        out = behavior_contrastive_loss(
            t, [param(np.eye(3), "a"), param(np.eye(3), "b")], 1.0
        )
        assert float(out.values) < math.log(2)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(5)
        views = [rng.normal(size=(4, 2)) for _ in range(2)]
        t = Tape()
        out = behavior_contrastive_loss(
            t, [param(v.copy(), f"v{j}") for j, v in enumerate(views)], 0.6
        )
        assert abs(float(out.values) - infonce_oracle(views, 0.6)) < 1e-10

    def test_single_user_contributes_zero(self, caplog):
        t = Tape()
        with caplog.at_level("WARNING"):
            out = behavior_contrastive_loss(
                t, [param(np.ones((1, 2)), "a"), param(np.ones((1, 2)), "b")], 0.5
            )
        assert float(out.values) == 0.0


class TestEndToEndChain:
    def test_gradient_through_full_user_side(self):
        # intent mix -> neighborhood mean -> gated residual -> behavior fusion -> BCL
        rng = np.random.default_rng(6)
        n_users, n_items, d, p, n_behaviors = 3, 4, 2, 2, 2
        adjacency = [
            [np.array([0, 1]), np.array([2]), np.array([], dtype=np.int64)],
            [np.array([3]), np.array([0, 2]), np.array([1])],
        ]
        item_table = param(rng.normal(0, 0.5, size=(n_items, d)), "items")
        intents = param(rng.normal(0, 0.5, size=(p, d)), "intents")
        logits = [
            param(rng.normal(0, 0.5, size=(n_users, p)), f"logits{b}")
            for b in range(n_behaviors)
        ]
        base = param(rng.normal(0, 0.5, size=(n_users, d)), "base")
        users = np.arange(n_users)
        gamma = [0.5, 0.5]

        def loss_fn():
            t = Tape()
            states = []
            for b in range(n_behaviors):
                gate = user_intent_vectors(t, t.gather(logits[b], users), intents)
                items, pos = batch_neighborhoods(adjacency[b], users)
                agg = aggregate_user_items(t, item_table, items, pos, n_users)
                states.append(update_user_behavior(t, gate, agg, t.gather(base, users)))
            fused = fuse_behaviors(t, states, gamma)
            bcl = behavior_contrastive_loss(t, states, 0.5)
            return t, t.add(bcl, t.scale(t.sum_sq(fused), 0.1))

        err = check_gradient(loss_fn, [item_table, intents, *logits, base])
        assert err <= 1e-4

    def test_user_with_no_interactions_reduces_to_base(self):
        # zero gate input means every layer adds nothing on top of the base row
        rng = np.random.default_rng(7)
        d = 3
        item_table = param(rng.normal(size=(2, d)), "items")
        intents = param(rng.normal(size=(2, d)), "intents")
        logits = param(rng.normal(size=(1, 2)), "logits")
        base = param(rng.normal(size=(1, d)), "base")
        adjacency = [np.array([], dtype=np.int64)]
        users = np.array([0])
        t = Tape()
        state = t.gather(base, users)
        for _layer in range(3):
            gate = user_intent_vectors(t, t.gather(logits, users), intents)
            items, pos = batch_neighborhoods(adjacency, users)
            agg = aggregate_user_items(t, item_table, items, pos, 1)
            state = update_user_behavior(t, gate, agg, state)
        np.testing.assert_allclose(state.values, base.values, atol=1e-15)
