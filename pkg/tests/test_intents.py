import numpy as np

from intentrec.autodiff import Tape, check_gradient, param, softmax_values
from intentrec.intents import IntentBank, build_intents, intent_attention
from intentrec.kg_agg import FusionLayer


def intents_oracle(rel_emb, logits, w, b):
    """Straight transcription: weighted blocks, concatenated, affine-fused."""
    n_intents, n_rel = logits.shape
    d = rel_emb.shape[1]
    alpha = softmax_values(logits)
    out = np.zeros((n_intents, d))
    for k in range(n_intents):
        raw = np.concatenate([alpha[k, j] * rel_emb[j] for j in range(n_rel)])
        out[k] = w @ raw + b
    return out


class TestIntentAttention:
    def test_uniform_from_zero_logits(self):
        alpha = intent_attention(np.zeros((2, 4)))
        np.testing.assert_allclose(alpha, 0.25, atol=1e-15)

    def test_extreme_logits_saturate(self):
        alpha = intent_attention(np.array([[20.0, -20.0]]))
        np.testing.assert_allclose(alpha, [[1.0, 0.0]], atol=1e-8)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 5))
        shifted = logits + 7.3
        np.testing.assert_allclose(
            intent_attention(logits), intent_attention(shifted), atol=1e-12
        )

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        alpha = intent_attention(rng.normal(0, 3, size=(6, 4)))
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-9)
        assert (alpha > 0).all()


class TestBuildIntents:
    def test_selector_composition(self):
        # one-hot attention on relation 0 plus a block-0 selector returns v_r0
        d, r = 3, 2
        logits = np.array([[30.0, -30.0]])
        w = np.zeros((d, r * d))
        w[:, :d] = np.eye(d)
        rel = np.array([[1.0, 2.0, 3.0], [9.0, 9.0, 9.0]])
        t = Tape()
        out = build_intents(
            t,
            param(rel, "rel"),
            IntentBank(param(logits, "logits")),
            FusionLayer(param(w, "w"), param(np.zeros(d), "b")),
        )
        np.testing.assert_allclose(out.values, [[1.0, 2.0, 3.0]], atol=1e-10)

    def test_zero_relations_give_bias(self):
        d, r, p = 2, 3, 4
        rng = np.random.default_rng(2)
        bias = np.array([0.7, -0.1])
        t = Tape()
        out = build_intents(
            t,
            param(np.zeros((r, d)), "rel"),
            IntentBank(param(rng.normal(size=(p, r)), "logits")),
            FusionLayer(param(rng.normal(size=(d, r * d)), "w"), param(bias, "b")),
        )
        np.testing.assert_allclose(out.values, np.tile(bias, (p, 1)), atol=1e-12)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(3)
        d, r, p = 2, 3, 2
        rel = rng.normal(size=(r, d))
        logits = rng.normal(size=(p, r))
        w = rng.normal(size=(d, r * d))
        b = rng.normal(size=d)
        t = Tape()
        out = build_intents(
            t,
            param(rel, "rel"),
            IntentBank(param(logits, "logits")),
            FusionLayer(param(w, "w"), param(b, "b")),
        )
        np.testing.assert_allclose(out.values, intents_oracle(rel, logits, w, b), atol=1e-12)

    def test_single_intent_degenerates(self):
        rng = np.random.default_rng(4)
        d, r = 2, 2
        rel = rng.normal(size=(r, d))
        bank = IntentBank(param(rng.normal(size=(1, r)), "logits"))
        fusion = FusionLayer(param(rng.normal(size=(d, r * d)), "w"), param(rng.normal(size=d), "b"))
        t = Tape()
        out = build_intents(t, param(rel, "rel"), bank, fusion)
        assert out.values.shape == (1, d)
        # downstream softmax over one intent puts weight 1 on it
        np.testing.assert_allclose(softmax_values(np.array([3.7])), [1.0])

    def test_relation_permutation_with_matching_blocks(self):
        rng = np.random.default_rng(5)
        d, r, p = 2, 3, 2
        rel = rng.normal(size=(r, d))
        logits = rng.normal(size=(p, r))
        w = rng.normal(size=(d, r * d))
        b = rng.normal(size=d)
        perm = np.array([2, 0, 1])
        w_perm = np.concatenate([w[:, j * d : (j + 1) * d] for j in perm], axis=1)
        t1, t2 = Tape(), Tape()
        base = build_intents(
            t1, param(rel, "rel"), IntentBank(param(logits, "l")),
            FusionLayer(param(w, "w"), param(b, "b")),
        )
        permuted = build_intents(
            t2, param(rel[perm], "rel"), IntentBank(param(logits[:, perm], "l")),
            FusionLayer(param(w_perm, "w"), param(b, "b")),
        )
        np.testing.assert_allclose(base.values, permuted.values, atol=1e-12)

    def test_gradients_reach_logits_and_relations(self):
        rng = np.random.default_rng(6)
        d, r, p = 2, 2, 2
        rel = param(rng.normal(size=(r, d)), "rel")
        logits = param(rng.normal(size=(p, r)), "logits")
        w = param(rng.normal(size=(d, r * d)), "w")
        b = param(rng.normal(size=d), "b")

        def loss_fn():
            t = Tape()
            out = build_intents(t, rel, IntentBank(logits), FusionLayer(w, b))
            # read a single intent coordinate
            return t, t.dot(t.row(out, 0), param(np.array([1.0, 0.0]), "pick"))

        assert check_gradient(loss_fn, [rel, logits, w, b]) <= 1e-6
