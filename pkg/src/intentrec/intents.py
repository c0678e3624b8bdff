"""Intent construction: attention-weighted relation combinations.

An intent is built by softmax-weighting the relation embeddings, concatenating
the weighted blocks in relation order, and passing the result through the same
fusion layer used for items (so intents and items live in an aligned space).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, softmax_values
from .kg_agg import FusionLayer


@dataclass
class IntentBank:
    """Trainable attention logits, one row per intent over the relations."""

    logits: Tensor  # (num_intents, num_relations)

    @property
    def num_intents(self) -> int:
        return self.logits.values.shape[0]

    @property
    def num_relations(self) -> int:
        return self.logits.values.shape[1]

    def attention(self) -> np.ndarray:
        """Current relation-attention rows (plain values, for inspection)."""
        return intent_attention(self.logits.values)


def intent_attention(logit_rows: np.ndarray) -> np.ndarray:
    """Softmax each logit row into a relation-attention distribution."""
    return softmax_values(logit_rows)


def build_intents(tape: Tape, relation_emb: Tensor, bank: IntentBank, fusion: FusionLayer) -> Tensor:
    """Recompute all intent embeddings from current logits and relation embeddings."""
    alpha = tape.softmax(bank.logits)
    blocks = [
        tape.outer(tape.col(alpha, j), tape.row(relation_emb, j))
        for j in range(bank.num_relations)
    ]
    raw = tape.concat_cols(blocks)
    return tape.affine(raw, fusion.w, fusion.b)
