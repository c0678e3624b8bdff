"""Synthetic desk-scale datasets with planted intent structure.

Items carry one categorical attribute per relation (encoded as KG triples to
shared attribute entities) plus a continuous per-relation expression strength.
Each latent intent reads one relation: a user's preference over that relation's
attributes determines how well an item matches the intent.

Every user draws a Dirichlet profile over the intents; a behavior's affinity
row masks that profile (`buy = [1, 1]` follows the user's own profile). Two
kinds of decoy structure can be planted on top:

- ``anti[b]``: behavior b runs on REVERSED attribute preferences (each user's
  taste vector flipped), in the same relation subspace the target uses. Its
  evidence is then per-user anti-correlated with buying, so no shared item
  geometry can filter it; only down-weighting the behavior itself helps.
- ``flip_prob[b]``: a per-user semantic flip of the intent profile under b
  (cart-to-buy users versus wishlist users).

An intent-gated model can learn to close the decoy behavior's gate while
keeping trustworthy behaviors open; an all-ones gate mixes them identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import InteractionGraph, KnowledgeGraph, build_interaction_graph
from .errors import ValidationError


@dataclass
class SynthSpec:
    users: int = 500
    items: int = 200
    behavior_names: tuple[str, ...] = ("view", "cart", "buy")
    target: str = "buy"
    relations: int = 2
    latent_intents: int = 2
    attrs_per_relation: tuple[int, ...] = (12, 12)
    density: tuple[float, ...] = (0.12, 0.08, 0.015)
    affinity: tuple[tuple[float, ...], ...] = ((0.0, 1.0), (1.0, 1.0), (1.0, 1.0))
    anti: tuple[bool, ...] = (True, False, False)
    flip_prob: tuple[float, ...] = (0.0, 0.0, 0.0)
    pref_alpha: float = 0.05
    profile_alpha: float = 0.3
    strength_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        b = len(self.behavior_names)
        if self.target not in self.behavior_names:
            raise ValidationError(f"target {self.target!r} not in behavior names")
        if len(self.density) != b or len(self.affinity) != b:
            raise ValidationError("density and affinity must have one row per behavior")
        if any(not (0 < d <= 1) for d in self.density):
            raise ValidationError("densities must lie in (0, 1]")
        if any(len(row) != self.latent_intents for row in self.affinity):
            raise ValidationError("affinity rows must have one entry per latent intent")
        if any(sum(row) <= 0 or min(row) < 0 for row in self.affinity):
            raise ValidationError("affinity rows must be non-negative with positive sum")
        if len(self.flip_prob) != b or any(not (0 <= f <= 1) for f in self.flip_prob):
            raise ValidationError("flip_prob needs one probability in [0, 1] per behavior")
        if len(self.anti) != b:
            raise ValidationError("anti needs one flag per behavior")
        if len(self.attrs_per_relation) != self.relations:
            raise ValidationError("attrs_per_relation must have one entry per relation")
        if self.pref_alpha <= 0 or self.profile_alpha <= 0:
            raise ValidationError("Dirichlet concentrations must be positive")
        if self.strength_sigma < 0:
            raise ValidationError("strength_sigma must be non-negative")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SynthSpec":
        kwargs = {}
        renames = {
            "users": "synth.users", "items": "synth.items",
            "behavior_names": "synth.behavior_names", "target": "synth.target",
            "relations": "synth.relations", "latent_intents": "synth.latent_intents",
            "attrs_per_relation": "synth.attrs_per_relation",
            "density": "synth.density", "affinity": "synth.affinity",
            "anti": "synth.anti", "flip_prob": "synth.flip_prob",
            "pref_alpha": "synth.pref_alpha", "profile_alpha": "synth.profile_alpha",
            "strength_sigma": "synth.strength_sigma", "seed": "synth.seed",
        }
        for name, key in renames.items():
            if key in mapping:
                value = mapping[key]
                if isinstance(value, list):
                    value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
                if name == "anti":
                    value = tuple(bool(v) for v in value)
                kwargs[name] = value
        return cls(**kwargs)


@dataclass
class GroundTruth:
    """The latent state behind a generated dataset, enough to score any pair."""

    spec: SynthSpec
    item_attrs: np.ndarray          # (relations, items) attribute index per item
    item_strength: np.ndarray       # (relations, items) continuous expression strength
    user_prefs: list[np.ndarray]    # per intent, (users, attrs of its relation)
    user_profiles: np.ndarray       # (users, latent_intents) Dirichlet profiles
    intent_relation: np.ndarray     # (latent_intents,) relation read by each intent
    affinity: np.ndarray            # (behaviors, latent_intents) behavior masks
    flips: np.ndarray               # (behaviors, users) bool: reversed profile under b

    def match(self, k: int, anti: bool = False) -> np.ndarray:
        """Per-intent (users, items) match: user's preference mass on the item's
        attribute (scaled to mean 1 under a uniform draw) times the item's
        strength under the intent's relation. Strength breaks the score ties a
        purely categorical attribute would create. ``anti`` reverses each
        user's taste vector over the attributes."""
        rel = int(self.intent_relation[k])
        attrs = self.item_attrs[rel]
        prefs = self.user_prefs[k][:, ::-1] if anti else self.user_prefs[k]
        n_attrs = prefs.shape[1]
        return prefs[:, attrs] * n_attrs * self.item_strength[rel]

    def mixtures(self, b: int) -> np.ndarray:
        """Per-user intent mixture under behavior b: affinity-masked profile,
        reversed for that behavior's flipped users."""
        profiles = np.where(
            self.flips[b][:, None], self.user_profiles[:, ::-1], self.user_profiles
        )
        raw = self.affinity[b][None, :] * profiles
        return raw / np.maximum(raw.sum(axis=1, keepdims=True), 1e-300)

    def scores(self, b: int) -> np.ndarray:
        """Behavior-b interaction propensity for every (user, item) pair."""
        m = self.mixtures(b)
        anti = bool(self.spec.anti[b])
        total = np.zeros((self.spec.users, self.spec.items))
        for k in range(self.spec.latent_intents):
            total += m[:, k, None] * self.match(k, anti=anti)
        return total

    def oracle_target_scores(self) -> np.ndarray:
        return self.scores(self.spec.behavior_names.index(self.spec.target))


def _edge_probability(scores: np.ndarray, density: float) -> np.ndarray:
    """Probabilities proportional to scores with mean exactly `density`.

    Solves mean(min(1, c * scores)) = density for the scale c by bisection;
    clipping mass is redistributed so density 1 forces every probability to 1.
    """
    mean = scores.mean()
    if mean <= 0:
        raise ValidationError("degenerate synthetic scores (all zero)")
    if density >= 1.0:
        return np.ones_like(scores)
    lo, hi = 0.0, 1.0 / scores.max() if scores.max() > 0 else 1.0
    # expand hi until the clipped mean reaches the density (or all-ones)
    while np.minimum(1.0, hi * scores).mean() < density and hi < 1e12:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if np.minimum(1.0, mid * scores).mean() < density:
            lo = mid
        else:
            hi = mid
    return np.minimum(1.0, hi * scores)


def generate(spec: SynthSpec) -> tuple[InteractionGraph, KnowledgeGraph, GroundTruth]:
    """Deterministically generate (interactions, KG, ground truth) from the spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_beh = len(spec.behavior_names)

    item_attrs = np.stack(
        [rng.integers(spec.attrs_per_relation[r], size=spec.items) for r in range(spec.relations)]
    )
    item_strength = np.exp(rng.normal(0.0, spec.strength_sigma, size=(spec.relations, spec.items)))
    intent_relation = np.array([k % spec.relations for k in range(spec.latent_intents)])
    user_prefs = [
        rng.dirichlet(
            np.full(spec.attrs_per_relation[int(intent_relation[k])], spec.pref_alpha),
            size=spec.users,
        )
        for k in range(spec.latent_intents)
    ]
    user_profiles = rng.dirichlet(
        np.full(spec.latent_intents, spec.profile_alpha), size=spec.users
    )
    affinity = np.array(spec.affinity, dtype=np.float64)
    flips = np.stack(
        [rng.random(spec.users) < spec.flip_prob[b] for b in range(n_beh)]
    )

    truth = GroundTruth(
        spec=spec,
        item_attrs=item_attrs,
        item_strength=item_strength,
        user_prefs=user_prefs,
        user_profiles=user_profiles,
        intent_relation=intent_relation,
        affinity=affinity,
        flips=flips,
    )

    edges = []
    for b in range(n_beh):
        probs = _edge_probability(truth.scores(b), spec.density[b])
        hits = rng.random((spec.users, spec.items)) < probs
        for u, i in zip(*np.nonzero(hits)):
            edges.append((int(u), int(i), b))
    target_idx = spec.behavior_names.index(spec.target)
    if not any(b == target_idx for _, _, b in edges):
        raise ValidationError("spec produced zero target-behavior edges")

    graph = build_interaction_graph(
        num_users=spec.users,
        num_items=spec.items,
        behaviors=tuple(spec.behavior_names),
        target_behavior=target_idx,
        edges=edges,
        user_ids=[f"u{u}" for u in range(spec.users)],
        item_ids=[f"i{i}" for i in range(spec.items)],
    )

    # KG: item -> its attribute entity, one triple per (item, relation)
    attr_offsets = np.concatenate([[0], np.cumsum(spec.attrs_per_relation)])
    triples = []
    for r in range(spec.relations):
        base = spec.items + attr_offsets[r]
        for i in range(spec.items):
            triples.append((i, r, int(base + item_attrs[r, i])))
    entity_ids = [f"i{i}" for i in range(spec.items)]
    for r in range(spec.relations):
        entity_ids += [f"attr{r}_{a}" for a in range(spec.attrs_per_relation[r])]
    kg = KnowledgeGraph(
        num_entities=spec.items + int(attr_offsets[-1]),
        num_relations=spec.relations,
        num_items=spec.items,
        triples=np.array(triples, dtype=np.int64),
        entity_ids=entity_ids,
        relation_ids=[f"rel{r}" for r in range(spec.relations)],
        uncovered_items=np.empty(0, dtype=np.int64),
    )
    kg.validate()
    graph.validate()
    return graph, kg, truth


def write_dataset(out_dir, graph: InteractionGraph, kg: KnowledgeGraph, truth: GroundTruth) -> list[Path]:
    """Write the generated dataset in the standard input formats plus the
    ground-truth sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inter = out / "interactions.tsv"
    with open(inter, "w", encoding="utf-8") as f:
        for b, name in enumerate(graph.behaviors):
            users, items = graph.edge_arrays(b)
            for u, i in zip(users, items):
                f.write(f"{graph.user_ids[u]}\t{graph.item_ids[i]}\t{name}\n")
    trip = out / "triples.tsv"
    with open(trip, "w", encoding="utf-8") as f:
        for h, r, t in kg.triples:
            f.write(f"{kg.entity_ids[h]}\t{kg.relation_ids[r]}\t{kg.entity_ids[t]}\n")
    sidecar = out / "ground_truth.json"
    payload = {
        "spec": {
            "users": truth.spec.users,
            "items": truth.spec.items,
            "behavior_names": list(truth.spec.behavior_names),
            "target": truth.spec.target,
            "relations": truth.spec.relations,
            "latent_intents": truth.spec.latent_intents,
            "attrs_per_relation": list(truth.spec.attrs_per_relation),
            "density": list(truth.spec.density),
            "affinity": [list(row) for row in truth.spec.affinity],
            "anti": [int(a) for a in truth.spec.anti],
            "flip_prob": list(truth.spec.flip_prob),
            "pref_alpha": truth.spec.pref_alpha,
            "profile_alpha": truth.spec.profile_alpha,
            "strength_sigma": truth.spec.strength_sigma,
            "seed": truth.spec.seed,
        },
        "item_attrs": truth.item_attrs.tolist(),
        "item_strength": truth.item_strength.tolist(),
        "intent_relation": truth.intent_relation.tolist(),
        "user_profiles": truth.user_profiles.tolist(),
        "flips": truth.flips.astype(int).tolist(),
        "user_prefs": [p.tolist() for p in truth.user_prefs],
    }
    sidecar.write_text(json.dumps(payload), encoding="utf-8")
    return [inter, trip, sidecar]


def load_ground_truth(path) -> GroundTruth:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    raw = payload["spec"]
    spec = SynthSpec(
        users=raw["users"],
        items=raw["items"],
        behavior_names=tuple(raw["behavior_names"]),
        target=raw["target"],
        relations=raw["relations"],
        latent_intents=raw["latent_intents"],
        attrs_per_relation=tuple(raw["attrs_per_relation"]),
        density=tuple(raw["density"]),
        affinity=tuple(tuple(r) for r in raw["affinity"]),
        anti=tuple(bool(a) for a in raw["anti"]),
        flip_prob=tuple(raw["flip_prob"]),
        pref_alpha=raw["pref_alpha"],
        profile_alpha=raw["profile_alpha"],
        strength_sigma=raw["strength_sigma"],
        seed=raw["seed"],
    )
    return GroundTruth(
        spec=spec,
        item_attrs=np.array(payload["item_attrs"], dtype=np.int64),
        item_strength=np.array(payload["item_strength"]),
        user_prefs=[np.array(p) for p in payload["user_prefs"]],
        user_profiles=np.array(payload["user_profiles"]),
        intent_relation=np.array(payload["intent_relation"], dtype=np.int64),
        affinity=np.array(raw["affinity"]),
        flips=np.array(payload["flips"], dtype=bool),
    )
