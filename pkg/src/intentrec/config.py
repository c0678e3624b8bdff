"""Plain-text run configuration: dotted keys, one `key = value` per line.

Unknown keys are hard errors so a typo in a loss weight cannot silently
invalidate a sweep. Lists are comma-separated; matrix values use `;` between
rows. `#` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ParseError, ValidationError


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {s!r}")


def _int(s: str) -> int:
    return int(s.strip())


def _float(s: str) -> float:
    return float(s.strip())


def _str(s: str) -> str:
    return s.strip()


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _strs(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _matrix(s: str) -> list[list[float]]:
    return [_floats(row) for row in s.split(";") if row.strip()]


CONFIG_SCHEMA = {
    # model surface
    "model.dim": _int,
    "model.layers": _int,
    "model.intents": _int,
    "model.tau": _float,
    "model.gamma": _floats,
    "model.similarity": _str,            # cosine | dot
    "model.per_behavior_base": _bool,
    "model.infonce_include_positive": _bool,
    "model.cl_negatives": _str,          # batch | sampled:<k>
    "model.cl_relation_pairs": _int,
    # optimization
    "train.lr": _float,
    "train.batch_size": _int,
    "train.epochs": _int,
    "train.seed": _int,
    "train.lambda1": _float,
    "train.lambda2": _float,
    "train.lambda3": _float,
    "train.negative_sampling": _int,
    "train.disable_icl": _bool,
    "train.disable_bcl": _bool,
    "train.no_intent_gate": _bool,
    "train.patience": _int,
    "train.val_fraction": _float,
    "train.eval_every": _int,
    # dataset preparation
    "data.behaviors": _strs,
    "data.target": _str,
    "data.min_entity_degree": _int,
    "data.min_relation_count": _int,
    # evaluation protocol
    "eval.negatives": _int,
    "eval.ks": _ints,
    "eval.seed": _int,
    "eval.exclude": _str,                # target | all
    # hyperparameter sweep axes
    "sweep.layers": _ints,
    "sweep.dim": _ints,
    "sweep.intents": _ints,
    "sweep.lambda1": _floats,
    "sweep.lambda2": _floats,
    "sweep.lambda3": _floats,
    "sweep.tau": _floats,
    # synthetic dataset spec
    "synth.users": _int,
    "synth.items": _int,
    "synth.behavior_names": _strs,
    "synth.target": _str,
    "synth.relations": _int,
    "synth.latent_intents": _int,
    "synth.attrs_per_relation": _ints,
    "synth.density": _floats,
    "synth.affinity": _matrix,
    "synth.anti": _ints,
    "synth.flip_prob": _floats,
    "synth.pref_alpha": _float,
    "synth.profile_alpha": _float,
    "synth.strength_sigma": _float,
    "synth.seed": _int,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected `key = value`")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ValidationError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ValidationError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = CONFIG_SCHEMA[key](value)
        except ValidationError:
            raise
        except ValueError as exc:
            raise ValidationError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


@dataclass
class TrainConfig:
    """Hyperparameter surface for model construction and training."""

    dim: int = 64
    layers: int = 3
    intents: int = 2
    tau: float = 0.2
    gamma: list[float] | None = None     # None -> uniform 1/B
    similarity: str = "cosine"
    per_behavior_base: bool = False
    infonce_include_positive: bool = False
    cl_negatives: str = "batch"
    cl_relation_pairs: int = 8

    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    lambda1: float = 0.01
    lambda2: float = 0.01
    lambda3: float = 0.001
    negative_sampling: int = 1
    disable_icl: bool = False
    disable_bcl: bool = False
    no_intent_gate: bool = False
    patience: int = 0                    # 0 disables validation early stopping
    val_fraction: float = 0.05
    eval_every: int = 5

    _PREFIXES = {
        "dim": "model", "layers": "model", "intents": "model", "tau": "model",
        "gamma": "model", "similarity": "model", "per_behavior_base": "model",
        "infonce_include_positive": "model", "cl_negatives": "model",
        "cl_relation_pairs": "model",
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dim <= 0:
            raise ValidationError("embedding dimension must be positive")
        if self.layers < 1:
            raise ValidationError("layer count must be >= 1")
        if self.intents < 1:
            raise ValidationError("intent count must be >= 1")
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if self.tau <= 0:
            raise ValidationError("temperature must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.similarity not in ("cosine", "dot"):
            raise ValidationError(f"unknown similarity {self.similarity!r}")
        if self.cl_negatives != "batch" and not self.cl_negatives.startswith("sampled:"):
            raise ValidationError(f"unknown cl_negatives policy {self.cl_negatives!r}")
        if self.gamma is not None and (min(self.gamma) < 0 or sum(self.gamma) <= 0):
            raise ValidationError("behavior weights must be non-negative with positive sum")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name.startswith("_"):
                continue
            prefix = cls._PREFIXES.get(f.name, "train")
            key = f"{prefix}.{f.name}"
            if key in mapping:
                kwargs[f.name] = mapping[key]
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            prefix = self._PREFIXES.get(f.name, "train")
            out[f"{prefix}.{f.name}"] = getattr(self, f.name)
        return out

    def behavior_weights(self, num_behaviors: int) -> list[float]:
        """Normalized per-behavior fusion weights (uniform unless configured)."""
        if self.gamma is None:
            return [1.0 / num_behaviors] * num_behaviors
        if len(self.gamma) != num_behaviors:
            raise ValidationError(
                f"gamma has {len(self.gamma)} entries for {num_behaviors} behaviors"
            )
        total = sum(self.gamma)
        return [g / total for g in self.gamma]

    def sampled_negatives(self) -> int | None:
        """Negative count when cl_negatives is `sampled:<k>`, else None for in-batch."""
        if self.cl_negatives == "batch":
            return None
        return int(self.cl_negatives.split(":", 1)[1])
