"""Batch command-line front door.

Every command validates inputs, writes its artifacts plus a run manifest under
the output directory, and exits nonzero with a one-line machine-parsable reason
(`error<TAB>kind<TAB>message` on stderr) on failure. Wall-clock timestamps live
only in the manifest so reruns are byte-identical everywhere else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autodiff import softmax_values
from .config import TrainConfig, load_config_file
from .data import (
    DatasetSplit,
    filter_kg,
    load_bundle,
    load_interactions,
    load_triples,
    save_bundle,
    split_leave_one_out,
)
from .errors import IntentRecError, ValidationError
from .evaluation import build_candidates, evaluate_tables
from .gradcheck import end_to_end_check, primitive_checks
from .model import Model
from .reporting import (
    ablation_figure,
    intent_heatmap_figure,
    loss_curves_figure,
    metrics_figure,
    sweep_figure,
    write_lines,
    write_tsv,
)
from .synth import SynthSpec, generate, write_dataset
from .train import epoch_log_lines, fit

log = logging.getLogger(__name__)

WORKERS_ENV = "INTENTREC_WORKERS"


@dataclass
class RunManifest:
    command: str
    seed: int | None
    config: dict = field(default_factory=dict)
    dataset_hashes: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    git_describe: str = "unknown"
    started_utc: str = ""
    wall_seconds: float = 0.0

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        payload = {
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "dataset_hashes": self.dataset_hashes,
            "outputs": sorted(str(p) for p in self.outputs),
            "git_describe": self.git_describe,
            "started_utc": self.started_utc,
            "wall_seconds": self.wall_seconds,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        return path


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _start_manifest(command: str, seed, config_mapping: dict) -> RunManifest:
    return RunManifest(
        command=command,
        seed=seed,
        config={k: _jsonable(v) for k, v in sorted(config_mapping.items())},
        git_describe=_git_describe(),
        started_utc=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )


def _jsonable(v):
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _load_cfg(args, defaults: dict | None = None) -> tuple[TrainConfig, dict]:
    mapping = dict(defaults or {})
    if getattr(args, "config", None):
        mapping.update(load_config_file(args.config))
    if getattr(args, "seed", None) is not None:
        mapping["train.seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        mapping["train.epochs"] = args.epochs
    return TrainConfig.from_mapping(mapping), mapping


def _config_hash(cfg: TrainConfig) -> str:
    canon = json.dumps({k: _jsonable(v) for k, v in sorted(cfg.to_mapping().items())})
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_checkpoint(path, model: Model, opt=None, epoch: int = 0, cfg: TrainConfig | None = None):
    tensors = dict(model.params.values_dict())
    if opt is not None:
        tensors.update(opt.state_dict())
    meta = {
        "epoch": epoch,
        "config_hash": _config_hash(cfg) if cfg else "",
        "dims": json.dumps(vars(model.dims)),
    }
    ckpt.save_tensors(path, tensors, meta)


def _load_model(checkpoint_path, split: DatasetSplit, kg, cfg: TrainConfig) -> Model:
    tensors, _meta = ckpt.load_tensors(checkpoint_path)
    model = Model.build(split.train, kg, cfg, np.random.default_rng(cfg.seed))
    model.params.load_values(tensors)
    return model


# ---- commands ----


def cmd_prepare(args) -> int:
    cfg_map = load_config_file(args.config) if args.config else {}
    behaviors = cfg_map.get("data.behaviors")
    if not behaviors:
        raise ValidationError("prepare needs `data.behaviors` in the config file")
    target = cfg_map.get("data.target", behaviors[-1])
    seed = args.seed if args.seed is not None else 0
    manifest = _start_manifest("prepare", seed, cfg_map)
    t0 = time.time()

    graph = load_interactions(args.interactions, behaviors, target)
    manifest.dataset_hashes[str(args.interactions)] = _sha256(args.interactions)
    item_index = {raw: idx for idx, raw in enumerate(graph.item_ids)}
    kg = load_triples(args.triples, item_index)
    manifest.dataset_hashes[str(args.triples)] = _sha256(args.triples)
    kg = filter_kg(
        kg,
        min_entity_degree=cfg_map.get("data.min_entity_degree", 1),
        min_relation_count=cfg_map.get("data.min_relation_count", 10),
    )
    split = split_leave_one_out(graph, seed=seed)
    out = _out_dir(args)
    written = save_bundle(out, split, kg)
    manifest.outputs = [str(p) for p in written]
    manifest.wall_seconds = time.time() - t0
    manifest.outputs.append(str(manifest.write(out)))
    if not args.quiet:
        print(
            f"prepared bundle: {graph.num_users} users, {graph.num_items} items, "
            f"{len(graph.behaviors)} behaviors, {kg.num_entities} entities, "
            f"{kg.num_relations} relations, {len(split.test)} test users"
        )
    return 0


def cmd_synth(args) -> int:
    mapping = load_config_file(args.spec)
    spec = SynthSpec.from_mapping(mapping)
    if args.seed is not None:
        spec.seed = args.seed
    manifest = _start_manifest("synth", spec.seed, mapping)
    t0 = time.time()
    graph, kg, truth = generate(spec)
    out = _out_dir(args)
    written = write_dataset(out, graph, kg, truth)
    manifest.outputs = [str(p) for p in written]
    manifest.wall_seconds = time.time() - t0
    manifest.outputs.append(str(manifest.write(out)))
    if not args.quiet:
        edges = ", ".join(
            f"{name}={graph.num_edges(b)}" for b, name in enumerate(graph.behaviors)
        )
        print(f"generated dataset: {spec.users} users, {spec.items} items, edges {edges}")
    return 0


def cmd_train(args) -> int:
    cfg, cfg_map = _load_cfg(args)
    manifest = _start_manifest("train", cfg.seed, cfg_map)
    t0 = time.time()
    split, kg = load_bundle(args.data)
    manifest.dataset_hashes[str(Path(args.data) / "meta.json")] = _sha256(Path(args.data) / "meta.json")
    result = fit(cfg, split, kg)
    out = _out_dir(args)

    ckpt_path = out / "checkpoint.tsv"
    _save_checkpoint(ckpt_path, result.model, epoch=len(result.epochs), cfg=cfg)
    log_path = write_lines(out / "epoch_log.tsv", epoch_log_lines(result.epochs))
    fig_path = loss_curves_figure(result.epochs, out / "loss_curves.png")
    manifest.outputs = [str(ckpt_path), str(log_path), str(fig_path)]
    manifest.wall_seconds = time.time() - t0
    manifest.outputs.append(str(manifest.write(out)))
    if not args.quiet:
        last = result.epochs[-1] if result.epochs else None
        tail = f"final total loss {last.total:.4f}" if last else "no epochs run"
        print(f"trained {len(result.epochs)} epochs; {tail}; checkpoint at {ckpt_path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, cfg_map = _load_cfg(args)
    seed = args.seed if args.seed is not None else cfg_map.get("eval.seed", 0)
    manifest = _start_manifest("evaluate", seed, cfg_map)
    t0 = time.time()
    split, kg = load_bundle(args.data)
    model = _load_model(args.checkpoint, split, kg, cfg)
    cands = build_candidates(
        split,
        seed=seed,
        num_negatives=cfg_map.get("eval.negatives", 99),
        exclude=cfg_map.get("eval.exclude", "target"),
    )
    user_table, item_table = model.full_tables()
    report = evaluate_tables(
        user_table, item_table, cands, ks=tuple(cfg_map.get("eval.ks", [5, 10]))
    )
    out = _out_dir(args)
    machine = write_lines(out / "metrics.tsv", report.machine_lines())
    human = write_lines(out / "metrics.txt", [report.human_table()])
    fig = metrics_figure(report, out / "metrics.png")
    manifest.outputs = [str(machine), str(human), str(fig)]
    manifest.wall_seconds = time.time() - t0
    manifest.outputs.append(str(manifest.write(out)))
    if not args.quiet:
        print(report.human_table())
    return 0


def _train_and_eval(cfg: TrainConfig, split, kg, eval_map: dict):
    result = fit(cfg, split, kg)
    cands = build_candidates(
        split,
        seed=eval_map.get("eval.seed", 0),
        num_negatives=eval_map.get("eval.negatives", 99),
        exclude=eval_map.get("eval.exclude", "target"),
    )
    user_table, item_table = result.model.full_tables()
    report = evaluate_tables(
        user_table, item_table, cands, ks=tuple(eval_map.get("eval.ks", [5, 10]))
    )
    return result, report


def cmd_ablate(args) -> int:
    cfg, cfg_map = _load_cfg(args)
    manifest = _start_manifest("ablate", cfg.seed, cfg_map)
    t0 = time.time()
    split, kg = load_bundle(args.data)

    variants = {
        "full": {},
        "no-cl": {"train.lambda1": 0.0, "train.lambda2": 0.0},
        "no-intent": {"train.no_intent_gate": True},
    }
    reports = {}
    rows = []
    for name, overrides in variants.items():
        vmap = dict(cfg_map)
        vmap.update(overrides)
        vcfg = TrainConfig.from_mapping(vmap)
        _result, report = _train_and_eval(vcfg, split, kg, cfg_map)
        reports[name] = report
        for (metric, k) in sorted(report.metrics):
            rows.append((name, metric, k, report.metrics[(metric, k)]))
    out = _out_dir(args)
    table = write_tsv(out / "ablation.tsv", ["variant", "metric", "K", "value"], rows)
    fig = ablation_figure(reports, out / "ablation.png")
    manifest.outputs = [str(table), str(fig)]
    manifest.wall_seconds = time.time() - t0
    manifest.outputs.append(str(manifest.write(out)))
    if not args.quiet:
        for name, report in reports.items():
            print(f"[{name}] HR@10={report.metrics[('HR', 10)]:.4f} "
                  f"NDCG@10={report.metrics[('NDCG', 10)]:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg_map = load_config_file(args.config) if getattr(args, "config", None) else {}
    seed = args.seed if args.seed is not None else cfg_map.get("train.seed", 0)
    manifest = _start_manifest("gradcheck", seed, cfg_map)
    t0 = time.time()
    checks = primitive_checks(seed)
    e2e = end_to_end_check(seed)
    lines = [f"gradcheck\t{name}\t{err!r}" for name, err in sorted(checks.items())]
    lines.append(f"gradcheck\tend_to_end\t{e2e!r}")
    worst = max(checks.values())
    ok = worst <= 1e-6 and e2e <= 1e-4
    lines.append(f"gradcheck\tresult\t{'pass' if ok else 'fail'}")
    if args.out:
        out = _out_dir(args)
        path = write_lines(out / "gradcheck.tsv", lines)
        manifest.outputs = [str(path)]
        manifest.wall_seconds = time.time() - t0
        manifest.outputs.append(str(manifest.write(out)))
    if not args.quiet:
        print(f"primitives: {len(checks)} ops, worst {worst:.3e} (tolerance 1e-6)")
        print(f"end-to-end: {e2e:.3e} (tolerance 1e-4)")
        print("PASS" if ok else "FAIL")
    return 0 if ok else 1


SWEEP_AXES = {
    "sweep.layers": ("model.layers", "layers"),
    "sweep.dim": ("model.dim", "dim"),
    "sweep.intents": ("model.intents", "intents"),
    "sweep.lambda1": ("train.lambda1", "lambda1"),
    "sweep.lambda2": ("train.lambda2", "lambda2"),
    "sweep.lambda3": ("train.lambda3", "lambda3"),
    "sweep.tau": ("model.tau", "tau"),
}


def _sweep_one(job):
    cfg_map, axis_label, value, data_dir = job
    cfg = TrainConfig.from_mapping(cfg_map)
    split, kg = load_bundle(data_dir)
    _result, report = _train_and_eval(cfg, split, kg, cfg_map)
    return {
        "param": axis_label,
        "value": value,
        "HR@5": report.metrics[("HR", 5)],
        "NDCG@5": report.metrics[("NDCG", 5)],
        "HR@10": report.metrics[("HR", 10)],
        "NDCG@10": report.metrics[("NDCG", 10)],
        "n_users": report.n_users,
    }


def cmd_sweep(args) -> int:
    cfg, cfg_map = _load_cfg(args)
    axes = [(key, cfg_map[key]) for key in SWEEP_AXES if key in cfg_map]
    if not axes:
        raise ValidationError(
            f"sweep config must set at least one of: {', '.join(sorted(SWEEP_AXES))}"
        )
    manifest = _start_manifest("sweep", cfg.seed, cfg_map)
    t0 = time.time()
    jobs = []
    for sweep_key, values in axes:
        target_key, label = SWEEP_AXES[sweep_key]
        for value in values:
            vmap = {k: v for k, v in cfg_map.items() if not k.startswith("sweep.")}
            vmap[target_key] = value
            jobs.append((vmap, label, value, args.data))
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(workers) as pool:
            results = pool.map(_sweep_one, jobs)
    else:
        results = [_sweep_one(j) for j in jobs]

    out = _out_dir(args)
    header = ["param", "value", "HR@5", "NDCG@5", "HR@10", "NDCG@10", "n_users"]
    table = write_tsv(out / "sweep.tsv", header, [[r[h] for h in header] for r in results])
    outputs = [str(table)]
    for _sweep_key, _values in axes:
        label = SWEEP_AXES[_sweep_key][1]
        rows = [r for r in results if r["param"] == label]
        outputs.append(str(sweep_figure(label, rows, out / f"sweep_{label}.png")))
    manifest.outputs = outputs
    manifest.wall_seconds = time.time() - t0
    manifest.outputs.append(str(manifest.write(out)))
    if not args.quiet:
        for r in results:
            print(f"{r['param']}={r['value']}: HR@10={r['HR@10']:.4f} NDCG@10={r['NDCG@10']:.4f}")
    return 0


def cmd_inspect_intents(args) -> int:
    cfg, cfg_map = _load_cfg(args)
    manifest = _start_manifest("inspect-intents", cfg.seed, cfg_map)
    t0 = time.time()
    split, kg = load_bundle(args.data)
    model = _load_model(args.checkpoint, split, kg, cfg)
    alpha = softmax_values(model.params.intent_logits.values)

    fwd = model.forward(np.arange(min(1, model.dims.num_users)))
    intents = fwd.intents.values
    norms = np.linalg.norm(intents, axis=1)
    denom = np.maximum(np.outer(norms, norms), 1e-12)
    cosines = (intents @ intents.T) / denom

    out = _out_dir(args)
    alpha_rows = [[k] + [float(a) for a in alpha[k]] for k in range(alpha.shape[0])]
    alpha_path = write_tsv(
        out / "intent_attention.tsv",
        ["intent"] + [f"rel{j}" for j in range(alpha.shape[1])],
        alpha_rows,
    )
    cos_rows = [[k] + [float(c) for c in cosines[k]] for k in range(cosines.shape[0])]
    cos_path = write_tsv(
        out / "intent_cosine.tsv",
        ["intent"] + [f"intent{j}" for j in range(cosines.shape[0])],
        cos_rows,
    )
    fig = intent_heatmap_figure(alpha, cosines, out / "intents.png")
    manifest.outputs = [str(alpha_path), str(cos_path), str(fig)]
    manifest.wall_seconds = time.time() - t0
    manifest.outputs.append(str(manifest.write(out)))
    if not args.quiet:
        print(f"intent attention rows:\n{np.array2string(alpha, precision=3)}")
        print(f"pairwise intent cosines:\n{np.array2string(cosines, precision=3)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intentrec",
        description="Knowledge-aware intent-based multi-behavior recommender",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False, out=True):
        p.add_argument("--config", help="key-value config file")
        p.add_argument("--seed", type=int, help="override train.seed / protocol seed")
        p.add_argument("--epochs", type=int, help="override train.epochs")
        p.add_argument("--quiet", action="store_true")
        if data:
            p.add_argument("--data", required=True, help="prepared dataset bundle directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("prepare", help="load, filter, split, and bundle a dataset")
    p.add_argument("--interactions", required=True)
    p.add_argument("--triples", required=True)
    common(p)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="synth.* config file")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a bundle")
    common(p, data=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="ranked evaluation of a checkpoint")
    common(p, data=True, checkpoint=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare full / no-CL / no-intent variants")
    common(p, data=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", help="optional output directory for gradcheck.tsv")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid sweep over hyperparameter axes")
    common(p, data=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("inspect-intents", help="dump intent attention and similarity")
    common(p, data=True, checkpoint=True)
    p.set_defaults(fn=cmd_inspect_intents)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except IntentRecError as exc:
        print(f"error\t{type(exc).__name__}\t{exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error\tOSError\t{exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
