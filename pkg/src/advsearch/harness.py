"""Experiment orchestration: declarative JSON configs, an append-only
hash-chained ledger, the two circuit experiments (searched attack hardening
NAS; searched robust architecture as attack-search source), and artifact
persistence. The CLI in cli.py is a thin wrapper over run_experiment."""

from __future__ import annotations

import datetime
import json
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import attack_search as atks
from .arch_search import SearchConfig, run_search, write_arch_trace
from .attacks import NormFamily, load_scheme, save_scheme, scheme_to_json
from .data import (CorruptionSpec, ResamplePipeline, load_cifar10_binary,
                   make_shapes_dataset, make_spirals_dataset)
from .errors import NumericError, StateError, ValidationError
from .models import Genotype, build_cnn, build_mlp, instantiate_genotype
from .robustness import (AttackSource, CorruptionSource, RobustnessMetric,
                         SystemNoiseSource, robustness_report)
from .training import TrainSchedule, train
from .util import canonical_json, sha256_hex

SCHEMA_VERSION = 1
KINDS = ("attack_search", "arch_search", "evaluate", "circuit_defense", "circuit_attack")
ATTACK_STRATEGIES = ("de", "pso", "local", "random", "nsga2")


# ---------------------------------------------------------------------------
# config validation and builders


def validate_config(config):
    """Collect every problem; raises ValidationError listing all of them."""
    problems = []
    if not isinstance(config, dict):
        raise ValidationError(["config must be a JSON object"])
    if config.get("schema") != SCHEMA_VERSION:
        problems.append(f"schema: expected {SCHEMA_VERSION}, got {config.get('schema')!r}")
    kind = config.get("kind")
    if kind not in KINDS:
        problems.append(f"kind: expected one of {KINDS}, got {kind!r}")
    seeds = config.get("seeds")
    if not isinstance(seeds, list) or not seeds or \
            not all(isinstance(s, int) for s in seeds):
        problems.append("seeds: must be a nonempty list of integers")
    if "dataset" not in config:
        problems.append("dataset: missing")
    elif config["dataset"].get("name") not in ("shapes", "spirals", "cifar10"):
        problems.append(f"dataset.name: unknown {config['dataset'].get('name')!r}")
    if kind == "attack_search":
        if config.get("strategy") not in ATTACK_STRATEGIES:
            problems.append(
                f"strategy: expected one of {ATTACK_STRATEGIES}, got {config.get('strategy')!r}")
        if "model" not in config:
            problems.append("model: missing")
    if kind == "arch_search" and "search" not in config:
        problems.append("search: missing")
    if kind == "evaluate" and "model" not in config:
        problems.append("model: missing")
    if kind == "circuit_defense":
        path = config.get("scheme_file")
        if not path:
            problems.append("scheme_file: missing")
        elif not Path(path).exists():
            problems.append(f"scheme_file: {path} does not exist")
        if "search" not in config:
            problems.append("search: missing")
    if kind == "circuit_attack":
        path = config.get("source_genotype_file")
        if not path:
            problems.append("source_genotype_file: missing")
        elif not Path(path).exists():
            problems.append(f"source_genotype_file: {path} does not exist")
        if not config.get("targets"):
            problems.append("targets: missing or empty")
        if config.get("strategy") not in ATTACK_STRATEGIES:
            problems.append(
                f"strategy: expected one of {ATTACK_STRATEGIES}, got {config.get('strategy')!r}")
    genof = config.get("model", {}).get("genotype_file") if isinstance(
        config.get("model"), dict) else None
    if genof and not Path(genof).exists():
        problems.append(f"model.genotype_file: {genof} does not exist")
    if problems:
        raise ValidationError(problems)
    return config


def build_dataset(spec):
    name = spec["name"]
    if name == "shapes":
        return make_shapes_dataset(spec.get("n_per_class", 10), spec.get("image_side", 8),
                                   spec.get("n_classes", 3), spec.get("noise_std", 0.05),
                                   spec.get("seed", 0))
    if name == "spirals":
        return make_spirals_dataset(spec.get("n", 64), spec.get("turns", 1.5),
                                    spec.get("noise_std", 0.02), spec.get("seed", 0))
    ds = load_cifar10_binary(spec["path"])
    limit = spec.get("limit")
    return ds.subset(np.arange(min(limit, len(ds)))) if limit else ds


def _train_schedule(spec):
    return TrainSchedule(
        epochs=spec.get("epochs", 20),
        batch_size=spec.get("batch_size", 16),
        learning_rate=spec.get("learning_rate", 0.02),
        weight_decay=spec.get("weight_decay", 0.0),
        optimizer=spec.get("optimizer", "adam"),
        cosine_anneal=spec.get("cosine_anneal", False),
        adversarial=spec.get("adversarial"),
    )


def build_model(spec, dataset, seed):
    """Build (and train, when a schedule is present) the model a config names."""
    kind = spec.get("kind", "cnn")
    in_channels = dataset.inputs.shape[1] if dataset.inputs.ndim == 4 else 1
    if kind == "mlp":
        model = build_mlp(spec["layer_sizes"], seed=spec.get("seed", seed))
    elif kind == "cnn":
        model = build_cnn(spec.get("channels", 8), dataset.n_classes, in_channels,
                          seed=spec.get("seed", seed))
    elif kind == "genotype":
        genotype = Genotype.load(spec["genotype_file"])
        model = instantiate_genotype(genotype, spec.get("C", 8), spec.get("L", 4),
                                     dataset.n_classes, in_channels,
                                     seed=spec.get("seed", seed))
    else:
        raise ValidationError([f"model.kind: unknown {kind!r}"])
    if "train" in spec:
        model = train(model, dataset, _train_schedule(spec["train"]), seed=seed).model
    return model


def metric_from_spec(spec):
    spec = dict(spec)
    if "corruptions" in spec:
        spec["corruptions"] = tuple(CorruptionSpec(*c) if isinstance(c, (list, tuple))
                                    else CorruptionSpec(**c) for c in spec["corruptions"])
    if "pipelines" in spec:
        spec["pipelines"] = tuple(ResamplePipeline(**p) for p in spec["pipelines"])
    if "scheme_file" in spec:
        spec["scheme"] = load_scheme(spec.pop("scheme_file"), eps_max=spec.get("eps"))
    return RobustnessMetric(**spec)


def search_config_from_spec(spec, jobs=1):
    spec = dict(spec)
    if "metric" in spec and isinstance(spec["metric"], dict):
        spec["metric"] = metric_from_spec(spec["metric"])
    spec.setdefault("jobs", jobs)
    return SearchConfig(**spec)


def _norm_from(config):
    spec = config.get("norm", {})
    return NormFamily(spec.get("family", "Linf"), spec.get("eps_max", 8.0 / 255.0))


def _py(obj):
    """Recursively convert numpy scalars/arrays for JSON serialization."""
    if isinstance(obj, dict):
        return {k: _py(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_py(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _py(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# ledger


class Ledger:
    """Append-only JSONL with a hash chain over the deterministic fields.

    Timestamps and wall times are recorded but excluded from the chain, so
    identical (config, seed) reruns produce identical hashes.
    """

    def __init__(self, path):
        self.path = Path(path)

    def _last_hash(self):
        if not self.path.exists():
            return ""
        last = ""
        with open(self.path) as f:
            for line in f:
                if line.strip():
                    last = json.loads(line)["hash"]
        return last

    def append(self, config, result, wall_time_s, input_hash=""):
        # out_dir is operational, not experimental: identical experiments into
        # different directories must hash identically. The config itself is
        # embedded so any record is rerunnable on its own.
        hashable = _py({k: v for k, v in config.items() if k != "out_dir"})
        config_hash = sha256_hex(canonical_json(hashable).encode())
        result = _py(result)
        prev = self._last_hash()
        digest = sha256_hex(
            (prev + config_hash + input_hash + canonical_json(result)).encode())
        record = {
            "ts": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "config": hashable,
            "config_hash": config_hash,
            "input_hash": input_hash,
            "result": result,
            "wall_time_s": wall_time_s,
            "prev": prev,
            "hash": digest,
        }
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")
        return record

    def read(self):
        if not self.path.exists():
            return []
        with open(self.path) as f:
            return [json.loads(line) for line in f if line.strip()]

    def verify_chain(self):
        prev = ""
        for i, record in enumerate(self.read()):
            derived = sha256_hex(canonical_json(record["config"]).encode())
            if derived != record["config_hash"]:
                raise ValidationError([f"ledger record {i}: config hash mismatch"])
            expected = sha256_hex(
                (prev + record["config_hash"] + record["input_hash"]
                 + canonical_json(record["result"])).encode())
            if record["prev"] != prev or record["hash"] != expected:
                raise ValidationError([f"ledger record {i} breaks the hash chain"])
            prev = record["hash"]
        return True


@contextmanager
def _locked(out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError(f"output directory {out_dir} is locked by another experiment")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# experiment kinds


def _eval_slice(dataset, config):
    limit = config.get("eval_limit", 128)
    return dataset.subset(np.arange(min(limit, len(dataset))))


def _run_attack_strategy(strategy, model, dataset, norm, params, seed, jobs):
    params = dict(params or {})
    params.setdefault("jobs", jobs)
    if strategy == "de":
        genome, trace = atks.de_search(model, dataset, norm, seed=seed, **params)
        return genome, trace, None
    if strategy == "pso":
        genome, trace = atks.pso_search(model, dataset, norm, seed=seed, **params)
        return genome, trace, None
    if strategy == "local":
        genome, trace = atks.local_search(model, dataset, norm, seed=seed, **params)
        return genome, trace, None
    if strategy == "random":
        genome, trace = atks.random_search_attacks(model, dataset, norm, seed=seed, **params)
        return genome, trace, None
    archive, genome, trace = atks.nsga2_search(model, dataset, norm, seed=seed, **params)
    return genome, trace, archive


def _attack_search_experiment(config, out_dir, seed, jobs):
    dataset = build_dataset(config["dataset"])
    model = build_model(config["model"], dataset, seed)
    norm = _norm_from(config)
    eval_ds = _eval_slice(dataset, config)
    strategy = config["strategy"]
    genome, trace, archive = _run_attack_strategy(
        strategy, model, eval_ds, norm, config.get("strategy_params"), seed, jobs)
    space = atks.SearchSpace.full(norm)
    scheme = atks.decode(genome, space)
    evaluator = atks.Evaluator(model, eval_ds, space, seed=seed)
    best = evaluator(genome)

    prefix = out_dir / f"attack_search_seed{seed}"
    atks.write_trace(f"{prefix}_trace.csv", trace)
    save_scheme(scheme, f"{prefix}_scheme.json")
    payload = {
        "kind": "attack_search",
        "strategy": strategy,
        "seed": seed,
        "robust_acc": best.robust_acc,
        "cost_units": best.cost_units,
        "scheme": json.loads(scheme_to_json(scheme)),
        "evals_used": trace[-1].evals_used if trace else 0,
    }
    if archive is not None:
        with open(f"{prefix}_pareto.json", "w") as f:
            f.write(archive.to_json() + "\n")
        payload["fronts"] = json.loads(archive.to_json())
    return payload


def _arch_search_experiment(config, out_dir, seed, jobs):
    dataset = build_dataset(config["dataset"])
    search_cfg = search_config_from_spec(config["search"], jobs=jobs)
    genotype, trace = run_search(search_cfg, dataset, seed=seed)
    prefix = out_dir / f"arch_search_seed{seed}"
    genotype.save(f"{prefix}_genotype.json")
    write_arch_trace(f"{prefix}_trace.csv", trace)
    return {
        "kind": "arch_search",
        "strategy": search_cfg.strategy,
        "seed": seed,
        "genotype": json.loads(genotype.to_json()),
        "final_metric": trace[-1].metric_value if trace else None,
    }


def _sources_from(config, norm):
    sources = []
    for spec in config.get("attack_sources", [{"attack": "FGSM"}, {"attack": "PGD"}]):
        spec = dict(spec)
        spec.setdefault("eps", norm.eps_max)
        if "scheme_file" in spec:
            spec["scheme"] = load_scheme(spec.pop("scheme_file"), eps_max=spec["eps"])
        sources.append(AttackSource(**spec))
    for c in config.get("corruptions", []):
        spec = CorruptionSpec(*c) if isinstance(c, (list, tuple)) else CorruptionSpec(**c)
        sources.append(CorruptionSource(spec))
    for p in config.get("pipelines", []):
        sources.append(SystemNoiseSource(ResamplePipeline(**p)))
    return sources


def _evaluate_experiment(config, out_dir, seed, jobs):
    dataset = build_dataset(config["dataset"])
    model = build_model(config["model"], dataset, seed)
    eval_ds = _eval_slice(dataset, config)
    report = robustness_report(model, eval_ds, sources=_sources_from(config, _norm_from(config)),
                               hessian_probes=config.get("hessian_probes", 4), seed=seed)
    path = out_dir / f"evaluate_seed{seed}_report.json"
    with open(path, "w") as f:
        f.write(report.to_json() + "\n")
    return {
        "kind": "evaluate",
        "seed": seed,
        "report": json.loads(report.to_json()),
    }


def circuit_defense(config, out_dir, seed, jobs=1):
    """Searched attack scheme -> NAS robustness metric -> retrained winner,
    reported under FGSM, PGD, and the scheme itself (the AAA column)."""
    dataset = build_dataset(config["dataset"])
    # scheme JSON stores decoded magnitudes; the budget that quantizes them
    # back onto the gene grid comes from the config's norm block
    scheme = load_scheme(config["scheme_file"],
                         eps_max=config.get("norm", {}).get("eps_max"))
    search_cfg = search_config_from_spec(config["search"], jobs=jobs)
    search_cfg.metric = RobustnessMetric(kind="adversarial", scheme=scheme,
                                         eps=scheme.norm.eps_max, seed=seed)
    genotype, trace = run_search(search_cfg, dataset, seed=seed)

    retrain = config.get("retrain", {})
    in_channels = dataset.inputs.shape[1] if dataset.inputs.ndim == 4 else 1
    model = instantiate_genotype(genotype, retrain.get("C", 16), retrain.get("L", 8),
                                 dataset.n_classes, in_channels, seed=seed)
    trained = train(model, dataset, _train_schedule(retrain.get("train", {})), seed=seed)
    eval_ds = _eval_slice(dataset, config)
    eps = scheme.norm.eps_max
    accs = {
        "clean": AttackSource("FGSM", eps=0.0).accuracy(trained.model, eval_ds),
        "FGSM": AttackSource("FGSM", eps=eps).accuracy(trained.model, eval_ds),
        "PGD": AttackSource("PGD", eps=eps, steps=7).accuracy(trained.model, eval_ds),
        "AAA": AttackSource(scheme=scheme, seed=seed).accuracy(trained.model, eval_ds),
    }
    genotype.save(out_dir / f"circuit_defense_seed{seed}_genotype.json")
    return {
        "kind": "circuit_defense",
        "seed": seed,
        "strategy": search_cfg.strategy,
        "genotype": json.loads(genotype.to_json()),
        "accuracies": accs,
    }, genotype, accs


def circuit_attack(config, out_dir, seed, jobs=1):
    """Searched robust architecture -> retrain -> attack search against it ->
    transfer table of the single resulting scheme over every target model."""
    dataset = build_dataset(config["dataset"])
    source_genotype = Genotype.load(config["source_genotype_file"])
    retrain = config.get("retrain", {})
    in_channels = dataset.inputs.shape[1] if dataset.inputs.ndim == 4 else 1
    source = instantiate_genotype(source_genotype, retrain.get("C", 16),
                                  retrain.get("L", 8), dataset.n_classes, in_channels,
                                  seed=seed)
    source = train(source, dataset, _train_schedule(retrain.get("train", {})), seed=seed).model

    norm = _norm_from(config)
    eval_ds = _eval_slice(dataset, config)
    genome, trace, _ = _run_attack_strategy(
        config["strategy"], source, eval_ds, norm, config.get("strategy_params"), seed, jobs)
    scheme = atks.decode(genome, atks.SearchSpace.full(norm))
    save_scheme(scheme, out_dir / f"circuit_attack_seed{seed}_scheme.json")

    table = []
    for i, target_spec in enumerate(config["targets"]):
        target = build_model(target_spec, dataset, seed)
        from .attacks import run_scheme

        result, _ = run_scheme(target, eval_ds, scheme, seed=seed)
        table.append({
            "target": target_spec.get("name", f"target_{i}"),
            "robust_acc": result.robust_acc,
            "cost_units": result.cost_units,
        })
    return {
        "kind": "circuit_attack",
        "seed": seed,
        "strategy": config["strategy"],
        "scheme": json.loads(scheme_to_json(scheme)),
        "transfer_table": table,
    }, scheme, table


_DISPATCH = {
    "attack_search": _attack_search_experiment,
    "arch_search": _arch_search_experiment,
    "evaluate": _evaluate_experiment,
    "circuit_defense": lambda cfg, out, seed, jobs: circuit_defense(cfg, out, seed, jobs)[0],
    "circuit_attack": lambda cfg, out, seed, jobs: circuit_attack(cfg, out, seed, jobs)[0],
}


def run_experiment(config, out_dir=None, seed_override=None, jobs=1):
    """Validate, dispatch per seed, persist artifacts, append ledger records."""
    validate_config(config)
    out_dir = Path(out_dir or config.get("out_dir", "runs"))
    seeds = [seed_override] if seed_override is not None else config["seeds"]
    records = []
    with _locked(out_dir):
        ledger = Ledger(out_dir / "ledger.jsonl")
        for seed in seeds:
            t0 = time.perf_counter()
            payload = _DISPATCH[config["kind"]](config, out_dir, seed, jobs)
            if not np.all([np.isfinite(v) for v in _numeric_leaves(payload)]):
                raise NumericError("experiment produced non-finite results")
            records.append(ledger.append(config, payload, time.perf_counter() - t0))
    return records


def _numeric_leaves(obj):
    if isinstance(obj, dict):
        for v in obj.values():
            yield from _numeric_leaves(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _numeric_leaves(v)
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
        yield obj
