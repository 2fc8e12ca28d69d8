"""Command-line entry point: search-blocks, search-network, decide, train, eval.

Exit codes: 0 success, 1 numeric failure, 2 configuration or input-artifact
error, 3 data error, 4 degenerate Pareto front.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from . import schemas
from .block_search import progressive_search
from .config import ConfigError, RunConfig
from .data import DataFormatError, Dataset, SplitSpec, load_cifar, split, synth_dataset
from .evo import (
    DegenerateFrontError,
    EvoConfig,
    SurrogateEvaluator,
    TrainedEvaluator,
    decide,
    evolve,
    pareto_csv,
    pareto_rows,
    read_pareto_csv,
)
from .network import NetworkGenome, build_network, count_flops, count_params, depth, measure_latency
from .nn import load_checkpoint, save_checkpoint
from .optim import SgdConfig
from .search_space import Genotype
from .train import error_rate, train

log = logging.getLogger("egdarts")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG, EXIT_DATA, EXIT_DEGENERATE = 0, 1, 2, 3, 4
DATA_ENV = "EGDARTS_DATA_DIR"


class DataError(RuntimeError):
    pass


class InputError(ValueError):
    """An input artifact (genotype, genome, Pareto CSV, checkpoint) is missing or malformed."""


# data --------------------------------------------------------------------------------

def _cifar(cfg: RunConfig, which: str) -> Dataset:
    root = cfg.data.path or os.environ.get(DATA_ENV)
    if not root:
        raise DataError(f"no dataset location: set data.path in the config or {DATA_ENV}")
    variant = "c10" if cfg.data.dataset == "cifar10" else "c100"
    try:
        return load_cifar(root, variant, which, cfg.data.mean, cfg.data.std)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def search_sets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Disjoint (weight, architecture) halves of the training data."""
    if cfg.data.dataset == "synth":
        s = cfg.data.synth
        ds = synth_dataset(s.seed, s.n, s.classes, s.size, s.noise)
    else:
        ds = _cifar(cfg, "train")
    return split(ds, SplitSpec(cfg.data.weight_fraction, cfg.seed))


def train_eval_sets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Synthetic runs reuse the search halves; CIFAR trains on the full train set and tests on the test set."""
    if cfg.data.dataset == "synth":
        return search_sets(cfg)
    return _cifar(cfg, "train"), _cifar(cfg, "test")


# artifacts -------------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict[str, Path], outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "config": json.loads(cfg.canonical()),
        "seed": cfg.seed,
        "versions": {"egdarts": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "inputs": {k: _sha256(p) for k, p in sorted(inputs.items())},
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in sorted(outputs)},
    }
    schemas.validate(manifest, "manifest")
    _write(out / "run-manifest.json", _dump(manifest))


def _read_json(path: Path, what: str):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from None


def read_genotype(path: Path) -> Genotype:
    obj = _read_json(path, "genotype")
    try:
        schemas.validate(obj, "genotype")
        return Genotype.from_json(obj)
    except Exception as exc:  # schema or semantic error
        raise InputError(f"invalid genotype {path}: {getattr(exc, 'message', exc)}") from None


def read_genome(path: Path, cfg: RunConfig | None = None) -> NetworkGenome:
    obj = _read_json(path, "genome")
    try:
        schemas.validate(obj, "genome")
        return NetworkGenome.from_json(obj)
    except Exception as exc:
        raise InputError(f"invalid genome {path}: {getattr(exc, 'message', exc)}") from None


# commands --------------------------------------------------------------------------------

def cmd_search_blocks(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    weight_set, alpha_set = search_sets(cfg)
    log.info("block search on %s: %d weight / %d architecture samples", weight_set.name, len(weight_set), len(alpha_set))
    result = progressive_search(weight_set, alpha_set, cfg.block_search, seed=cfg.seed, progress=log.info)
    geno_json = result.genotype.to_json()
    schemas.validate(geno_json, "genotype")
    outputs = [out / "genotype.json", out / "trace.csv", out / "stages.json"]
    _write(outputs[0], _dump(geno_json))
    _write(outputs[1], result.trace_csv())
    _write(outputs[2], _dump([dataclasses.asdict(s) for s in result.stages]))
    write_manifest(out, "search-blocks", cfg, {}, outputs)
    print(f"genotype written to {outputs[0]} (final architecture-set accuracy {result.val_accuracy:.4f})")
    return EXIT_OK


def _evaluator(cfg: RunConfig, weight_set: Dataset | None, alpha_set: Dataset | None):
    ns = cfg.network_search
    if ns.evaluator == "surrogate":
        if cfg.data.dataset == "synth":
            classes, size = cfg.data.synth.classes, (cfg.data.synth.size,) * 2
        else:
            classes, size = (10 if cfg.data.dataset == "cifar10" else 100), (32, 32)
        return SurrogateEvaluator(classes, size, ns.surrogate_kind)
    sgd = SgdConfig(ns.lr, ns.momentum, ns.weight_decay, max(ns.epochs, 1))
    return TrainedEvaluator(weight_set, alpha_set, ns.epochs, cfg.seed, ns.batch_size, sgd, ns.latency_runs,
                            ns.bounds)


def cmd_search_network(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    geno_path = Path(args.genotype) if args.genotype else out / "genotype.json"
    genotype = read_genotype(geno_path)
    ns = cfg.network_search
    evo_cfg = EvoConfig(ns.population, ns.generations, ns.crossover, ns.mutation, cfg.seed, ns.bounds)
    weight_set = alpha_set = None
    if ns.evaluator == "trained":
        weight_set, alpha_set = search_sets(cfg)
    result = evolve(evo_cfg, _evaluator(cfg, weight_set, alpha_set), genotype, progress=log.info)
    rows = pareto_rows(result.front)
    outputs = [out / "pareto.csv"]
    _write(outputs[0], pareto_csv(rows))
    gdir = out / "genomes"
    if gdir.is_dir():
        for stale in gdir.glob("genome_*.json"):
            stale.unlink()
    for i, ind in enumerate(result.front):
        p = gdir / f"genome_{i:03d}.json"
        _write(p, ind.genome.dumps())
        outputs.append(p)
    write_manifest(out, "search-network", cfg, {"genotype": geno_path}, outputs)
    print(f"{len(rows)} front members written to {outputs[0]} after {result.evaluations} evaluations")
    return EXIT_OK


def cmd_decide(args, cfg: RunConfig) -> int:
    pareto_path = Path(args.pareto) if args.pareto else Path(cfg.out) / "pareto.csv"
    out = Path(cfg.out) if cfg.out else pareto_path.parent
    try:
        rows = read_pareto_csv(pareto_path.read_text())
    except FileNotFoundError:
        raise InputError(f"pareto CSV not found: {pareto_path}") from None
    except ValueError as exc:
        raise InputError(f"invalid pareto CSV {pareto_path}: {exc}") from None
    if not rows:
        raise DegenerateFrontError(f"{pareto_path} has no rows")
    points = [(r["params"], r["err_pct"] / 100.0) for r in rows]
    try:
        d = decide(points)
        index, line, dist, degenerate = d.index, d.line, list(d.distances), False
    except DegenerateFrontError:
        if not args.allow_degenerate:
            raise
        index = min(range(len(points)), key=lambda i: (points[i][1], points[i][0], i))
        line, dist, degenerate = None, [0.0] * len(points), True
    gdir = Path(args.genomes) if args.genomes else pareto_path.parent / "genomes"
    gpath = gdir / f"genome_{index:03d}.json"
    genome = read_genome(gpath).to_json() if gpath.is_file() else None
    decision = {
        "index": index,
        "row": rows[index],
        "genome": genome,
        "line": None if line is None else {"A": line.A, "B": line.B, "anchor_max": list(line.anchor_max),
                                           "anchor_min": list(line.anchor_min)},
        "distances": dist,
        "degenerate": degenerate,
    }
    schemas.validate(decision, "decision")
    outputs = [out / "decision.json"]
    _write(outputs[0], _dump(decision))
    if genome is not None:
        outputs.append(out / "selected_genome.json")
        _write(outputs[1], _dump(genome))
    write_manifest(out, "decide", cfg, {"pareto": pareto_path}, outputs)
    print(f"{'row':>4} {'params':>10} {'err_pct':>8} {'distance':>12}")
    for i, r in enumerate(rows):
        mark = "*" if i == index else " "
        print(f"{i:>4} {r['params']:>10} {r['err_pct']:>8.3f} {dist[i]:>12.6g} {mark}")
    print(f"selected row {index}" + (" (degenerate front: lowest error)" if degenerate else ""))
    return EXIT_OK


def _metrics(net, genome: NetworkGenome, err: float, eval_set: Dataset, latency_runs: int) -> dict:
    return {
        "err": float(err),
        "params": count_params(net),
        "flops": count_flops(net),
        "depth": depth(genome),
        "latency_ms": measure_latency(net, latency_runs) if latency_runs > 0 else None,
        "eval_set": eval_set.name,
        "eval_size": len(eval_set),
    }


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    genome_path = Path(args.genome)
    genome = read_genome(genome_path)
    train_set, eval_set = train_eval_sets(cfg)
    t = cfg.train
    net = build_network(genome, train_set.num_classes, train_set.image_size, seed=cfg.seed,
                        bounds=cfg.network_search.bounds)
    sgd = SgdConfig(t.lr, t.momentum, t.weight_decay, max(t.epochs, 1))
    losses = []
    if t.epochs > 0:
        losses = train(net, train_set, sgd, t.batch_size, np.random.default_rng(cfg.seed), t.augment)
    metrics = _metrics(net, genome, error_rate(net, eval_set), eval_set, args.latency_runs or t.latency_runs)
    metrics["epochs"] = t.epochs
    metrics["train_loss"] = losses
    schemas.validate(metrics, "metrics")
    outputs = [out / "checkpoint.bin", out / "metrics.json"]
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(outputs[0], net.state_dict())
    _write(outputs[1], _dump(metrics))
    write_manifest(out, "train", cfg, {"genome": genome_path}, outputs)
    print(f"err {metrics['err']:.4f} params {metrics['params']} flops {metrics['flops']} depth {metrics['depth']}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    genome_path = Path(args.genome)
    genome = read_genome(genome_path)
    _, eval_set = train_eval_sets(cfg)
    net = build_network(genome, eval_set.num_classes, eval_set.image_size, seed=cfg.seed,
                        bounds=cfg.network_search.bounds)
    inputs = {"genome": genome_path}
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        try:
            net.load_state_dict(load_checkpoint(ckpt))
        except FileNotFoundError:
            raise InputError(f"checkpoint not found: {ckpt}") from None
        except (ValueError, KeyError) as exc:
            raise InputError(f"checkpoint {ckpt} does not fit the genome: {exc}") from None
        inputs["checkpoint"] = ckpt
    latency = args.latency_runs if args.latency_runs is not None else cfg.train.latency_runs
    metrics = _metrics(net, genome, error_rate(net, eval_set), eval_set, latency)
    schemas.validate(metrics, "metrics")
    outputs = [out / "metrics.json"]
    _write(outputs[0], _dump(metrics))
    write_manifest(out, "eval", cfg, inputs, outputs)
    print(json.dumps(metrics))
    return EXIT_OK


COMMANDS = {
    "search-blocks": cmd_search_blocks,
    "search-network": cmd_search_network,
    "decide": cmd_decide,
    "train": cmd_train,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults: published hyper-parameters)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", help="output directory, overrides the config")
    common.add_argument("--dataset", choices=config_mod.DATASETS, help="overrides data.dataset")
    common.add_argument("--evaluator", choices=config_mod.EVALUATORS, help="overrides network_search.evaluator")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="egdarts", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("search-blocks", parents=[common], help="differentiable cell search")
    sn = sub.add_parser("search-network", parents=[common], help="NSGA-II over width and depth")
    sn.add_argument("--genotype", help="genotype JSON (default: OUT/genotype.json)")
    dc = sub.add_parser("decide", parents=[common], help="knee-point selection from a Pareto CSV")
    dc.add_argument("--pareto", help="Pareto CSV (default: OUT/pareto.csv)")
    dc.add_argument("--genomes", help="directory of genome JSON files (default: next to the CSV)")
    dc.add_argument("--allow-degenerate", action="store_true",
                    help="on a front without distinct parameter counts pick the lowest error instead of exiting 4")
    for name, helptext in (("train", "train a genome and save a checkpoint"), ("eval", "evaluate a genome")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--genome", required=True, help="genome JSON")
        sp.add_argument("--latency-runs", type=int, default=None, help="single-image inferences to time")
        if name == "eval":
            sp.add_argument("--checkpoint", help="checkpoint from the train command")
    return p


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.from_json({})
    cfg = cfg.with_overrides(seed=args.seed, out=args.out, dataset=args.dataset, evaluator=args.evaluator)
    if cfg.out is None and not (args.command == "decide" and args.pareto):
        raise ConfigError("out", "no output directory: pass --out or set out in the config")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DegenerateFrontError as exc:
        print(f"degenerate front: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
