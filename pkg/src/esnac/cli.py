"""Command line interface.

Commands:
  esnac search --config cfg.json --out DIR [--seed N] [--baseline rs]
               [--budget N] [--transfer W.npz ...] [--backend ...]
  esnac encode ARCH.json [--n-max N]
  esnac mutate ARCH.json [--seed N] [--out FILE]
  esnac report --log evals.jsonl --out DIR

Exit codes: 0 success, 1 runtime failure, 2 configuration error.  The
environment variable ESNAC_SEED overrides the master seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path
from typing import Mapping

from . import __version__
from .acquisition import AcquisitionConfig
from .archgraph import (ArchGraph, InvalidGraphError, SamplePolicy, load_graph,
                        param_count, sample_compressed, save_graph)
from .embedder import load_params, save_params
from .encode import AttributeScaling, encode, to_csv
from .evaluator import SurrogateConfig, load_eval_records, load_eval_set
from .gp import EvalRecord, KernelConfig, TrainConfig
from .report import write_report
from .search import (ConfigError, SearchConfig, SearchTrace, StepEval,
                     run_random_search, run_search, run_transfer_search)

SEED_ENV_VAR = "ESNAC_SEED"


def _field_error(path: str, message: str) -> ConfigError:
    return ConfigError(path, message)


def _build(cls, doc: Mapping, path: str, nested: Mapping | None = None):
    """Instantiate a config dataclass from a JSON object with field-path
    errors for unknown or ill-typed keys."""
    nested = nested or {}
    if not isinstance(doc, Mapping):
        raise _field_error(path, "must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise _field_error(f"{path}.{key}" if path else key, "unknown field")
        if key in nested and value is not None:
            value = _build(nested[key][0], value,
                           f"{path}.{key}" if path else key,
                           nested[key][1] if len(nested[key]) > 1 else None)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise _field_error(path or cls.__name__, str(exc)) from exc


def _load_teacher(value, base: Path) -> ArchGraph:
    if isinstance(value, str):
        path = Path(value)
        if not path.is_absolute():
            path = base / path
        return load_graph(path)
    return ArchGraph.from_document(value)


def load_search_config(path: str | Path) -> SearchConfig:
    """Parse a JSON search configuration mirroring SearchConfig field names;
    teacher may be an inline document or a path relative to the file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise _field_error("config", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise _field_error("config", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise _field_error("config", "top level must be an object")
    if "teacher" not in doc or doc["teacher"] is None:
        raise _field_error("teacher", "missing required field")
    doc = dict(doc)
    try:
        teacher = _load_teacher(doc.pop("teacher"), path.parent)
    except (InvalidGraphError, OSError, json.JSONDecodeError) as exc:
        raise _field_error("teacher", str(exc)) from exc
    cfg = _build(SearchConfig, doc, "", nested={
        "acquisition": (AcquisitionConfig, {"policy": (SamplePolicy,)}),
        "train": (TrainConfig,),
        "kernel_cfg": (KernelConfig,),
        "surrogate": (SurrogateConfig,),
    })
    cfg.teacher = teacher
    return cfg


def _write_manifest(out_dir: Path, payload: dict) -> Path:
    """Atomic write: the manifest appears complete or not at all."""
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, target)
    return target


def _config_snapshot(cfg: SearchConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["teacher"] = cfg.teacher.teacher_ref or f"{len(cfg.teacher.nodes)} nodes"
    doc["train"]["regression_head"] = None
    doc["acquisition"]["policy"]["shrink_ratio_choices"] = list(
        cfg.acquisition.policy.shrink_ratio_choices)
    doc["acquisition"]["policy"]["skip_count_choices"] = list(
        cfg.acquisition.policy.skip_count_choices)
    return doc


def _cmd_search(args) -> int:
    cfg = load_search_config(args.config)
    if args.backend:
        cfg.backend = args.backend
    if args.seed is not None:
        cfg.master_seed = args.seed
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg.master_seed = int(env_seed)
        except ValueError:
            raise _field_error(SEED_ENV_VAR, f"not an integer: {env_seed!r}")
    cfg.validate()

    out_dir = Path(args.out)
    mode = "search"
    if args.baseline == "rs":
        mode = "random-search"
    elif args.transfer:
        mode = "transfer"
    manifest = {
        "tool": "esnac",
        "version": __version__,
        "mode": mode,
        "master_seed": cfg.master_seed,
        "started": time.time(),
        "finished": None,
        "config": _config_snapshot(cfg),
    }
    _write_manifest(out_dir, manifest)
    log_path = out_dir / "evals.jsonl"

    if args.baseline == "rs":
        trace = run_random_search(cfg, budget=args.budget, log_path=log_path)
    elif args.transfer:
        kernels = [load_params(p) for p in args.transfer]
        trace = run_transfer_search(cfg, kernels, log_path=log_path)
    else:
        resume = log_path if args.resume and log_path.exists() else None
        trace = run_search(cfg, log_path=log_path, resume_log=resume)

    kernel_dir = out_dir / "kernels"
    kernel_paths = []
    if trace.final_kernels:
        kernel_dir.mkdir(exist_ok=True)
        for i, params in enumerate(trace.final_kernels):
            kp = kernel_dir / f"kernel_{i}.npz"
            save_params(params, kp)
            kernel_paths.append(str(kp))
    report_paths = write_report(trace, out_dir / "report")

    manifest["finished"] = time.time()
    manifest["outputs"] = {
        "eval_log": str(log_path),
        "kernels": kernel_paths,
        "report": {k: str(v) for k, v in report_paths.items()},
    }
    _write_manifest(out_dir, manifest)

    if trace.best is not None:
        print(f"best reward {trace.best.reward:.4f} "
              f"({trace.best.params} params, accuracy {trace.best.accuracy:.4f})")
    print(f"outputs in {out_dir}")
    return 0


def _cmd_encode(args) -> int:
    g = load_graph(args.arch)
    n_max = args.n_max if args.n_max is not None else len(g.nodes)
    sys.stdout.write(to_csv(encode(g, n_max, AttributeScaling.for_teacher(g))))
    return 0


def _cmd_mutate(args) -> int:
    g = load_graph(args.arch)
    policy = SamplePolicy()
    if args.policy:
        try:
            doc = json.loads(Path(args.policy).read_text())
        except json.JSONDecodeError as exc:
            raise _field_error("policy", f"invalid JSON: {exc}") from exc
        policy = _build(SamplePolicy, doc, "policy")
    student = sample_compressed(g, args.seed, policy)
    if args.out:
        save_graph(student, args.out)
    else:
        print(student.to_json())
    print(f"params {param_count(student)} of {param_count(g)} "
          f"({param_count(student) / param_count(g):.3f})", file=sys.stderr)
    return 0


def _cmd_report(args) -> int:
    data = load_eval_set(args.log)
    steps = []
    finalists: list[EvalRecord] = []
    for rec in load_eval_records(args.log):
        if rec.mode == "full":
            finalists.append(rec)
        else:
            steps.append(StepEval(len(steps) + 1, 0, rec))
    best = max(finalists or list(data), key=lambda r: r.reward, default=None)
    trace = SearchTrace(steps, data, finalists, best, [])
    paths = write_report(trace, args.out)
    for name, p in sorted(paths.items()):
        print(f"{name}: {p}")
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esnac",
        description="Compressed-architecture search with GP Bayesian optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a search, baseline, or transfer")
    p.add_argument("--config", required=True, help="JSON search configuration")
    p.add_argument("--out", default="esnac_out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override master seed")
    p.add_argument("--baseline", choices=["rs"], default=None,
                   help="run the random-search baseline instead")
    p.add_argument("--budget", type=int, default=None,
                   help="evaluation budget for the baseline")
    p.add_argument("--transfer", nargs="+", default=None, metavar="KERNEL",
                   help="pretrained kernel weight files; run transfer search")
    p.add_argument("--backend", default=None,
                   help="surrogate or external:<command>")
    p.add_argument("--resume", action="store_true",
                   help="reuse evaluations from an existing log in --out")
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("encode", help="print a graph's sequence encoding as CSV")
    p.add_argument("arch", help="architecture JSON file")
    p.add_argument("--n-max", type=int, default=None)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("mutate", help="sample one compressed variant")
    p.add_argument("arch", help="architecture JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policy", default=None, help="JSON sampling policy")
    p.add_argument("--out", default=None, help="write the variant here")
    p.set_defaults(func=_cmd_mutate)

    p = sub.add_parser("report", help="render reports from an evaluation log")
    p.add_argument("--log", required=True, help="evaluated-set JSONL log")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidGraphError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
