"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (strict JSON: training fields plus
run keys); explicit flags override file values. Exit codes: 0 success,
1 usage or configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointFormatError
from .data import DataError, Dataset, generate_synthetic, load_cifar10, save_cifar10
from .encoder import NumericError
from .stitching import StitchConfig, StitchConfigError, verify_index_math

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

RUN_KEYS = {"data", "test_data", "synthetic", "test_synthetic", "out_dir", "resume", "checkpoint",
            "k", "knn_tau", "probe_epochs", "probe_lr", "metrics_out", "random_init"}


class UsageError(Exception):
    pass


def _train_keys() -> set[str]:
    from .trainer import TrainConfig
    return {f.name for f in fields(TrainConfig)}


def load_run_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(doc) - RUN_KEYS - _train_keys()
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _merge(doc: dict, args: argparse.Namespace, keys: list[str]) -> dict:
    out = dict(doc)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if key not in RUN_KEYS and key not in _train_keys():
            raise UsageError(f"unknown key in --set: {key}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def load_dataset(spec) -> Dataset:
    """A list of CIFAR-10 batch paths, one path, or a synthetic spec dict."""
    if isinstance(spec, dict):
        unknown = set(spec) - {"n", "classes", "size", "seed"}
        if unknown:
            raise UsageError(f"unknown synthetic keys: {sorted(unknown)}")
        return generate_synthetic(spec.get("n", 2000), spec.get("classes", 3), spec.get("size", 16),
                                  spec.get("seed", 0))
    paths = [spec] if isinstance(spec, str) else list(spec)
    for p in paths:
        if not os.path.exists(p):
            raise DataError(f"dataset path does not exist: {p}")
    parts = [load_cifar10(p) for p in paths]
    if len(parts) == 1:
        return parts[0]
    return Dataset(np.concatenate([d.images for d in parts]), np.concatenate([d.labels for d in parts]), 10)


def _dataset(run: dict, data_key: str, syn_key: str) -> Dataset:
    if run.get(data_key):
        return load_dataset(run[data_key])
    if run.get(syn_key) is not None:
        return load_dataset(run[syn_key])
    raise UsageError(f"no dataset given (set --{data_key.replace('_', '-')} or {syn_key})")


def _train_config(run: dict):
    from .trainer import TrainConfig
    return TrainConfig.from_dict({k: v for k, v in run.items() if k in _train_keys()}).validate()


def _emit(result: dict, run: dict) -> None:
    line = json.dumps(result)
    print(line)
    if run.get("metrics_out"):
        with open(run["metrics_out"], "a") as fh:
            fh.write(line + "\n")


# --- subcommands ----------------------------------------------------------------

def cmd_pretrain(args, doc) -> int:
    from .trainer import pretrain, with_dataset_stats
    run = _merge(doc, args, ["data", "out_dir", "resume", "epochs", "seed", "batch_size"])
    if run.get("data") is None and run.get("synthetic") is None:
        run["synthetic"] = {"n": 2000, "classes": 3, "size": run.get("image_size", 32), "seed": 0}
    if not run.get("out_dir"):
        raise UsageError("pretrain needs --out-dir")
    if run.get("resume") and not os.path.exists(run["resume"]):
        raise DataError(f"resume checkpoint does not exist: {run['resume']}")
    cfg = _train_config(run)
    ds = _dataset(run, "data", "synthetic")
    cfg = with_dataset_stats(cfg, ds)
    os.makedirs(run["out_dir"], exist_ok=True)
    effective = {**{k: v for k, v in run.items() if k in RUN_KEYS}, **cfg.to_dict()}
    with open(os.path.join(run["out_dir"], "run_config.json"), "w") as fh:
        json.dump(effective, fh, indent=2)
    print(json.dumps({"effective_config": effective}))
    _, metrics = pretrain(ds, cfg, out_dir=run["out_dir"], resume=run.get("resume"))
    last = metrics[-1] if metrics else {}
    print(json.dumps({"steps": len(metrics), "final": last,
                      "checkpoint": os.path.join(run["out_dir"], "final.ckpt")}))
    return EXIT_OK


def _features(run: dict):
    from .evaluation import extract_features
    from .trainer import init_state, load_checkpoint
    ckpt = run.get("checkpoint")
    if not ckpt:
        raise UsageError("evaluation needs --checkpoint")
    if not os.path.exists(ckpt):
        raise DataError(f"checkpoint does not exist: {ckpt}")
    state, cfg = load_checkpoint(ckpt)
    if run.get("random_init"):
        state = init_state(cfg)
    size = cfg.image_size
    default = lambda seed, n: {"n": n, "classes": 3, "size": size, "seed": seed}
    train = _dataset({**run, "synthetic": run.get("synthetic", default(0, 2000))}, "data", "synthetic")
    test = _dataset({**run, "test_synthetic": run.get("test_synthetic", default(1, 600))},
                    "test_data", "test_synthetic")
    return extract_features(train, state, cfg), extract_features(test, state, cfg)


def cmd_eval_knn(args, doc) -> int:
    from .evaluation import knn_eval
    run = _merge(doc, args, ["checkpoint", "data", "test_data", "k", "knn_tau", "metrics_out", "random_init"])
    k, tau = run.get("k", 20), run.get("knn_tau", 0.07)
    tr, te = _features(run)
    acc = knn_eval(tr, te, k=k, knn_tau=tau)
    _emit({"metric": "knn", "accuracy": acc, "k": k, "knn_tau": tau, "checkpoint": run["checkpoint"],
           "random_init": bool(run.get("random_init"))}, run)
    return EXIT_OK


def cmd_eval_linear(args, doc) -> int:
    from .evaluation import linear_probe
    run = _merge(doc, args, ["checkpoint", "data", "test_data", "probe_epochs", "probe_lr", "metrics_out",
                             "random_init"])
    epochs, lr = run.get("probe_epochs", 100), run.get("probe_lr", 0.1)
    tr, te = _features(run)
    acc = linear_probe(tr, te, epochs=epochs, lr=lr)
    _emit({"metric": "linear", "accuracy": acc, "epochs": epochs, "lr": lr, "checkpoint": run["checkpoint"],
           "random_init": bool(run.get("random_init"))}, run)
    return EXIT_OK


def cmd_stitch_preview(args, doc) -> int:
    from .preview import export_preview, rederive_m2s, slot_pixel_mismatches
    run = _merge(doc, args, ["data", "out_dir", "seed"])
    if not run.get("out_dir"):
        raise UsageError("stitch-preview needs --out-dir")
    if run.get("data"):
        ds = load_dataset(run["data"])
    else:
        ds = load_dataset(run.get("synthetic") or {"n": max(args.n, 1), "classes": 3, "size": args.size,
                                                   "seed": run.get("seed", 0)})
    StitchConfig(args.r, args.S, ds.image_size)  # reject bad factors before any work
    side = export_preview(ds, run["out_dir"], args.n, args.r, args.S, seed=run.get("seed", 0))
    mism = int((rederive_m2s(side) != np.asarray(side["y_m2s"])).sum())
    print(json.dumps({"out_dir": run["out_dir"], "N": side["N"], "M": side["M"],
                      "m2m_available": side["y_m2m"] is not None, "y_m2s_mismatches": mism,
                      "slot_pixel_mismatches": slot_pixel_mismatches(run["out_dir"])}))
    return EXIT_OK


def cmd_grad_check(args, doc) -> int:
    from .trainer import MICRO, TrainConfig, grad_check
    cfg = TrainConfig(**{**MICRO, **{k: v for k, v in doc.items() if k in _train_keys()}})
    res = grad_check(cfg, tolerance=args.tolerance, seed=args.seed)
    print(json.dumps(res.__dict__))
    return EXIT_OK if res.passed else EXIT_NUMERIC


def cmd_verify_targets(args, doc) -> int:
    report = verify_index_math(args.max_n, args.m)
    print(json.dumps(report))
    return EXIT_OK if report["mismatched"] == 0 else EXIT_NUMERIC


def cmd_export_synthetic(args, doc) -> int:
    if args.size != 32:
        raise UsageError("the CIFAR-10 record format holds 32x32 images; use --size 32")
    ds = generate_synthetic(args.n, args.classes, args.size, args.seed)
    save_cifar10(ds, args.out)
    print(json.dumps({"path": args.out, "records": len(ds)}))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mos", description="Multiple object stitching pretraining toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; flags override its values")
        sp.add_argument("--set", action="append", metavar="KEY=JSON", help="override any config key")
        return sp

    sp = common(sub.add_parser("pretrain", help="self-supervised pretraining"))
    sp.add_argument("--data", nargs="+", help="CIFAR-10 binary batch files (default: synthetic shapes)")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--resume")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.set_defaults(fn=cmd_pretrain)

    for name, fn, help_ in (("eval-knn", cmd_eval_knn, "weighted kNN on frozen features"),
                            ("eval-linear", cmd_eval_linear, "linear probe on frozen features")):
        sp = common(sub.add_parser(name, help=help_))
        sp.add_argument("--checkpoint")
        sp.add_argument("--data", nargs="+", help="training split (CIFAR-10 files)")
        sp.add_argument("--test-data", dest="test_data", nargs="+", help="test split (CIFAR-10 files)")
        sp.add_argument("--metrics-out", dest="metrics_out", help="append the JSON result to this file")
        sp.add_argument("--random-init", dest="random_init", action="store_const", const=True,
                        help="evaluate the checkpoint's architecture at initialization")
        if name == "eval-knn":
            sp.add_argument("--k", type=int)
            sp.add_argument("--knn-tau", dest="knn_tau", type=float)
        else:
            sp.add_argument("--probe-epochs", dest="probe_epochs", type=int)
            sp.add_argument("--probe-lr", dest="probe_lr", type=float)
        sp.set_defaults(fn=fn)

    sp = common(sub.add_parser("stitch-preview", help="write one stitched batch as PPM + JSON sidecar"))
    sp.add_argument("--n", type=int, default=3)
    sp.add_argument("--r", type=int, default=2)
    sp.add_argument("--S", type=int, default=1)
    sp.add_argument("--size", type=int, default=32, help="synthetic image size")
    sp.add_argument("--data", nargs="+")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_stitch_preview)

    sp = common(sub.add_parser("grad-check", help="finite-difference gradient check on the micro config"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_grad_check)

    sp = common(sub.add_parser("verify-targets", help="closed-form vs brute-force index and score sweep"))
    sp.add_argument("--max-n", dest="max_n", type=int, default=32)
    sp.add_argument("--m", type=int, nargs="+", default=[1, 3, 4, 9])
    sp.set_defaults(fn=cmd_verify_targets)

    sp = common(sub.add_parser("export-synthetic", help="write synthetic shapes as a CIFAR-10 binary file"))
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export_synthetic)
    return p


def _set_threads() -> None:
    raw = os.environ.get("MOS_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise UsageError(f"MOS_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise UsageError("MOS_THREADS must be >= 1")
        torch.set_num_threads(n)


def run(argv: list[str] | None = None) -> int:
    from .trainer import ConfigError, TrainingAborted
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        _set_threads()
        doc = load_run_config(args.config)
        return args.fn(args, doc)
    except (DataError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigError, StitchConfigError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
