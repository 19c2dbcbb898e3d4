"""``trialign`` command line: data generation, staged training, evaluation,
ablations, embedding export and the eigenvalue-vs-SVD micro-benchmark.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .losses import ConfigError, sample_triplet_indices, triplet_gram
from .models import CheckpointError, TriModalModel
from .numkit import Rng, ValidationError, l2_normalize_rows
from .pipeline import (MissingPretrainingWarning, PipelineConfig, TrainingAborted, ablation_configs, ablation_matrix,
                       embed_dataset, evaluate, make_splits, run_stage)
from .synthdata import DataSpec, make_dataset, read_jsonl, to_arrays, write_jsonl

log = logging.getLogger("trialign")

EXPORT_MODALITIES = ("img", "2d", "3d")


def _warn_to_stderr(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def _load_records(path) -> list:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"data file not found: {path}")
    records = read_jsonl(path)
    if not records:
        raise ValidationError(f"{path} holds no records")
    return records


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    records = make_dataset(args.n, Rng(args.seed))
    if args.out == "-":
        for r in records:
            sys.stdout.write(r.to_json() + "\n")
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_jsonl(records, args.out)
        log.info("wrote %d records to %s", len(records), args.out)
    return 0


def _load_pipeline_config(path) -> PipelineConfig:
    from .config import load_config
    return load_config(path)


def cmd_train(args) -> int:
    cfg = _load_pipeline_config(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if not cfg.output_dir:
        raise ConfigError("no output directory: set output_dir in the config or pass --out")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        train = to_arrays(_load_records(args.data), cfg.data_spec)
        test = to_arrays(_load_records(args.test_data), cfg.data_spec) if args.test_data else train
    else:
        train, test = make_splits(cfg)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    stages = [s for s in stages if cfg.stage(s) is not None]
    if not stages:
        raise ConfigError(f"stage {args.stage} is disabled in the config")

    model = None
    prev = out / f"stage{stages[0] - 1}.npz"
    if stages[0] > 1 and prev.exists():
        model, _ = TriModalModel.load(prev)
        log.info("resuming from %s", prev)
    if model is None:
        first = cfg.stage(stages[0])
        model = TriModalModel(cfg.model, seed=cfg.seed, tau0=first.tau0, tau_range=first.tau_range)
        model.calibrate(train)
    probe = test.subset(np.arange(min(cfg.probe_size, len(test))))
    for s in stages:
        sc = replace(cfg.stage(s), seed=cfg.seed)
        res = run_stage(sc, model, train, probe, out / f"stage{s}.npz")
        res.log.write_csv(out / f"stage{s}_log.csv")
        print(f"stage {s}: checkpoint {res.checkpoint}, final loss {res.log.last['loss_total']:.6g}")
    report = evaluate(model, test)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    sys.stdout.write(report.to_csv())
    return 0


def _load_model(path) -> TriModalModel:
    model, _ = TriModalModel.load(path)
    return model


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    ds = to_arrays(_load_records(args.data), DataSpec(grid=model.config.grid))
    report = evaluate(model, ds)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    sys.stdout.write(report.to_csv())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_pipeline_config(args.config)
    toggles = {}
    for name in args.toggles.split(","):
        name = name.strip()
        if name:
            toggles[name] = [False, True]
    rows = ablation_configs(cfg, toggles)
    train, test = make_splits(cfg)
    results = ablation_matrix(rows, train, test)
    from .metrics import reports_to_csv
    text = reports_to_csv([r for _, r in results], [lab for lab, _ in results])
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.output_dir) / "ablation.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_export_embeddings(args) -> int:
    model = _load_model(args.checkpoint)
    records = _load_records(args.data)
    ds = to_arrays(records, DataSpec(grid=model.config.grid))
    emb = embed_dataset(model, ds)
    d = model.config.embed_dim
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "modality"] + [f"e{k}" for k in range(d)])
        for m in EXPORT_MODALITIES:
            for rid, vec in zip(ds.ids, emb[m]):
                w.writerow([int(rid), m] + [repr(float(v)) for v in vec])
    log.info("wrote %d embeddings to %s", len(EXPORT_MODALITIES) * len(ds), args.out)
    return 0


def _svd_top_eigenvalues(x: list[np.ndarray], idx: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Top eigenvalues via an explicit SVD of every stacked 3xD triplet (reference path)."""
    b = idx.shape[0]
    out = np.empty((b, b))
    for s in range(0, b, chunk):
        sl = idx[s:s + chunk]
        m = np.stack([x[0][sl[..., 0]], x[1][sl[..., 1]], x[2][sl[..., 2]]], axis=-2)  # (c, B, 3, D)
        out[s:s + chunk] = np.linalg.svd(m, compute_uv=False)[..., 0] ** 2
    return out


def bench_loss(b: int, d: int, iters: int, seed: int = 0) -> dict:
    from .numkit import sym_eig3
    rng = Rng(seed)
    x = [l2_normalize_rows(rng.child("x", k).normal(size=(b, d))) for k in range(3)]
    gram_t, svd_t = [], []
    max_diff = 0.0
    for it in range(iters):
        idx = sample_triplet_indices(b, rng.child("idx", it))
        t0 = time.perf_counter()
        lam_gram = sym_eig3(triplet_gram(*x, idx).data, check=False).eigenvalues[..., 0]
        t1 = time.perf_counter()
        lam_svd = _svd_top_eigenvalues(x, idx)
        t2 = time.perf_counter()
        gram_t.append(t1 - t0)
        svd_t.append(t2 - t1)
        max_diff = max(max_diff, float(np.max(np.abs(lam_gram - lam_svd))))
    g, s = float(np.median(gram_t)), float(np.median(svd_t))
    return {"b": b, "d": d, "iters": iters, "gram_eig_s": g, "svd_s": s, "speedup": s / g,
            "max_abs_diff": max_diff}


def cmd_bench_loss(args) -> int:
    res = bench_loss(args.b, args.d, args.iters, args.seed)
    print(json.dumps(res, sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# parser and dispatch
# --------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trialign", description="Tri-modal pose embedding alignment toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset as JSONL")
    g.add_argument("--n", type=_positive_int, required=True, help="number of records")
    g.add_argument("--seed", type=int, required=True, help="dataset seed")
    g.add_argument("--out", required=True, help="output JSONL path ('-' for stdout)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage or the full schedule")
    t.add_argument("--config", required=True, help="JSON run configuration")
    t.add_argument("--stage", choices=("1", "2", "3", "all"), default="all", help="stage to run")
    t.add_argument("--out", help="output directory (overrides output_dir in the config)")
    t.add_argument("--data", help="training JSONL (default: generate from the config)")
    t.add_argument("--test-data", help="evaluation JSONL used with --data")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a JSONL dataset")
    e.add_argument("--checkpoint", required=True, help="checkpoint (.npz) written by train")
    e.add_argument("--data", required=True, help="JSONL dataset")
    e.add_argument("--out", help="also write the metric report as JSON here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every toggle combination")
    a.add_argument("--config", required=True, help="JSON run configuration")
    a.add_argument("--toggles", default="use_triplet,use_modality_token",
                   help="comma-separated toggles: use_triplet, use_modality_token, pretrain")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-embeddings", help="write image, 2D and 3D embeddings as CSV")
    x.add_argument("--checkpoint", required=True, help="checkpoint (.npz) written by train")
    x.add_argument("--data", required=True, help="JSONL dataset")
    x.add_argument("--out", required=True, help="output CSV path")
    x.set_defaults(func=cmd_export_embeddings)

    bl = sub.add_parser("bench-loss", help="time triplet eigenvalues via Gram matrices vs explicit SVD")
    bl.add_argument("--b", type=_positive_int, default=180, help="batch size")
    bl.add_argument("--d", type=_positive_int, default=1024, help="embedding dimension")
    bl.add_argument("--iters", type=_positive_int, default=5, help="timed repetitions")
    bl.add_argument("--seed", type=int, default=0, help="seed for the random embeddings")
    bl.set_defaults(func=cmd_bench_loss)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors; --help exits 0
        code = e.code if isinstance(e.code, int) else 1
        return 0 if code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    with warnings.catch_warnings():
        warnings.simplefilter("always", MissingPretrainingWarning)
        warnings.showwarning = _warn_to_stderr
        try:
            return args.func(args)
        except (ValidationError, ConfigError, CheckpointError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 1
        except TrainingAborted as e:
            print(f"training aborted: {e}", file=sys.stderr)
            return 2
        except Exception as e:  # any other failure is a runtime error
            print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
            return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
