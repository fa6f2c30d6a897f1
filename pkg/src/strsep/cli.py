"""``strsep`` command line: generate, train, eval, plot.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 numerical abort during training.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .datagen import generate_dataset
from .evaluation import (MAX_MATCH_SOURCES, UnsupportedSizeError, WhiteningError, align_and_normalize,
                         joint_diag_baseline, match_sources)
from .figures import sources_figure, structure_figure, training_figure, write_figure
from .io import CheckpointFormatError, CSVFormatError, read_diagnostics, read_matrix_csv, write_matrix_csv
from .trainer import TrainingAborted, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("strsep")


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("STRSEP_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "max_iters", None) is not None:
        cfg.train.max_iters = args.max_iters
    if getattr(args, "deterministic", False):
        cfg.train.deterministic = True
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load_run_config(args)
    ds = generate_dataset(cfg.data)
    out = _out_dir(args.out)
    write_matrix_csv(ds.Y, out / "Y.csv", header=[f"y{j}" for j in range(ds.Y.shape[1])])
    write_matrix_csv(ds.X, out / "X.csv", header=[f"x{j}" for j in range(ds.X.shape[1])])
    _dump_json(ds.meta, out / "meta.json")
    log.info("wrote %s (T=%d, m=%d, K=%d)", out, ds.Y.shape[0], ds.Y.shape[1], ds.X.shape[1])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    data = Path(args.data)
    Y = read_matrix_csv(data / "Y.csv")
    X = read_matrix_csv(data / "X.csv") if (data / "X.csv").exists() else None
    if X is not None and X.shape[0] != Y.shape[0]:
        raise UsageError("X.csv and Y.csv have different lengths")
    out = _out_dir(args.out)
    diag_path = out / cfg.output.diagnostics

    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        if state.S.shape[0] != Y.shape[0] or state.mixer.n_channels != Y.shape[1]:
            raise UsageError("checkpoint does not match the data dimensions")
        state.config = dataclasses.replace(state.config, max_iters=cfg.train.max_iters)
        log.info("resuming from iteration %d", state.iteration)
    else:
        if cfg.train.n_sources > Y.shape[1] and cfg.train.mixer == "affine":
            log.info("more sources than channels: the affine mixer is not injective")
        diag_path.write_text("")

    try:
        state, history = train(Y, cfg.train, references=X, state=state, log_path=diag_path)
    except TrainingAborted as exc:
        log.error("training aborted: %s (partial log kept in %s)", exc, diag_path)
        return EXIT_NUMERIC
    save_checkpoint(state, out / cfg.output.checkpoint)
    write_matrix_csv(state.S.data, out / cfg.output.estimate,
                     header=[f"s{k}" for k in range(state.S.shape[1])])
    if history:
        last = history[-1]
        print(" ".join(f"{k}={last[f'loss_{k}']:.6g}"
                       for k in ("total", "rec", "str", "sep", "smooth", "ent", "gap")))
        if "mac" in last:
            print(f"MAC={last['mac']:.4f}")
    else:
        print(f"nothing to do: checkpoint already at iteration {state.iteration}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data = Path(args.data)
    if not (data / "X.csv").exists():
        raise UsageError(f"evaluation needs reference sources: {data / 'X.csv'} not found")
    X = read_matrix_csv(data / "X.csv")
    if args.estimate:
        S = read_matrix_csv(args.estimate)
    elif args.checkpoint:
        S = load_checkpoint(args.checkpoint).S.data
    else:
        raise UsageError("eval needs --checkpoint or --estimate")
    if S.shape != X.shape:
        raise UsageError(f"estimate shape {S.shape} does not match references {X.shape}")
    if S.shape[1] > MAX_MATCH_SOURCES:
        raise UsageError(f"exhaustive matching supports at most {MAX_MATCH_SOURCES} sources, got {S.shape[1]}")

    match = match_sources(S, X)
    report = match.to_json()
    print(f"MAC={match.mac:.4f}")
    if args.baseline:
        Y = read_matrix_csv(data / "Y.csv")
        base = joint_diag_baseline(Y, n_sources=X.shape[1])
        bmatch = match_sources(base.sources, X)
        report["baseline"] = {**bmatch.to_json(), "identifiable": base.identifiable,
                              "off_diagonality": base.off_diagonality}
        print(f"baseline MAC={bmatch.mac:.4f}")
    out = _out_dir(args.out)
    _dump_json(report, out / "match.json")
    k = X.shape[1]
    write_matrix_csv(align_and_normalize(S, X, match), out / "S_aligned.csv",
                     header=[f"s{j}" for j in range(k)])
    Xz = (X - X.mean(0)) / np.where(X.std(0) > 0, X.std(0), 1.0)
    write_matrix_csv(Xz, out / "X_ref_z.csv", header=[f"x{j}" for j in range(k)])
    return EXIT_OK


def cmd_plot(args) -> int:
    records, skipped = read_diagnostics(args.diagnostics)
    if skipped:
        log.warning("skipped %d malformed diagnostics lines", skipped)
    if not records:
        raise UsageError("no records in diagnostics log")
    out = _out_dir(args.out)
    written = [write_figure(training_figure(records), out), write_figure(structure_figure(records), out)]
    if args.eval_dir:
        ev = Path(args.eval_dir)
        if (ev / "S_aligned.csv").exists() and (ev / "X_ref_z.csv").exists():
            fig = sources_figure(read_matrix_csv(ev / "S_aligned.csv"), read_matrix_csv(ev / "X_ref_z.csv"))
            written.append(write_figure(fig, out))
        else:
            log.info("no aligned sources in %s; skipping source overlay", ev)
    for svg, _ in written:
        log.info("wrote %s", svg)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strsep", description="Source-wise structured Transformer separation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML run configuration")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides data and training seeds")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("generate", help="write a synthetic dataset (Y.csv, X.csv, meta.json)")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="optimise sources, mixer and branches")
    common(t)
    t.add_argument("--data", required=True, help="directory containing Y.csv (and optionally X.csv)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-iters", type=int, dest="max_iters", help="overrides [train] max_iters")
    t.add_argument("--deterministic", action="store_true", help="force deterministic mode")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="match estimates to references and write aligned sources")
    e.add_argument("--checkpoint", help="checkpoint produced by train")
    e.add_argument("--estimate", help="evaluate this CSV instead of a checkpoint")
    e.add_argument("--data", required=True, help="directory containing X.csv (and Y.csv for --baseline)")
    e.add_argument("--out", required=True)
    e.add_argument("--baseline", action="store_true", help="also run the joint-diagonalisation baseline")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="render SVG figures with sibling CSVs")
    pl.add_argument("--diagnostics", required=True)
    pl.add_argument("--eval-dir", dest="eval_dir", help="eval output directory for the source overlay")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, UnsupportedSizeError) as exc:
        print(f"strsep: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WhiteningError as exc:
        print(f"strsep: error: baseline failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CSVFormatError, CheckpointFormatError) as exc:
        print(f"strsep: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
