"""Command-line interface: gen, train, eval, gradcheck.

Exit codes: 0 success; 1 gradient-certification failure (the failing
term is named); 2 configuration or file validation failure (the
offending key or file in the diagnostic); 3 numerical failure during
training (iteration number on stderr); 130 on interrupt, after writing
a checkpoint.  The SIMT_LOG environment variable sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gradcheck import TOLERANCE, run_gradcheck
from .linalg import SingularGram
from .model import NumericalUnderflow
from .serialize import load_json, matrix_to_csv
from .synth import GroundTruthSpec, generate, load_dataset, save_dataset
from .train import (
    MetricsRecord,
    TrainConfig,
    evaluate,
    init_training,
    load_checkpoint,
    run_training,
    save_checkpoint,
)
from .transition import materialize_simt

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Configuration or input-file validation failure (exit code 2)."""


@dataclass
class ExperimentConfig:
    """One experiment: data spec, training config, sizes, cadence."""

    spec: GroundTruthSpec
    train: TrainConfig
    n_train: int
    eval_n: int = 2000
    eval_every: int = 1000
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.n_train < 1:
            raise ValueError(f"n_train must be >= 1, got {self.n_train}")
        if self.eval_n < 1:
            raise ValueError(f"eval_n must be >= 1, got {self.eval_n}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.train.C != self.spec.C:
            raise ValueError(
                f"train.C={self.train.C} does not match spec.C={self.spec.C}")
        if self.train.n < self.spec.n_true:
            raise ValueError(
                f"train.n={self.train.n} must be >= spec.n_true="
                f"{self.spec.n_true} for recovery evaluation")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        doc = load_json(path)
        try:
            known = {"spec", "train", "n_train", "eval_n", "eval_every",
                     "seed", "out_dir"}
            unknown = set(doc) - known
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            return cls(
                spec=GroundTruthSpec.from_dict(doc["spec"]),
                train=TrainConfig.from_dict(doc["train"]),
                n_train=int(doc["n_train"]),
                eval_n=int(doc.get("eval_n", 2000)),
                eval_every=int(doc.get("eval_every", 1000)),
                seed=int(doc.get("seed", 0)),
                out_dir=doc.get("out_dir"),
            )
        except KeyError as exc:
            raise ValueError(f"missing config key: {exc}") from exc


def _load_experiment(path, seed_override: int | None) -> ExperimentConfig:
    try:
        config = ExperimentConfig.from_file(path)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc
    if seed_override is not None:
        # one knob reseeds the whole experiment: data and training
        config.seed = seed_override
        train = config.train.to_dict()
        train["seed"] = seed_override
        config.train = TrainConfig.from_dict(train)
    return config


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


class _CsvSink:
    """Appends MetricsRecords to a CSV file, one flushed row each."""

    def __init__(self, path: Path, write_header: bool):
        self._fh = open(path, "a" if not write_header else "w")
        if write_header:
            self._fh.write(",".join(MetricsRecord.FIELDS) + "\n")
            self._fh.flush()

    def append(self, record: MetricsRecord) -> None:
        self._fh.write(",".join(_fmt(v) for v in record.as_row()) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def cmd_gen(args) -> int:
    config = _load_experiment(args.config, args.seed)
    out = Path(args.out)
    ds = generate(config.spec, config.n_train, config.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {ds.n} instances to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_experiment(args.config, args.seed)
    out = Path(args.out or config.out_dir or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
        dataset = load_dataset(args.data)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad dataset {args.data}: {exc}") from exc
    if dataset.spec.C != config.spec.C:
        raise ConfigError(
            f"dataset C={dataset.spec.C} does not match config "
            f"C={config.spec.C}")
    eval_every = args.eval_every or config.eval_every
    heldout = generate(config.spec, config.eval_n, dataset.seed + 1)

    checkpoint_path = out / "checkpoint.json"
    resuming = checkpoint_path.exists()
    if resuming:
        try:
            state = load_checkpoint(checkpoint_path)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(
                f"bad checkpoint {checkpoint_path}: {exc}") from exc
        if state.config != config.train:
            raise ConfigError(
                "checkpoint config does not match experiment config; "
                "use a fresh --out directory")
        logger.info("resuming from iteration %d", state.iteration)
    else:
        state = init_training(dataset, config.train)

    metrics_path = out / "metrics.csv"
    sink = _CsvSink(metrics_path, write_header=not (resuming
                                                    and metrics_path.exists()))
    try:
        run_training(dataset, config.train, heldout=heldout,
                     eval_every=eval_every, metrics_sink=sink, state=state)
    except KeyboardInterrupt:
        save_checkpoint(state, checkpoint_path)
        sink.close()
        print(f"interrupted at iteration {state.iteration}; "
              f"checkpoint saved", file=sys.stderr)
        return 130
    except (NumericalUnderflow, SingularGram) as exc:
        sink.close()
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    save_checkpoint(state, checkpoint_path)
    t = materialize_simt(state.simt)
    matrix_to_csv(t, out / "simt.csv")
    sink.close()
    print(f"finished at iteration {state.iteration}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    try:
        state = load_checkpoint(args.checkpoint)
        dataset = load_dataset(args.data)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad input file: {exc}") from exc
    if dataset.spec.C != state.config.C:
        raise ConfigError(
            f"dataset C={dataset.spec.C} does not match checkpoint "
            f"C={state.config.C}")
    record = evaluate(state, dataset)
    doc = {name: getattr(record, name) for name in MetricsRecord.FIELDS}
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    try:
        reports = run_gradcheck(seed=args.seed if args.seed is not None else 0,
                                instances=args.instances,
                                corrupt=args.corrupt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    failed = []
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.term:8s} instances={r.instances} "
              f"max_rel_error={r.max_rel_error:.3e} {status}")
        if not r.passed:
            failed.append(r.term)
    if failed:
        print(f"gradient check failed: {', '.join(failed)} "
              f"(tolerance {TOLERANCE:g})", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="simt",
        description="Simplex transition-matrix correction for mixed "
                    "closed/open-set label noise.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="run the training protocol")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", default=None,
                         help="output directory (resumes if it holds a "
                              "checkpoint)")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--eval-every", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_gc = sub.add_parser("gradcheck",
                          help="certify analytic gradients against "
                               "finite differences")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--instances", type=int, default=50)
    p_gc.add_argument("--corrupt", default=None,
                      help="testing hook: corrupt the named term's "
                           "gradient (must fail)")
    p_gc.set_defaults(func=cmd_gradcheck)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=os.environ.get("SIMT_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
