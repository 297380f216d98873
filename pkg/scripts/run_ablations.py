#!/usr/bin/env python3
"""Component ablations: closed-block recovery with each regularizer off.

Runs the full configuration and the four single-component ablations
(volume off, anchor off, convex off, auxiliary loss off) over several
seeds and reports the median closed_mae of each, the quantity the
ablation claim is stated in.
"""

import argparse
from dataclasses import replace

import numpy as np

from simt.cli import ExperimentConfig
from simt.synth import generate
from simt.train import evaluate, run_training

ABLATIONS = (
    ("full", {}),
    ("alpha=0 (volume off)", {"alpha": 0.0}),
    ("beta=0 (anchor off)", {"beta": 0.0}),
    ("gamma=0 (convex off)", {"gamma": 0.0}),
    ("aux off", {"use_aux": False}),
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/toy.json")
    parser.add_argument("--seeds", type=int, default=5)
    args = parser.parse_args()

    config = ExperimentConfig.from_file(args.config)
    dataset = generate(config.spec, config.n_train, config.seed)
    heldout = generate(config.spec, config.eval_n, config.seed + 1)

    medians = {}
    for name, overrides in ABLATIONS:
        maes = []
        for seed in range(args.seeds):
            train = replace(config.train, seed=seed, **overrides)
            state = run_training(dataset, train)
            maes.append(evaluate(state, heldout).closed_mae)
        medians[name] = float(np.median(maes))
        print(f"{name:<24} closed_mae median {medians[name]:.4f}   "
              f"seeds {[f'{m:.4f}' for m in maes]}")

    full = medians["full"]
    print()
    for name, _ in ABLATIONS[1:]:
        verdict = "degrades (expected)" if medians[name] > full else (
            "ties" if medians[name] == full else "IMPROVES (unexpected)")
        print(f"{name:<24} {medians[name]:.4f} vs full {full:.4f}: {verdict}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
