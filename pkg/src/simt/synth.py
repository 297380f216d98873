"""Synthetic mixed closed/open-set noise benchmark.

Features are class-conditional isotropic Gaussians; clean labels come
from fixed mixing weights and pseudo labels are drawn from the rows of a
known ground-truth transition matrix, so every quantity the learner
estimates has an exact reference.  The confusion oracle (which peeks at
the clean labels) provides the classical estimate the learned transition
matrix is compared against.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import as_matrix

logger = logging.getLogger(__name__)


class EmptyInput(Exception):
    """An operation that needs at least one instance got none."""


class ShapeMismatch(Exception):
    """Estimated and reference transition matrices do not line up."""


@dataclass
class GroundTruthSpec:
    """Everything needed to sample the benchmark and score against it.

    means : (C + n_true, d) class means
    mixing : (C + n_true,) clean-label probabilities
    t_true : (C + n_true, C) ground-truth transition matrix; the closed
        block must be diagonally dominant (argmax of row j is j).
    """

    C: int
    n_true: int
    d: int
    means: np.ndarray
    feature_std: float
    mixing: np.ndarray
    t_true: np.ndarray

    def __post_init__(self):
        if self.C < 2:
            raise ValueError(f"need at least two closed classes, got C={self.C}")
        if self.n_true < 0:
            raise ValueError("n_true must be >= 0")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not self.feature_std > 0.0:
            raise ValueError("feature_std must be > 0")
        k = self.C + self.n_true
        self.means = as_matrix(self.means, "means")
        if self.means.shape != (k, self.d):
            raise ValueError(f"means must be ({k}, {self.d}), got {self.means.shape}")
        self.mixing = np.asarray(self.mixing, dtype=np.float64)
        if self.mixing.shape != (k,):
            raise ValueError(f"mixing must have length {k}")
        if np.any(self.mixing < 0.0) or abs(float(self.mixing.sum()) - 1.0) > 1e-9:
            raise ValueError("mixing must be nonnegative and sum to 1")
        self.t_true = as_matrix(self.t_true, "t_true")
        if self.t_true.shape != (k, self.C):
            raise ValueError(f"t_true must be ({k}, {self.C})")
        if np.any(self.t_true < 0.0):
            raise ValueError("t_true entries must be nonnegative")
        if np.max(np.abs(self.t_true.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("t_true rows must sum to 1")
        closed_argmax = np.argmax(self.t_true[: self.C], axis=1)
        if not np.array_equal(closed_argmax, np.arange(self.C)):
            raise ValueError("closed block of t_true must be diagonally dominant")

    def to_dict(self) -> dict:
        return {
            "C": self.C,
            "n_true": self.n_true,
            "d": self.d,
            "means": self.means.tolist(),
            "feature_std": self.feature_std,
            "mixing": self.mixing.tolist(),
            "t_true": self.t_true.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruthSpec":
        return cls(
            C=int(data["C"]),
            n_true=int(data["n_true"]),
            d=int(data["d"]),
            means=data["means"],
            feature_std=float(data["feature_std"]),
            mixing=data["mixing"],
            t_true=data["t_true"],
        )


@dataclass
class SyntheticDataset:
    """Sampled benchmark instances; labels are 1-based.

    clean labels lie in 1..C+n_true, pseudo labels in 1..C.
    """

    features: np.ndarray
    clean_labels: np.ndarray
    pseudo_labels: np.ndarray
    spec: GroundTruthSpec
    seed: int

    @property
    def n(self) -> int:
        return self.features.shape[0]


def toy_spec(separation: float = 4.0) -> GroundTruthSpec:
    """The canonical desk-scale benchmark: 3 closed classes, 2 open.

    All five class means sit at ``separation / sqrt(2)`` along distinct
    coordinate axes of an 8-dim space, so every pair of classes is
    exactly ``separation`` apart at unit feature noise.  Closed rows
    carry 20-30% off-diagonal noise; the open rows are flatter (so
    warm-up confidence separates them) yet lie outside the convex hull
    of the other rows.
    """
    c, n_true, d = 3, 2, 8
    scale = separation / np.sqrt(2.0)
    means = np.zeros((c + n_true, d))
    for j in range(c + n_true):
        means[j, j] = scale
    t_true = np.array([
        [0.80, 0.12, 0.08],
        [0.10, 0.75, 0.15],
        [0.13, 0.17, 0.70],
        [0.48, 0.46, 0.06],
        [0.06, 0.47, 0.47],
    ])
    mixing = np.array([0.24, 0.24, 0.24, 0.14, 0.14])
    return GroundTruthSpec(C=c, n_true=n_true, d=d, means=means,
                           feature_std=1.0, mixing=mixing, t_true=t_true)


def generate(spec: GroundTruthSpec, n: int, seed: int) -> SyntheticDataset:
    """Sample n instances; fully determined by (spec, n, seed).

    Draw order is fixed (clean labels, then features, then pseudo
    labels), so identical seeds give bit-identical datasets.
    """
    if n < 1:
        raise EmptyInput("need at least one instance to generate")
    rng = np.random.default_rng(seed)
    k = spec.C + spec.n_true
    clean0 = rng.choice(k, size=n, p=spec.mixing)
    features = spec.means[clean0] + spec.feature_std * rng.standard_normal((n, spec.d))
    # Inverse-CDF draw per instance from the clean label's transition row.
    cum = np.cumsum(spec.t_true, axis=1)
    u = rng.random(n)
    pseudo0 = (u[:, None] > cum[clean0]).sum(axis=1)
    return SyntheticDataset(
        features=features,
        clean_labels=(clean0 + 1).astype(np.int64),
        pseudo_labels=(pseudo0 + 1).astype(np.int64),
        spec=spec,
        seed=seed,
    )


def class_dist(pseudo_labels: np.ndarray, c: int) -> np.ndarray:
    """Empirical pseudo-label distribution over the C closed classes."""
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyInput("cannot compute a class distribution of nothing")
    if np.any(labels < 1) or np.any(labels > c):
        raise ValueError("pseudo labels must lie in 1..C")
    counts = np.bincount(labels - 1, minlength=c)
    return counts / labels.size


def confusion_oracle(
    clean_labels: np.ndarray, pseudo_labels: np.ndarray, c: int, n_true: int
) -> np.ndarray:
    """Empirical flip frequencies using the (oracle) clean labels.

    Row j is the distribution of pseudo labels among instances whose
    clean label is j.  Rows with no support fall back to uniform 1/C and
    are flagged in the log.
    """
    clean = np.asarray(clean_labels, dtype=np.int64)
    pseudo = np.asarray(pseudo_labels, dtype=np.int64)
    if clean.size == 0:
        raise EmptyInput("cannot build a confusion matrix of nothing")
    if clean.shape != pseudo.shape:
        raise ValueError("clean and pseudo labels must align")
    k = c + n_true
    counts = np.zeros((k, c))
    np.add.at(counts, (clean - 1, pseudo - 1), 1.0)
    support = counts.sum(axis=1)
    empty = np.nonzero(support == 0)[0]
    if empty.size:
        logger.warning("confusion oracle: rows %s have no support, using uniform",
                       (empty + 1).tolist())
        counts[empty] = 1.0
        support[empty] = c
    return counts / support[:, None]


@dataclass
class SimTError:
    """Estimation error split into closed and (matched) open parts.

    matching pairs (true open row, estimated open row) as 0-based
    offsets into the respective open blocks.
    """

    closed_mae: float
    open_mae: float
    matching: list[tuple[int, int]]


def simt_error(t_est: np.ndarray, t_true: np.ndarray) -> SimTError:
    """Mean absolute error of an estimated transition matrix.

    The closed blocks compare row by row.  True open rows are matched to
    estimated open rows with each estimated row used at most once; at
    desk scale (up to 8 true open rows) every assignment is enumerated,
    so the reported open_mae is the exhaustive minimum.  Beyond that the
    matcher falls back to globally-greedy pairing, which is not always
    optimal but scales.
    """
    t_est = np.asarray(t_est, dtype=np.float64)
    t_true = np.asarray(t_true, dtype=np.float64)
    if t_est.ndim != 2 or t_true.ndim != 2 or t_est.shape[1] != t_true.shape[1]:
        raise ShapeMismatch(f"column mismatch: {t_est.shape} vs {t_true.shape}")
    c = t_est.shape[1]
    n_est = t_est.shape[0] - c
    n_true = t_true.shape[0] - c
    if n_est < n_true or n_true < 0 or n_est < 0:
        raise ShapeMismatch(
            f"need at least as many estimated open rows ({n_est}) as true ones "
            f"({n_true})")
    closed_mae = float(np.mean(np.abs(t_est[:c] - t_true[:c])))
    if n_true == 0:
        return SimTError(closed_mae=closed_mae, open_mae=0.0, matching=[])
    open_est = t_est[c:]
    open_true = t_true[c:]
    # (true, est) pairwise mean-abs distances
    dist = np.mean(np.abs(open_true[:, None, :] - open_est[None, :, :]), axis=2)
    if n_true <= 8:
        matching = _exhaustive_matching(dist)
    else:
        matching = _greedy_matching(dist)
    open_mae = float(np.mean([dist[i, j] for i, j in matching]))
    return SimTError(closed_mae=closed_mae, open_mae=open_mae, matching=matching)


def _exhaustive_matching(dist: np.ndarray) -> list[tuple[int, int]]:
    n_true, n_est = dist.shape
    best_cost = np.inf
    best: tuple[int, ...] = ()
    for assign in itertools.permutations(range(n_est), n_true):
        cost = float(sum(dist[i, j] for i, j in enumerate(assign)))
        if cost < best_cost:
            best_cost = cost
            best = assign
    return sorted((i, j) for i, j in enumerate(best))


def _greedy_matching(dist: np.ndarray) -> list[tuple[int, int]]:
    n_true, n_est = dist.shape
    matching: list[tuple[int, int]] = []
    used_true: set[int] = set()
    used_est: set[int] = set()
    flat = sorted(
        ((dist[i, j], i, j) for i in range(n_true) for j in range(n_est)),
        key=lambda x: (x[0], x[1], x[2]),
    )
    for _, i, j in flat:
        if i in used_true or j in used_est:
            continue
        matching.append((i, j))
        used_true.add(i)
        used_est.add(j)
        if len(matching) == n_true:
            break
    return sorted(matching)


def save_dataset(ds: SyntheticDataset, out_dir) -> None:
    """Write dataset.jsonl, header.json and t_true.csv into a directory."""
    from .serialize import dump_json, matrix_to_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "dataset.jsonl").open("w") as fh:
        for i in range(ds.n):
            fh.write(json.dumps({
                "features": ds.features[i].tolist(),
                "clean_label": int(ds.clean_labels[i]),
                "pseudo_label": int(ds.pseudo_labels[i]),
            }) + "\n")
    dump_json({"spec": ds.spec.to_dict(), "seed": ds.seed, "n": ds.n},
              out / "header.json")
    matrix_to_csv(ds.spec.t_true, out / "t_true.csv")


def load_dataset(path) -> SyntheticDataset:
    """Load a dataset written by ``save_dataset``.

    Accepts the directory or the dataset.jsonl path; the header sidecar
    must sit next to the JSONL file.
    """
    from .serialize import load_json

    p = Path(path)
    if p.is_dir():
        jsonl, header_path = p / "dataset.jsonl", p / "header.json"
    else:
        jsonl, header_path = p, p.parent / "header.json"
    if not jsonl.exists():
        raise FileNotFoundError(f"no dataset at {jsonl}")
    if not header_path.exists():
        raise FileNotFoundError(f"missing sidecar header {header_path}")
    try:
        header = load_json(header_path)
        spec = GroundTruthSpec.from_dict(header["spec"])
    except (ValueError, KeyError) as exc:
        raise ValueError(f"{header_path}: {exc}") from exc
    features, clean, pseudo = [], [], []
    with jsonl.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                features.append(row["features"])
                clean.append(row["clean_label"])
                pseudo.append(row["pseudo_label"])
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{jsonl} line {line_no}: {exc}") from exc
    ds = SyntheticDataset(
        features=np.asarray(features, dtype=np.float64),
        clean_labels=np.asarray(clean, dtype=np.int64),
        pseudo_labels=np.asarray(pseudo, dtype=np.int64),
        spec=spec,
        seed=int(header["seed"]),
    )
    if ds.n != int(header["n"]):
        raise ValueError(f"header says {header['n']} rows, file has {ds.n}")
    return ds
