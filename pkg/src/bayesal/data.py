"""Datasets: synthetic heteroscedastic regression tasks, file I/O and target normalization.

A sample is a feature vector of length ``D`` and a flattened target of length
``K * 3`` (K joints, three coordinates each).  Synthetic generation keeps the
noiseless targets and the true noise levels in a separate :class:`GroundTruth`
object so that nothing downstream of the learner can see them by accident.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NOISE_PROFILES = ("constant", "ramp")
FEATURE_DISTS = ("uniform", "clusters")


class DatasetError(ValueError):
    """Raised for invalid dataset specs or malformed dataset files."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, D)
    targets: np.ndarray  # (n, K*3)
    K: int

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        targets = np.ascontiguousarray(self.targets, dtype=np.float64)
        if features.ndim != 2 or targets.ndim != 2:
            raise DatasetError("features and targets must be 2-D arrays")
        if features.shape[0] != targets.shape[0]:
            raise DatasetError(
                f"sample count mismatch: {features.shape[0]} features vs {targets.shape[0]} targets"
            )
        if self.K < 1 or targets.shape[1] != 3 * self.K:
            raise DatasetError(f"target width {targets.shape[1]} != 3*K with K={self.K}")
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(targets))):
            raise DatasetError("dataset contains non-finite values")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.targets[idx], self.K)


@dataclass(frozen=True)
class GroundTruth:
    """Hidden oracle quantities for a synthetic dataset (never given to the learner)."""

    clean_targets: np.ndarray  # (n, K*3)
    noise_sd: np.ndarray  # (n, K*3)


@dataclass(frozen=True)
class SyntheticData:
    dataset: Dataset
    truth: GroundTruth


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 4000
    D: int = 16
    K: int = 21
    noise_profile: str = "constant"
    noise_sd: float = 0.05
    target_fn_seed: int = 0
    hidden: int = 32
    feature_dist: str = "uniform"
    clusters: int = 8

    def validate(self):
        for name in ("n", "D", "K", "hidden", "clusters"):
            if getattr(self, name) < 1:
                raise DatasetError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_sd < 0 or not np.isfinite(self.noise_sd):
            raise DatasetError(f"noise_sd must be a finite value >= 0, got {self.noise_sd}")
        if self.noise_profile not in NOISE_PROFILES:
            raise DatasetError(f"noise_profile must be one of {NOISE_PROFILES}, got {self.noise_profile!r}")
        if self.feature_dist not in FEATURE_DISTS:
            raise DatasetError(f"feature_dist must be one of {FEATURE_DISTS}, got {self.feature_dist!r}")


@dataclass(frozen=True)
class SmoothFunction:
    """Fixed random two-layer tanh network mapping features to targets."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def sample(cls, D: int, out: int, hidden: int, seed: int) -> "SmoothFunction":
        rng = np.random.default_rng(seed)
        W1 = rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, hidden)) * 1.5
        b1 = rng.normal(0.0, 0.5, size=hidden)
        W2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, out))
        b2 = rng.normal(0.0, 0.1, size=out)
        return cls(W1, b1, W2, b2)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.tanh(X @ self.W1 + self.b1) @ self.W2 + self.b2


def noise_levels(spec: SyntheticSpec, X: np.ndarray) -> np.ndarray:
    """Per-sample, per-coordinate noise standard deviation for the given features."""
    n = X.shape[0]
    if spec.noise_profile == "constant":
        sd = np.full(n, spec.noise_sd)
    else:
        # ramp along the first feature: 0 at x0=-1, 2*noise_sd at x0=+1
        sd = spec.noise_sd * (np.clip(X[:, 0], -1.0, 1.0) + 1.0)
    return np.repeat(sd[:, None], 3 * spec.K, axis=1)


def _sample_features(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.feature_dist == "uniform":
        return rng.uniform(-1.0, 1.0, size=(spec.n, spec.D))
    # imbalanced mixture of tight clusters; centers are part of the task, not the draw
    crng = np.random.default_rng([spec.target_fn_seed, 7])
    centers = crng.uniform(-0.8, 0.8, size=(spec.clusters, spec.D))
    weights = 0.5 ** np.arange(spec.clusters)
    weights /= weights.sum()
    labels = rng.choice(spec.clusters, size=spec.n, p=weights)
    X = centers[labels] + rng.normal(0.0, 0.15, size=(spec.n, spec.D))
    return np.clip(X, -1.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticData:
    """Draw ``spec.n`` noisy samples of a smooth random function.

    The function itself depends only on ``spec.target_fn_seed``; ``seed`` drives
    the feature and noise draws, so train and test sets of one task share the
    same function when generated with different seeds.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    X = _sample_features(spec, rng)
    fn = SmoothFunction.sample(spec.D, 3 * spec.K, spec.hidden, spec.target_fn_seed)
    clean = fn(X)
    sd = noise_levels(spec, X)
    eps = rng.standard_normal(clean.shape)
    Y = clean + sd * eps
    return SyntheticData(Dataset(X, Y, spec.K), GroundTruth(clean, sd))


# -- file format ------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as ``D=<int>,K=<int>`` header plus one comma-separated row per sample."""
    rows = np.hstack([ds.features, ds.targets])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"D={ds.D},K={ds.K}\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def _parse_header(line: str, keys, path, lineno=1) -> dict:
    out = {}
    parts = [p.strip() for p in line.strip().split(",")]
    for part in parts:
        name, sep, value = part.partition("=")
        if not sep or name not in keys:
            raise DatasetError(f"{path}:{lineno}: malformed header {line.strip()!r}")
        try:
            out[name] = int(value)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: header value {part!r} is not an integer") from None
    if set(out) != set(keys):
        raise DatasetError(f"{path}:{lineno}: header must define {', '.join(keys)}")
    return out


def read_numeric_rows(path, width: int, start_line: int = 2) -> np.ndarray:
    """Parse comma-separated float rows of a fixed width, reporting 1-based line numbers."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno < start_line or not line.strip():
                continue
            cells = line.strip().split(",")
            if len(cells) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} values, found {len(cells)}")
            try:
                row = [float(c) for c in cells]
            except ValueError:
                bad = next(c for c in cells if not _is_float(c))
                raise DatasetError(f"{path}:{lineno}: non-numeric value {bad.strip()!r}") from None
            if not all(np.isfinite(row)):
                raise DatasetError(f"{path}:{lineno}: non-finite value")
            rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(len(rows), width)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
    hdr = _parse_header(header, ("D", "K"), path)
    D, K = hdr["D"], hdr["K"]
    if D < 1 or K < 1:
        raise DatasetError(f"{path}:1: D and K must be positive")
    rows = read_numeric_rows(path, D + 3 * K)
    return Dataset(rows[:, :D], rows[:, D:], K)


# -- normalization ----------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    """Per-coordinate min and max of the raw targets."""

    lo: np.ndarray
    hi: np.ndarray
    span: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "span", self.hi - self.lo)

    def normalize(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=np.float64)
        flat = self.span == 0
        safe = np.where(flat, 1.0, self.span)
        out = (Y - self.lo) / safe
        return np.where(flat, 0.5, out)

    def denormalize(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.float64)
        return np.where(self.span == 0, self.lo, Z * self.span + self.lo)

    def scale_variance(self, var: np.ndarray) -> np.ndarray:
        """Map a variance in normalized units back to raw units."""
        return np.asarray(var) * self.span**2

    @classmethod
    def identity(cls, width: int) -> "NormStats":
        return cls(np.zeros(width), np.ones(width))


def fit_norm_stats(targets: np.ndarray) -> NormStats:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape[0] == 0:
        raise DatasetError("cannot normalize an empty dataset")
    return NormStats(targets.min(axis=0), targets.max(axis=0))


def normalize_targets(ds: Dataset) -> tuple[Dataset, NormStats]:
    """Min-max scale every target coordinate into [0, 1].

    Coordinates with zero range map to 0.5.
    """
    stats = fit_norm_stats(ds.targets)
    return Dataset(ds.features, stats.normalize(ds.targets), ds.K), stats
