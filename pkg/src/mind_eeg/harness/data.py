"""EEG feature datasets: binary/CSV I/O, train-only z-scoring, synthetic generator."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"MEFX"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")
_SAMPLE_META = struct.Struct("<IIII")


class FeatureFileError(ValueError):
    """Base class for malformed feature files."""


class HeaderError(FeatureFileError):
    pass


class NonFiniteFeatureError(FeatureFileError):
    pass


class LabelRangeError(FeatureFileError):
    pass


@dataclass
class EEGSample:
    features: np.ndarray  # (n, d)
    label: int
    subject_id: int
    session_id: int
    trial_id: int


@dataclass
class EEGDataset:
    """Column-oriented collection of samples with shared geometry."""

    features: np.ndarray  # (N, n, d)
    labels: np.ndarray
    subjects: np.ndarray
    sessions: np.ndarray
    trials: np.ndarray
    classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        for name in ("labels", "subjects", "sessions", "trials"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        N = self.features.shape[0]
        if self.features.ndim != 3:
            raise ValueError(f"features must be (N, n, d), got {self.features.shape}")
        if any(len(getattr(self, k)) != N for k in ("labels", "subjects", "sessions", "trials")):
            raise ValueError("metadata columns must match the number of samples")
        if not np.all(np.isfinite(self.features)):
            bad = int(np.flatnonzero(~np.isfinite(self.features).reshape(N, -1).all(axis=1))[0])
            raise NonFiniteFeatureError(f"sample {bad} has NaN or Inf features")
        if N and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise LabelRangeError(f"labels must lie in [0, {self.classes}), got range "
                                  f"[{self.labels.min()}, {self.labels.max()}]")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> EEGSample:
        return EEGSample(self.features[i], int(self.labels[i]), int(self.subjects[i]), int(self.sessions[i]),
                         int(self.trials[i]))

    @property
    def n(self) -> int:
        return self.features.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    def subset(self, ids) -> "EEGDataset":
        ids = np.asarray(ids, dtype=np.int64)
        return EEGDataset(self.features[ids], self.labels[ids], self.subjects[ids], self.sessions[ids],
                          self.trials[ids], self.classes)

    def with_features(self, features: np.ndarray) -> "EEGDataset":
        return EEGDataset(features, self.labels, self.subjects, self.sessions, self.trials, self.classes)


# ---------------------------------------------------------------- binary format


def write_features(ds: EEGDataset, path: str | Path) -> None:
    """``MEFX`` header, then per sample four u32 ids and ``n*d`` little-endian f64."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, ds.n, ds.d, ds.classes, len(ds)))
        for i in range(len(ds)):
            fh.write(_SAMPLE_META.pack(int(ds.subjects[i]), int(ds.sessions[i]), int(ds.trials[i]),
                                       int(ds.labels[i])))
            fh.write(np.ascontiguousarray(ds.features[i], dtype="<f8").tobytes())


def read_features(path: str | Path) -> EEGDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise HeaderError(f"{path}: file too short for a feature header")
    magic, version, n, d, C, count = _HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise HeaderError(f"{path}: unsupported feature file version {version}")
    if n == 0 or d == 0 or C == 0:
        raise HeaderError(f"{path}: header has zero extent (n={n}, d={d}, C={C})")
    rec = _SAMPLE_META.size + 8 * n * d
    if len(blob) != _HEADER.size + count * rec:
        raise HeaderError(f"{path}: header promises {count} samples but the body holds "
                          f"{(len(blob) - _HEADER.size) / rec:g}")
    meta = np.empty((count, 4), dtype=np.int64)
    feats = np.empty((count, n, d))
    off = _HEADER.size
    for i in range(count):
        meta[i] = _SAMPLE_META.unpack_from(blob, off)
        feats[i] = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off + _SAMPLE_META.size).reshape(n, d)
        off += rec
    return EEGDataset(feats, meta[:, 3], meta[:, 0], meta[:, 1], meta[:, 2], C)


def read_features_csv(path: str | Path, n: int = 62, d: int = 5, classes: int | None = None) -> EEGDataset:
    """CSV with ``subject,session,trial,label`` then ``n*d`` feature columns (row-major)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != ["subject", "session", "trial", "label"]:
            raise HeaderError(f"{path}: CSV header must start with subject,session,trial,label")
        if len(header) != 4 + n * d:
            raise HeaderError(f"{path}: expected {n * d} feature columns, found {len(header) - 4}")
        rows = [r for r in reader if r]
    meta = np.array([[int(v) for v in r[:4]] for r in rows], dtype=np.int64).reshape(-1, 4)
    feats = np.array([[float(v) for v in r[4:]] for r in rows]).reshape(-1, n, d)
    C = classes if classes is not None else int(meta[:, 3].max()) + 1 if len(rows) else 1
    return EEGDataset(feats, meta[:, 3], meta[:, 0], meta[:, 1], meta[:, 2], C)


def write_features_csv(ds: EEGDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "session", "trial", "label"] + [f"f{i}" for i in range(ds.n * ds.d)])
        for i in range(len(ds)):
            writer.writerow([ds.subjects[i], ds.sessions[i], ds.trials[i], ds.labels[i]]
                            + [repr(float(v)) for v in ds.features[i].reshape(-1)])


def load_features(path: str | Path, **csv_kwargs) -> EEGDataset:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_features_csv(path, **csv_kwargs)
    return read_features(path)


# ---------------------------------------------------------------- normalization


@dataclass
class Normalizer:
    """Per-dimension z-scoring; statistics come from training samples only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Normalizer":
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        return cls(mean, np.where(std > 0, std, 1.0))

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def apply(self, ds: EEGDataset) -> EEGDataset:
        return ds.with_features(self.transform(ds.features))


# ---------------------------------------------------------------- synthetic data


def synth_generate(
    seed: int = 0,
    subjects: int = 1,
    classes: int = 4,
    samples_per_class: int = 20,
    trials_per_class: int = 1,
    sessions: int = 1,
    n: int = 62,
    d: int = 5,
    class_sep: float = 0.35,
    subject_shift: float = 0.25,
    subject_gain: float = 0.1,
    trial_jitter: float = 0.15,
    rank: int = 8,
) -> EEGDataset:
    """Class-conditional Gaussian features with subject and trial effects.

    Each class owns a channel covariance template (low rank plus diagonal,
    shared by all bands) and an ``n x d`` mean offset.  Each subject applies a
    per-channel, per-band gain and an additive offset; each trial adds a small
    jitter to its mean.  Trials interleave labels (trial ``t`` has label
    ``t % classes``) and ``samples_per_class`` counts samples per class per
    subject per session.
    """
    if min(subjects, classes, samples_per_class, trials_per_class, sessions, n, d) <= 0:
        raise ValueError("synth_generate: all counts must be positive")
    if samples_per_class < trials_per_class:
        raise ValueError("synth_generate: need at least one sample per trial")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_sep, size=(classes, n, d))
    chols = []
    for _ in range(classes):
        G = rng.normal(size=(n, rank))
        cov = G @ G.T / rank + 0.5 * np.eye(n)
        cov /= np.sqrt(np.outer(np.diag(cov), np.diag(cov)))  # unit variances
        chols.append(np.linalg.cholesky(cov))

    per_trial = [len(c) for c in np.array_split(np.arange(samples_per_class), trials_per_class)]
    feats, labels, subs, sess, trials = [], [], [], [], []
    for s in range(subjects):
        gain = 1.0 + rng.normal(0.0, subject_gain, size=(n, d))
        offset = rng.normal(0.0, subject_shift, size=(n, d))
        for ses in range(sessions):
            for t in range(classes * trials_per_class):
                c = t % classes
                count = per_trial[t // classes]
                mu = means[c] + rng.normal(0.0, trial_jitter, size=(n, d))
                z = rng.normal(size=(count, n, d))
                x = mu + np.einsum("ij,sjb->sib", chols[c], z)
                feats.append(gain * x + offset)
                labels += [c] * count
                subs += [s] * count
                sess += [ses] * count
                trials += [t] * count
    return EEGDataset(np.concatenate(feats), labels, subs, sess, trials, classes)


def nearest_centroid_accuracy(train: EEGDataset, test: EEGDataset) -> float:
    """Accuracy of assigning each test sample to the closest training class mean."""
    X = train.features.reshape(len(train), -1)
    cents = np.stack([X[train.labels == c].mean(axis=0) for c in range(train.classes)])
    Y = test.features.reshape(len(test), -1)
    dist = ((Y[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float(np.mean(dist.argmin(axis=1) == test.labels))
