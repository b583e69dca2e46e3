"""Datasets of K x L observations: synthetic generation, file I/O, reports.

Values are held as float64 in memory and stored as float32 on disk; the
generator rounds through float32 so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

ANOMALY_TYPES = ("spike", "dropout", "frequency-shift", "phase-desync", "amplitude-drift")
SPLITS = ("train", "valid", "test")

MAGIC = b"TSDC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, flags, N, K, L
_SPLIT_FLAG = {"train": 0, "valid": 1, "test": 2, None: 3}


def type_id(name):
    try:
        return ANOMALY_TYPES.index(name) + 1
    except ValueError:
        raise ConfigError(f"unknown anomaly type {name!r}; choose from {ANOMALY_TYPES}") from None


def type_name(label):
    return "normal" if label == 0 else ANOMALY_TYPES[label - 1]


@dataclass
class Dataset:
    values: np.ndarray  # (N, K, L) float64
    labels: np.ndarray  # (N,) uint8, 0 normal, 1..5 anomaly type
    split: str | None = None
    sampling_rate: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.values.ndim != 3:
            raise ConfigError(f"dataset values must be (N, K, L), got {self.values.shape}")
        if len(self.labels) != len(self.values):
            raise ConfigError("one label per observation is required")

    @property
    def N(self):
        return self.values.shape[0]

    @property
    def K(self):
        return self.values.shape[1]

    @property
    def L(self):
        return self.values.shape[2]

    @property
    def ids(self):
        tag = self.split or "obs"
        return [f"{tag}-{i:06d}" for i in range(self.N)]

    @property
    def is_abnormal(self):
        return (self.labels > 0).astype(np.int64)

    def __len__(self):
        return self.N


# -- synthetic generation --------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    n_train: int = 512
    n_valid: int = 128
    n_test: int = 256
    K: int = 4
    L: int = 128
    rate_train: float = 0.2
    rate_valid: float = 0.2
    rate_test: float = 0.4
    types: tuple = ANOMALY_TYPES  # anomaly types in train/valid
    test_types: tuple = ANOMALY_TYPES
    base_seed: int = 0
    noise: float = 0.05

    def __post_init__(self):
        for split in SPLITS:
            rate = getattr(self, f"rate_{split}")
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"contamination rate for {split} must lie in [0, 1), got {rate}")
        object.__setattr__(self, "types", tuple(self.types))
        object.__setattr__(self, "test_types", tuple(self.test_types))
        for name in self.types + self.test_types:
            type_id(name)
        if (self.rate_train > 0 or self.rate_valid > 0) and not self.types:
            raise ConfigError("anomaly type set must be nonempty when the rate is positive")
        if self.rate_test > 0 and not self.test_types:
            raise ConfigError("test anomaly type set must be nonempty when the rate is positive")
        if self.K < 1 or self.L < 8:
            raise ConfigError("need K >= 1 and L >= 8")

    def split_params(self, split):
        n = getattr(self, f"n_{split}")
        rate = getattr(self, f"rate_{split}")
        types = self.test_types if split == "test" else self.types
        return n, rate, types


PRESETS = {
    "desk": SyntheticConfig(),
    # seconds-scale runs for smoke tests
    "smoke": SyntheticConfig(48, 24, 32, K=4, L=32, rate_train=0.2, rate_valid=0.25,
                             rate_test=0.4),
    # shapes and abnormal fractions of the three physiological corpora
    "icbeb": SyntheticConfig(910, 82, 222, K=12, L=6000, rate_train=0.200,
                             rate_valid=0.207, rate_test=0.599),
    "dodh": SyntheticConfig(2515, 320, 310, K=16, L=7500, rate_train=0.198,
                            rate_valid=0.218, rate_test=0.516),
    "tusz": SyntheticConfig(5275, 1055, 1581, K=19, L=12000, rate_train=0.170,
                            rate_valid=0.200, rate_test=0.400),
}


def abnormal_count(rate, n):
    """round(rate * n) with halves rounded up; at least 1 when rate > 0."""
    count = int(math.floor(rate * n + 0.5))
    if rate > 0 and count == 0 and n > 0:
        warnings.warn(f"contamination rate {rate} on {n} observations rounds to 0; using 1")
        count = 1
    return count


class _Mixer:
    """Fixed cross-variable structure shared by every observation."""

    N_SOURCES = 3

    def __init__(self, K, base_seed):
        rng = np.random.default_rng([base_seed, 0xBA5E])
        J = self.N_SOURCES
        self.freqs = np.array([2.0, 5.0, 9.0])[:J]  # cycles per window
        self.weights = rng.uniform(0.4, 1.0, size=(K, J)) * rng.choice([-1.0, 1.0], size=(K, J))
        self.weights /= np.sqrt((self.weights**2).sum(axis=1, keepdims=True) / 2.0)
        self.lags = rng.uniform(0.0, 0.5, size=(K, J))  # per-variable phase lag (radians)

    def signal(self, L, rng, freq_scale=None, phase=None, lag_shift=None):
        """K x L clean signal; optional overrides drive some anomaly types."""
        J = self.N_SOURCES
        if phase is None:
            phase = rng.uniform(0.0, 2.0 * np.pi, size=J)
        if freq_scale is None:
            freq_scale = 1.0 + rng.uniform(-0.05, 0.05, size=J)
        t = np.arange(L) / L
        lags = self.lags if lag_shift is None else self.lags + lag_shift
        arg = 2 * np.pi * (self.freqs * freq_scale)[None, :, None] * t + phase[None, :, None] + lags[..., None]
        return (self.weights[..., None] * np.sin(arg)).sum(axis=1), phase, freq_scale


def _window(L, rng):
    width = int(rng.integers(int(0.1 * L), int(0.4 * L) + 1))
    start = int(rng.integers(0, L - width + 1))
    return slice(start, start + width)


def _inject(x, kind, mixer, phase, fscale, rng):
    """Overlay one anomaly of ``kind`` on a contiguous window of ``x``."""
    K, L = x.shape
    w = _window(L, rng)
    n_vars = int(rng.integers(1, K + 1))
    vars_ = np.sort(rng.choice(K, size=n_vars, replace=False))
    y = x.copy()
    if kind == "spike":
        width = w.stop - w.start
        for k in vars_:
            n = max(1, width // 8)
            pos = w.start + rng.choice(width, size=n, replace=False)
            y[k, pos] += rng.choice([-1.0, 1.0], size=n) * rng.uniform(2.5, 4.0, size=n)
    elif kind == "dropout":
        y[vars_, w] = rng.normal(0.0, 0.01, size=(n_vars, w.stop - w.start))
    elif kind == "frequency-shift":
        alt, _, _ = mixer.signal(L, rng, freq_scale=fscale * rng.uniform(2.0, 3.0), phase=phase)
        y[vars_, w] = alt[vars_, w] + (y[vars_, w] - x[vars_, w])
    elif kind == "phase-desync":
        shift = np.zeros((K, mixer.N_SOURCES))
        shift[vars_] = rng.uniform(np.pi / 2, 3 * np.pi / 2) * rng.choice([-1.0, 1.0])
        alt, _, _ = mixer.signal(L, rng, freq_scale=fscale, phase=phase, lag_shift=shift)
        y[vars_, w] = alt[vars_, w] + (y[vars_, w] - x[vars_, w])
    elif kind == "amplitude-drift":
        ramp = np.linspace(1.0, rng.uniform(2.0, 3.0), w.stop - w.start)
        y[vars_, w] = y[vars_, w] * ramp
    else:
        raise ConfigError(f"unknown anomaly type {kind!r}")
    return y


def generate_split(cfg: SyntheticConfig, split, seed):
    n, rate, types = cfg.split_params(split)
    mixer = _Mixer(cfg.K, cfg.base_seed)
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    n_abn = abnormal_count(rate, n)
    labels = np.zeros(n, dtype=np.uint8)
    if n_abn:
        idx = rng.choice(n, size=n_abn, replace=False)
        kinds = rng.choice(len(types), size=n_abn)
        labels[idx] = [type_id(types[j]) for j in kinds]
    values = np.empty((n, cfg.K, cfg.L))
    for i in range(n):
        clean, phase, fscale = mixer.signal(cfg.L, rng)
        x = clean + cfg.noise * rng.standard_normal(clean.shape)
        if labels[i]:
            x = _inject(x, ANOMALY_TYPES[labels[i] - 1], mixer, phase, fscale, rng)
        values[i] = x
    # representable in the float32 file format
    values = values.astype(np.float32).astype(np.float64)
    return Dataset(values, labels, split=split)


def generate_synthetic(cfg: SyntheticConfig, seed):
    """Train/valid/test datasets; each split draws from its own stream."""
    return {split: generate_split(cfg, split, seed) for split in SPLITS}


def with_overrides(cfg: SyntheticConfig, **kw):
    return replace(cfg, **kw)


# -- binary container -------------------------------------------------------------------


def save_dataset(ds: Dataset, path):
    path = Path(path)
    flags = _SPLIT_FLAG.get(ds.split, 3)
    header = _HEADER.pack(MAGIC, VERSION, flags, ds.N, ds.K, ds.L)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.values.astype("<f4").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_dataset(path):
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    magic, version, flags, N, K, L = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    off = _HEADER.size
    n_vals = N * K * L
    need = off + 4 * n_vals + N
    if len(blob) < need:
        raise FormatError(f"{path}: truncated body, expected {need} bytes, got {len(blob)}",
                          offset=len(blob))
    if len(blob) > need:
        raise FormatError(f"{path}: {len(blob) - need} trailing bytes", offset=need)
    values = np.frombuffer(blob, dtype="<f4", count=n_vals, offset=off).reshape(N, K, L)
    labels = np.frombuffer(blob, dtype=np.uint8, count=N, offset=off + 4 * n_vals)
    split = {v: k for k, v in _SPLIT_FLAG.items()}.get(flags & 3)
    return Dataset(values.astype(np.float64), labels.copy(), split=split)


# -- CSV ---------------------------------------------------------------------------------


def save_csv(ds: Dataset, path, label_path=None):
    """One row per (observation, variable); labels go to a sidecar file."""
    path = Path(path)
    label_path = Path(label_path) if label_path else path.with_suffix(".labels.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["observation", "variable"] + [f"t{l}" for l in range(ds.L)])
        for i in range(ds.N):
            for k in range(ds.K):
                w.writerow([i, k] + [repr(float(v)) for v in ds.values[i, k]])
    with open(label_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["observation", "label", "type"])
        for i, lab in enumerate(ds.labels):
            w.writerow([i, int(lab), type_name(int(lab))])
    return path, label_path


def load_csv(path, label_path=None, split=None):
    path = Path(path)
    label_path = Path(label_path) if label_path else path.with_suffix(".labels.csv")
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        L = len(header) - 2
        for row in reader:
            rows[(int(row[0]), int(row[1]))] = [float(v) for v in row[2:]]
    N = 1 + max(i for i, _ in rows)
    K = 1 + max(k for _, k in rows)
    if len(rows) != N * K:
        raise FormatError(f"{path}: expected {N * K} (observation, variable) rows, got {len(rows)}")
    values = np.empty((N, K, L))
    for (i, k), vals in rows.items():
        values[i, k] = vals
    labels = np.zeros(N, dtype=np.uint8)
    with open(label_path, newline="") as fh:
        for row in csv.DictReader(fh):
            labels[int(row["observation"])] = int(row["label"])
    return Dataset(values, labels, split=split)


def export_observation_csv(values, path):
    """Write a single K x L observation (or any traces) as one row per variable."""
    values = np.atleast_2d(np.asarray(values))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable"] + [f"t{l}" for l in range(values.shape[1])])
        for k, row in enumerate(values):
            w.writerow([k] + [repr(float(v)) for v in row])


# -- reports -----------------------------------------------------------------------------


def contamination_report(ds: Dataset):
    counts = {name: int(np.sum(ds.labels == type_id(name))) for name in ANOMALY_TYPES}
    abnormal = int(np.sum(ds.labels > 0))
    return {
        "n": ds.N,
        "abnormal": abnormal,
        "rate": abnormal / ds.N if ds.N else 0.0,
        "per_type": counts,
    }
