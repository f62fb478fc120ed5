"""Federation construction and per-series preprocessing.

Every series is handled univariately: instance-normalized with its own
statistics, then cut into non-overlapping patches. Synthetic federations mix
several sub-domain generators per client and add a client-level covariate
shift; CSV ingestion produces sliding windows from one numeric column.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORM_EPS = 1e-5


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


@dataclass(frozen=True)
class TimeSeriesWindow:
    context: np.ndarray
    target: np.ndarray
    subdomain_label: int
    norm_stats: NormStats
    window_id: int = 0
    period: int | None = None

    @property
    def T(self) -> int:
        return len(self.context)

    @property
    def F(self) -> int:
        return len(self.target)


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    windows: tuple[TimeSeriesWindow, ...]
    subdomain_count: int = 1

    def __post_init__(self):
        if self.subdomain_count < 1:
            raise ValueError("subdomain_count must be >= 1")
        for w in self.windows:
            if not 0 <= w.subdomain_label < self.subdomain_count:
                raise ValueError(
                    f"client {self.client_id}: label {w.subdomain_label} outside "
                    f"[0, {self.subdomain_count})"
                )

    @property
    def n_k(self) -> int:
        return len(self.windows)

    def __len__(self):
        return len(self.windows)


@dataclass(frozen=True)
class FederationDataset:
    clients: tuple[ClientDataset, ...]
    held_out: dict[int, tuple[TimeSeriesWindow, ...]] = field(default_factory=dict)
    unseen: tuple[TimeSeriesWindow, ...] = ()
    seed: int | None = None

    def __post_init__(self):
        if len(self.clients) < 2:
            raise ValueError("a federation needs at least 2 clients")

    @property
    def K(self) -> int:
        return len(self.clients)

    def train_ids(self) -> set[int]:
        return {w.window_id for c in self.clients for w in c.windows}

    def eval_ids(self) -> set[int]:
        ids = {w.window_id for ws in self.held_out.values() for w in ws}
        return ids | {w.window_id for w in self.unseen}


# --------------------------------------------------------------------------
# preprocessing


def instance_normalize(x, eps: float = NORM_EPS) -> tuple[np.ndarray, NormStats]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("instance_normalize needs a 1-d series of length >= 2")
    mean = float(x.mean())
    std = max(float(x.std()), eps)
    return (x - mean) / std, NormStats(mean, std)


def instance_denormalize(y, stats: NormStats) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * stats.std + stats.mean


def patchify(x, P: int) -> np.ndarray:
    """Split ``x`` into ``len(x) // P`` rows of ``P`` values; the tail is dropped."""
    x = np.asarray(x, dtype=np.float64)
    if P < 1:
        raise ValueError("patch length must be >= 1")
    if len(x) < P:
        raise ValueError(f"series length {len(x)} shorter than patch length {P}")
    n = len(x) // P
    return x[: n * P].reshape(n, P)


def make_window(series, T: int, F: int, label: int, window_id: int, period=None):
    series = np.asarray(series, dtype=np.float64)
    context = series[:T].copy()
    target = series[T : T + F].copy()
    _, stats = instance_normalize(context)
    return TimeSeriesWindow(context, target, int(label), stats, int(window_id), period)


# --------------------------------------------------------------------------
# synthetic federation


@dataclass
class FederationSpec:
    n_clients: int = 4
    subdomains_per_client: int = 2
    windows_per_client: int = 64
    heldout_per_client: int = 16
    unseen_windows: int = 32
    T: int = 128
    F: int = 32
    subdomain_frequencies: tuple[float, ...] = (0.02, 0.10)
    client_level_scale: float = 2.0
    noise_scale: float = 0.3
    regime_shift_prob: float = 0.3


def _client_profile(rng: np.random.Generator, spec: FederationSpec) -> dict:
    return {
        "level": rng.normal(0.0, spec.client_level_scale),
        "amplitude": rng.uniform(0.5, 2.0),
        "freq_scale": rng.uniform(0.8, 1.25),
        "trend": rng.normal(0.0, 0.01),
        "ar": rng.uniform(0.3, 0.9),
        "noise": spec.noise_scale * rng.uniform(0.5, 1.5),
        "harmonic": rng.uniform(0.0, 0.5),
    }


def _subdomain_series(rng, profile, freq, sub, length, spec):
    t = np.arange(length, dtype=np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    amp = profile["amplitude"] * rng.uniform(0.8, 1.2)
    x = amp * np.sin(2 * np.pi * freq * t + phase)
    x += profile["harmonic"] * amp * np.sin(4 * np.pi * freq * t + 2 * phase)
    # odd sub-domains trend, even ones carry AR(1) noise only
    slope = profile["trend"] * (1.0 + sub)
    x += slope * t
    e = rng.normal(0.0, profile["noise"], size=length)
    ar = np.empty(length)
    ar[0] = e[0]
    for i in range(1, length):
        ar[i] = profile["ar"] * ar[i - 1] + e[i]
    x += ar
    if rng.random() < spec.regime_shift_prob:
        at = rng.integers(length // 4, 3 * length // 4)
        x[at:] += rng.normal(0.0, amp)
    return x + profile["level"]


def generate_synthetic_federation(spec: FederationSpec, seed: int) -> FederationDataset:
    """Deterministic multi-client federation with labelled sub-domains.

    Sub-domain ``s`` of every client oscillates at
    ``subdomain_frequencies[s % len] * freq_scale_k``; clients differ by level,
    amplitude, trend, AR coefficient and noise. One extra profile, never used
    for training, produces the unseen-domain split.
    """
    if spec.n_clients < 2:
        raise ValueError("n_clients must be >= 2")
    if spec.windows_per_client < 1:
        raise ValueError("every client needs at least one training window")
    if spec.subdomains_per_client < 1:
        raise ValueError("subdomains_per_client must be >= 1")
    length = spec.T + spec.F
    children = np.random.SeedSequence(seed).spawn(spec.n_clients + 1)
    next_id = 0
    clients, held = [], {}
    for k in range(spec.n_clients + 1):
        rng = np.random.default_rng(children[k])
        profile = _client_profile(rng, spec)
        n_total = (
            spec.unseen_windows
            if k == spec.n_clients
            else spec.windows_per_client + spec.heldout_per_client
        )
        windows = []
        for i in range(n_total):
            sub = i % spec.subdomains_per_client
            freq = spec.subdomain_frequencies[sub % len(spec.subdomain_frequencies)]
            freq = freq * profile["freq_scale"]
            series = _subdomain_series(rng, profile, freq, sub, length, spec)
            period = max(1, int(round(1.0 / freq)))
            windows.append(make_window(series, spec.T, spec.F, sub, next_id, period))
            next_id += 1
        if k == spec.n_clients:
            unseen = tuple(
                TimeSeriesWindow(w.context, w.target, 0, w.norm_stats, w.window_id, w.period)
                for w in windows
            )
            continue
        train = tuple(windows[: spec.windows_per_client])
        clients.append(ClientDataset(k, train, spec.subdomains_per_client))
        held[k] = tuple(windows[spec.windows_per_client :])
    return FederationDataset(tuple(clients), held, unseen, seed)


# --------------------------------------------------------------------------
# CSV ingestion


class DataFormatError(ValueError):
    pass


def _read_column(path, column: str) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if column not in header:
            raise DataFormatError(f"{path}: column '{column}' not found; have {header}")
        idx = header.index(column)
        values = []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                v = float(row[idx])
            except (ValueError, IndexError):
                cell = row[idx] if idx < len(row) else ""
                raise DataFormatError(
                    f"{path}: non-numeric value {cell!r} at row {row_no}, column '{column}'"
                ) from None
            if not math.isfinite(v):
                raise DataFormatError(
                    f"{path}: non-finite value {row[idx]!r} at row {row_no}, column '{column}'"
                )
            values.append(v)
    return np.asarray(values, dtype=np.float64)


def load_csv_dataset(
    path,
    column: str,
    T: int,
    F: int,
    stride: int,
    subdomain_label: int = 0,
    client_id: int = 0,
    subdomain_count: int | None = None,
) -> ClientDataset:
    """Sliding windows of ``T + F`` rows, ``stride`` apart, over one column."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    values = _read_column(path, column)
    length = T + F
    if len(values) < length:
        raise DataFormatError(
            f"{path}: column '{column}' has {len(values)} rows, need at least T+F={length}"
        )
    n = (len(values) - length) // stride + 1
    windows = tuple(
        make_window(values[i * stride : i * stride + length], T, F, subdomain_label, i)
        for i in range(n)
    )
    count = subdomain_count if subdomain_count is not None else subdomain_label + 1
    return ClientDataset(client_id, windows, count)


def chronological_split(ds: ClientDataset, fractions=(0.7, 0.1, 0.2)):
    """Split windows in time order into train/val/test ClientDatasets."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three nonnegative numbers summing to 1")
    n = len(ds.windows)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    parts = ds.windows[:a], ds.windows[a:b], ds.windows[b:]
    return tuple(ClientDataset(ds.client_id, p, ds.subdomain_count) for p in parts)


def split_channels(X) -> list[np.ndarray]:
    """Columns of a (T, C) array as independent univariate series."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return [X]
    return [X[:, c].copy() for c in range(X.shape[1])]


def federation_manifest(fed: FederationDataset) -> dict:
    return {
        "seed": fed.seed,
        "clients": [
            {
                "client_id": c.client_id,
                "n_k": c.n_k,
                "subdomain_count": c.subdomain_count,
                "train_window_ids": [w.window_id for w in c.windows],
                "heldout_window_ids": [w.window_id for w in fed.held_out.get(c.client_id, ())],
            }
            for c in fed.clients
        ],
        "unseen_window_ids": [w.window_id for w in fed.unseen],
    }


def write_manifest(fed: FederationDataset, path) -> None:
    Path(path).write_text(json.dumps(federation_manifest(fed), indent=2))


def save_federation(fed: FederationDataset, path) -> None:
    """Store every window as arrays in a single ``.npz`` next to a manifest."""
    arrays = {}
    for c in fed.clients:
        for split, ws in (("train", c.windows), ("heldout", fed.held_out.get(c.client_id, ()))):
            for j, w in enumerate(ws):
                arrays[f"c{c.client_id}_{split}_{j}"] = np.concatenate([w.context, w.target])
    for j, w in enumerate(fed.unseen):
        arrays[f"unseen_{j}"] = np.concatenate([w.context, w.target])
    np.savez(path, **arrays)
