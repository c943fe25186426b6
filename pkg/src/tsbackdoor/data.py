"""Series loading, synthesis, splitting and sliding windows."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolation, InsufficientDataError, InsufficientVarianceError, ParseError

TRAIN_FRAC = 0.6
VAL_FRAC = 0.8


@dataclass(frozen=True)
class WindowSpec:
    h: int = 12
    f: int = 12

    def __post_init__(self):
        if self.h <= 0 or self.f <= 0:
            raise ContractViolation(f"window lengths must be positive, got h={self.h}, f={self.f}")


@dataclass(frozen=True)
class WindowView:
    t: int
    input: np.ndarray
    target: np.ndarray


@dataclass(frozen=True, eq=False)
class SeriesDataset:
    """T x N values; ``mean``/``std`` always come from the training split."""

    values: np.ndarray
    names: tuple
    mean: np.ndarray
    std: np.ndarray
    train_end: int
    val_end: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T, N = self.values.shape
        if not (0 < self.train_end < self.val_end < T):
            raise ContractViolation(f"bad split boundaries {self.train_end}, {self.val_end} for T={T}")
        if len(self.names) != N:
            raise ContractViolation("names length must equal the number of variables")
        if np.any(self.std <= 0):
            raise InsufficientVarianceError(f"zero training std for variables {np.flatnonzero(self.std <= 0).tolist()}")
        self.values.setflags(write=False)

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    def split_bounds(self, split):
        return {"train": (0, self.train_end),
                "val": (self.train_end, self.val_end),
                "test": (self.val_end, self.T)}[split]

    def origins(self, split, spec: WindowSpec):
        """All window timestamps whose input and horizon lie inside ``split``."""
        lo, hi = self.split_bounds(split)
        return np.arange(lo + spec.h, hi - spec.f + 1)

    def with_values(self, values):
        return replace(self, values=np.array(values, dtype=np.float64))


def _check_std(std, names):
    bad = [names[i] for i in np.flatnonzero(~(std > 1e-12))]
    if bad:
        raise InsufficientVarianceError(f"training split has zero variance for {bad}")


def from_array(values, names=None, spec: WindowSpec | None = None, meta=None) -> SeriesDataset:
    values = np.array(values, dtype=np.float64)
    if values.ndim != 2:
        raise ContractViolation("values must be a T x N matrix")
    T, N = values.shape
    names = tuple(names) if names is not None else tuple(f"v{i}" for i in range(N))
    train_end, val_end = int(np.floor(TRAIN_FRAC * T)), int(np.floor(VAL_FRAC * T))
    if spec is not None:
        need = spec.h + spec.f
        sizes = {"train": train_end, "val": val_end - train_end, "test": T - val_end}
        short = {k: v for k, v in sizes.items() if v < need}
        if short:
            raise InsufficientDataError(f"splits {short} shorter than h+f={need}")
    if train_end <= 0 or val_end <= train_end or val_end >= T:
        raise InsufficientDataError(f"T={T} too small for a 6:2:2 split")
    mean = values[:train_end].mean(axis=0)
    std = values[:train_end].std(axis=0)
    _check_std(std, names)
    return SeriesDataset(values, names, mean, std, train_end, val_end, dict(meta or {}))


def load_csv(path, spec: WindowSpec | None = None) -> SeriesDataset:
    """Read a header + numeric-rows CSV. Row numbers in errors count data rows from 1."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        names = [h.strip() for h in header]
        rows = []
        for r, raw in enumerate(reader, start=1):
            if not raw:
                continue
            if len(raw) != len(names):
                raise ParseError(f"{path}: row {r} has {len(raw)} cells, expected {len(names)}", row=r)
            vals = []
            for c, cell in enumerate(raw):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: non-numeric cell {cell!r} at row {r}, column {names[c]!r}",
                                     row=r, column=names[c]) from None
                if not np.isfinite(v):
                    raise ParseError(f"{path}: non-finite cell at row {r}, column {names[c]!r}",
                                     row=r, column=names[c])
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise InsufficientDataError(f"{path}: no data rows")
    return from_array(np.array(rows), names, spec, meta={"source": str(path)})


def save_csv(values, names, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in np.asarray(values):
            w.writerow([repr(float(x)) for x in row])


def synth_generate(seed=0, T=2000, N=8, level=10.0, amplitude=2.0, period=24.0, noise_std=0.3,
                   coupling=1.0, spec: WindowSpec | None = None) -> SeriesDataset:
    """Sinusoids with per-variable phase, a shared AR(1) component and white noise."""
    spec = spec or WindowSpec()
    if period <= 0:
        raise ContractViolation("period must be positive")
    if T < 10 * (spec.h + spec.f):
        raise ContractViolation(f"T={T} must be at least 10*(h+f)={10 * (spec.h + spec.f)}")
    if N < 2:
        raise ContractViolation("need at least two variables")
    rng = np.random.default_rng(seed)
    t = np.arange(T)[:, None]
    phase = rng.uniform(0.0, 2.0 * np.pi, size=N)
    # unit-variance AR(1), phi=0.95
    phi = 0.95
    eps = rng.normal(size=T) * np.sqrt(1.0 - phi ** 2)
    shared = np.empty(T)
    shared[0] = rng.normal()
    for i in range(1, T):
        shared[i] = phi * shared[i - 1] + eps[i]
    noise = rng.normal(size=(T, N)) * noise_std
    values = level + amplitude * np.sin(2.0 * np.pi * t / period + phase) + coupling * shared[:, None] + noise
    meta = dict(seed=seed, T=T, N=N, level=level, amplitude=amplitude, period=period,
                noise_std=noise_std, coupling=coupling)
    return from_array(values, spec=spec, meta={"synth": meta})


def windows(dataset: SeriesDataset, spec: WindowSpec, t_range=None) -> list[WindowView]:
    """One view per timestamp in ``t_range`` (default: every valid timestamp)."""
    lo, hi = spec.h, dataset.T - spec.f
    ts = range(lo, hi + 1) if t_range is None else t_range
    out = []
    for t in ts:
        if t < lo or t > hi:
            raise ContractViolation(f"window timestamp {t} outside [{lo}, {hi}]")
        out.append(WindowView(int(t), dataset.values[t - spec.h:t], dataset.values[t:t + spec.f]))
    return out


def window_arrays(values, spec: WindowSpec, origins):
    """Stacked inputs (B x h x N) and targets (B x f x N) for the given timestamps."""
    origins = np.asarray(origins, dtype=np.int64)
    rows_in = origins[:, None] + np.arange(-spec.h, 0)[None, :]
    rows_out = origins[:, None] + np.arange(spec.f)[None, :]
    return values[rows_in], values[rows_out]


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z) * self.std + self.mean


def zscore(dataset: SeriesDataset):
    """Normalize with training statistics; returns (normalized dataset, scaler)."""
    _check_std(dataset.std, dataset.names)
    scaler = Scaler(dataset.mean.copy(), dataset.std.copy())
    z = scaler.transform(dataset.values)
    norm = SeriesDataset(z, dataset.names, np.zeros(dataset.N), np.ones(dataset.N),
                         dataset.train_end, dataset.val_end, dict(dataset.meta))
    return norm, scaler
