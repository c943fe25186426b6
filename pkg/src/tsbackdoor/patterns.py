"""Target-pattern waveforms, per-variable activation offsets and the Gaussian guidance prior."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

SHAPES = ("cone", "upward_trend", "up_and_down")


def unit_waveform(shape: str, t_ptn: int) -> np.ndarray:
    """Waveform of length ``t_ptn`` with max |value| = 1."""
    if t_ptn < 3:
        raise ContractViolation("pattern length must be at least 3")
    k = np.arange(t_ptn, dtype=np.float64)
    mid = (t_ptn - 1) / 2.0
    if shape == "cone":
        w = 1.0 - np.abs(k - mid) / mid
    elif shape == "upward_trend":
        w = k / (t_ptn - 1)
    elif shape == "up_and_down":
        w = np.sin(np.pi * k / (t_ptn - 1))
        w[[0, -1]] = 0.0
    else:
        raise ContractViolation(f"unknown pattern shape {shape!r}; expected one of {SHAPES}")
    return w / np.abs(w).max()


@dataclass(frozen=True, eq=False)
class TargetPattern:
    shape: str
    values: np.ndarray  # t_ptn x |S|
    amplitudes: np.ndarray

    @property
    def length(self):
        return self.values.shape[0]


def make_pattern(shape: str, t_ptn: int, amplitudes) -> TargetPattern:
    amplitudes = np.atleast_1d(np.asarray(amplitudes, dtype=np.float64))
    if np.any(amplitudes <= 0):
        raise ContractViolation("pattern amplitudes must be positive")
    w = unit_waveform(shape, t_ptn)
    return TargetPattern(shape, w[:, None] * amplitudes[None, :], amplitudes)


def sample_offsets(seed, events, variable_sets, f: int, t_ptn: int) -> dict:
    """Independent uniform offsets in {0, ..., f - t_ptn} for every (event, variable)."""
    if f <= t_ptn:
        raise ContractViolation("horizon must be longer than the pattern")
    rng = np.random.default_rng(seed)
    out = {}
    for t, variables in zip(events, variable_sets):
        for s in variables:
            out[(int(t), int(s))] = int(rng.integers(0, f - t_ptn + 1))
    return out


@dataclass(frozen=True, eq=False)
class GuidanceMatrix:
    values: np.ndarray  # f x |S|
    sigma: float


def guidance_columns(offsets, f: int, t_ptn: int, sigma: float = 1.0) -> np.ndarray:
    """Column-normalized Gaussian bumps centred on each offset, zero past f - t_ptn."""
    if sigma <= 0:
        raise ContractViolation("sigma must be positive")
    offsets = np.atleast_1d(np.asarray(offsets))
    support = f - t_ptn
    if np.any(offsets < 0) or np.any(offsets > support):
        raise ContractViolation(f"offsets must lie in [0, {support}]")
    d = np.arange(support + 1, dtype=np.float64)[:, None]
    k = np.exp(-((d - offsets[None, :]) ** 2) / (2.0 * sigma ** 2))
    out = np.zeros((f, offsets.size))
    out[:support + 1] = k / k.sum(axis=0, keepdims=True)
    return out


def build_guidance(offsets, f: int, t_ptn: int, sigma: float = 1.0) -> GuidanceMatrix:
    return GuidanceMatrix(guidance_columns(offsets, f, t_ptn, sigma), float(sigma))
