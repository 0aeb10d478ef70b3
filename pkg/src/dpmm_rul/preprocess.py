"""Fixed-length alignment for clustering and sliding windows for RUL regression.

Aligned vectors are flattened sensor-major: all cycles of sensor 1, then all
cycles of sensor 2, and so on.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .datagen import SensorHistory
from .errors import InvalidInputError

log = logging.getLogger(__name__)

TRUNCATE_PAD = "truncate-pad"
TEMPORAL_WARP = "temporal-warp"
STRATEGIES = (TRUNCATE_PAD, TEMPORAL_WARP)


@dataclass(frozen=True)
class AlignedObservation:
    system_id: str
    vector: np.ndarray
    strategy: str


class Windows(NamedTuple):
    """Stacked sliding windows: ``X`` is ``(n, S, xi)``, ``y`` the RUL labels."""

    X: np.ndarray
    y: np.ndarray
    system_index: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, mask) -> "Windows":
        return Windows(self.X[mask], self.y[mask], self.system_index[mask])


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray  # True where the sensor had zero spread


def reference_length(fleet: Sequence[SensorHistory]) -> int:
    if len(fleet) == 0:
        raise InvalidInputError("empty fleet")
    return int(math.floor(sum(h.length for h in fleet) / len(fleet)))


def flatten(readings: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(readings.T).reshape(-1)


def unflatten(vector: np.ndarray, n_sensors: int) -> np.ndarray:
    return vector.reshape(n_sensors, -1).T


def truncate_pad(history: SensorHistory, ref_len: int) -> AlignedObservation:
    """Keep the last ``ref_len`` cycles, or repeat the final row up to that length."""
    if ref_len < 1:
        raise InvalidInputError("reference length must be >= 1")
    r = history.readings
    if r.shape[0] >= ref_len:
        aligned = r[-ref_len:]
    else:
        pad = np.repeat(r[-1:], ref_len - r.shape[0], axis=0)
        aligned = np.vstack([r, pad])
    return AlignedObservation(history.system_id, flatten(aligned), TRUNCATE_PAD)


def temporal_warp(history: SensorHistory, ref_len: int, horizon: float | None = None) -> AlignedObservation:
    """Resample on the normalized time grid ``j / ref_len`` of ``horizon``.

    ``horizon`` defaults to the observed length (training systems).  Grid
    points past the last observed cycle take the last reading.
    """
    if ref_len < 1:
        raise InvalidInputError("reference length must be >= 1")
    n_obs = history.length
    horizon = float(n_obs) if horizon is None else float(horizon)
    if horizon < 1:
        raise InvalidInputError("horizon must be >= 1")
    grid = np.arange(1, ref_len + 1) / ref_len * horizon
    cycles = np.arange(1, n_obs + 1, dtype=float)
    warped = np.column_stack([np.interp(grid, cycles, history.readings[:, s]) for s in range(history.n_sensors)])
    return AlignedObservation(history.system_id, flatten(warped), TEMPORAL_WARP)


def align(history: SensorHistory, ref_len: int, strategy: str, horizon: float | None = None) -> AlignedObservation:
    if strategy == TRUNCATE_PAD:
        return truncate_pad(history, ref_len)
    if strategy == TEMPORAL_WARP:
        return temporal_warp(history, ref_len, horizon)
    raise InvalidInputError(f"unknown alignment strategy {strategy!r}")


def make_windows(history: SensorHistory, xi: int) -> Windows:
    """All length-``xi`` windows with labels ``rul_at_end + T - (i + xi - 1)``."""
    if xi < 1:
        raise InvalidInputError("window length must be >= 1")
    n = history.length - xi + 1
    if n <= 0:
        return Windows(np.empty((0, history.n_sensors, xi)), np.empty(0), np.empty(0, dtype=int))
    X = np.lib.stride_tricks.sliding_window_view(history.readings, xi, axis=0)
    labels = history.rul_at_end + np.arange(n - 1, -1, -1, dtype=float)
    return Windows(np.array(X), labels, np.zeros(n, dtype=int))


def fleet_windows(fleet: Sequence[SensorHistory], xi: int, last_only: bool = False) -> Windows:
    """Windows for every system; ``system_index`` refers to the position in ``fleet``."""
    parts, skipped = [], []
    for i, h in enumerate(fleet):
        w = make_windows(h, xi)
        if len(w) == 0:
            skipped.append(h.system_id)
            continue
        if last_only:
            w = w.subset(slice(-1, None))
        parts.append(Windows(w.X, w.y, np.full(len(w), i)))
    if skipped:
        log.warning("%d systems shorter than the window length were excluded: %s", len(skipped), ", ".join(skipped[:10]))
    if not parts:
        S = fleet[0].n_sensors if fleet else 0
        return Windows(np.empty((0, S, xi)), np.empty(0), np.empty(0, dtype=int))
    return Windows(
        np.concatenate([p.X for p in parts]),
        np.concatenate([p.y for p in parts]),
        np.concatenate([p.system_index for p in parts]),
    )


def fit_normalization(fleet: Sequence[SensorHistory]) -> NormalizationStats:
    stacked = np.vstack([h.readings for h in fleet])
    mean = stacked.mean(axis=0)
    sd = stacked.std(axis=0)
    constant = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    sd = np.where(constant, 1.0, sd)
    return NormalizationStats(mean, sd, constant)


def apply_normalization(stats: NormalizationStats, data):
    """Z-score a readings array (``..., S``) or each history of a fleet."""
    if isinstance(data, SensorHistory):
        return _replace_readings(data, (data.readings - stats.mean) / stats.sd)
    if isinstance(data, np.ndarray):
        return (data - stats.mean) / stats.sd
    return [apply_normalization(stats, h) for h in data]


def invert_normalization(stats: NormalizationStats, data: np.ndarray) -> np.ndarray:
    return data * stats.sd + stats.mean


def _replace_readings(h: SensorHistory, readings: np.ndarray) -> SensorHistory:
    return SensorHistory(h.system_id, readings, h.failure_time, h.true_mode, h.rul_at_end)


def last_window(history: SensorHistory, xi: int) -> np.ndarray:
    """Final ``S x xi`` window; histories shorter than ``xi`` are front-padded with their first row."""
    if xi < 1:
        raise InvalidInputError("window length must be >= 1")
    r = history.readings
    if r.shape[0] < xi:
        r = np.vstack([np.repeat(r[:1], xi - r.shape[0], axis=0), r])
    return np.ascontiguousarray(r[-xi:].T)


def final_windows(fleet: Sequence[SensorHistory], xi: int) -> Windows:
    """One window per system (its last), labelled with the remaining life after it."""
    if not fleet:
        return Windows(np.empty((0, 0, xi)), np.empty(0), np.empty(0, dtype=int))
    X = np.stack([last_window(h, xi) for h in fleet])
    y = np.array([h.rul_at_end for h in fleet], dtype=float)
    return Windows(X, y, np.arange(len(fleet)))


def random_truncation(history: SensorHistory, rng: np.random.Generator, min_len: int = 1) -> SensorHistory:
    """Cut a run-to-failure history at a uniformly drawn cycle in ``[min_len, T]``.

    The remaining cycles become ``rul_at_end``.
    """
    T = history.length
    lo = min(max(int(min_len), 1), T)
    cut = int(rng.integers(lo, T + 1))
    return SensorHistory(history.system_id, history.readings[:cut].copy(), history.failure_time,
                         history.true_mode, history.rul_at_end + (T - cut))
