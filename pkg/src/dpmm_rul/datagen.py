"""Synthetic multi-sensor run-to-failure fleets.

Each system follows a random-effect linear degradation path
``eta(t) = g0 + g1 * t`` whose coefficients are drawn from a mode-specific
bivariate normal.  Sensors mix a sensor-specific temporal pattern with the
degradation path, the sign of the degradation contribution depending on the
failure mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

_TEMPORAL_FNS = ("sine", "cosine", "constant", "none")


@dataclass(frozen=True)
class ModeSpec:
    name: str
    gamma_mean: tuple[float, float]
    gamma_cov: tuple[tuple[float, float], tuple[float, float]]
    trend_signs: tuple[int, ...]

    def __post_init__(self):
        cov = np.asarray(self.gamma_cov, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise InvalidInputError(f"mode {self.name}: gamma_cov must be a symmetric 2x2 matrix")
        # zero covariance is allowed as a degenerate (deterministic) mode
        if np.any(np.linalg.eigvalsh(cov) < -1e-12):
            raise InvalidInputError(f"mode {self.name}: gamma_cov is not positive semidefinite")
        if any(s not in (-1, 1) for s in self.trend_signs):
            raise InvalidInputError(f"mode {self.name}: trend signs must be +1 or -1")


@dataclass(frozen=True)
class SensorSpec:
    delta1: float
    delta2: float
    delta3: float
    temporal_fn: str = "none"
    freq: float = 0.0

    def __post_init__(self):
        if self.temporal_fn not in _TEMPORAL_FNS:
            raise InvalidInputError(f"unknown temporal function {self.temporal_fn!r}")
        if self.temporal_fn == "none" and self.delta3 != 0:
            raise InvalidInputError("temporal_fn 'none' requires delta3 == 0")

    def temporal(self, t):
        if self.temporal_fn == "sine":
            return np.sin(self.freq * t)
        if self.temporal_fn == "cosine":
            return np.cos(self.freq * t)
        if self.temporal_fn == "constant":
            return np.ones_like(np.asarray(t, dtype=float))
        return np.zeros_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class SensorHistory:
    """One system's readings (``T x S``), failure time and optional label.

    ``rul_at_end`` is the remaining life after the last observed cycle; it is
    zero for run-to-failure histories and positive for truncated test units.
    """

    system_id: str
    readings: np.ndarray
    failure_time: float
    true_mode: str | None = None
    rul_at_end: float = 0.0

    @property
    def length(self) -> int:
        return self.readings.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.readings.shape[1]


@dataclass(frozen=True)
class SystemEffects:
    gamma0: float
    gamma1: float
    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray


@dataclass
class FleetConfig:
    modes: list[ModeSpec]
    sensors: list[SensorSpec]
    failure_threshold: float = 400.0
    noise_sd: float = 20.0
    uniform_hi: float = 30.0
    systems_per_mode: int = 150
    emergence_schedule: list[tuple[int, str]] = field(default_factory=list)
    seed: int = 0
    rejection_cap: int = 1_000_000

    def __post_init__(self):
        if self.failure_threshold <= 0:
            raise InvalidInputError("failure_threshold must be positive")
        if self.noise_sd < 0:
            raise InvalidInputError("noise_sd must be non-negative")
        if self.systems_per_mode < 1:
            raise InvalidInputError("systems_per_mode must be >= 1")
        n_sensors = len(self.sensors)
        for m in self.modes:
            if len(m.trend_signs) != n_sensors:
                raise InvalidInputError(f"mode {m.name} has {len(m.trend_signs)} trend signs for {n_sensors} sensors")
        names = [m.name for m in self.modes]
        if len(set(names)) != len(names):
            raise InvalidInputError("mode names must be unique")
        for _, name in self.emergence_schedule:
            if name not in names:
                raise InvalidInputError(f"emergence schedule names unknown mode {name!r}")

    def mode(self, name: str) -> ModeSpec:
        for m in self.modes:
            if m.name == name:
                return m
        raise KeyError(name)


DEFAULT_SENSORS = (
    SensorSpec(1.0, 0.5, 0.9, "sine", 0.05),
    SensorSpec(0.1, 0.5, 0.2, "constant"),
    SensorSpec(2.0, 0.01, 1.0, "cosine", 0.07),
    SensorSpec(0.001, 0.5, 0.0, "none"),
    SensorSpec(0.05, 0.5, 1.0, "sine", 0.1),
    SensorSpec(0.001, 1.5, 0.2, "sine", 0.01),
    SensorSpec(0.02, 1.2, 1.4, "cosine", 0.1),
    SensorSpec(0.01, 0.5, 0.14, "constant"),
)

DEFAULT_MODES = (
    ModeSpec("A", (-1.5, 2.5), ((120.0, 2.0), (2.0, 0.4)), (-1, -1, 1, 1, 1, 1, 1, 1)),
    ModeSpec("B", (-0.5, 1.8), ((80.0, 1.0), (1.0, 0.25)), (1, 1, -1, -1, 1, 1, 1, 1)),
    ModeSpec("C", (-1.3, 2.3), ((110.0, 1.8), (1.8, 0.3)), (1, 1, 1, 1, -1, -1, 1, 1)),
    ModeSpec("D", (-0.8, 2.0), ((90.0, 1.0), (1.0, 0.4)), (1, 1, 1, 1, 1, 1, -1, -1)),
)


def default_config(n_modes: int = 4, systems_per_mode: int = 150, seed: int = 0, **kwargs) -> FleetConfig:
    """The canonical four-mode, eight-sensor setup (first ``n_modes`` modes)."""
    if not 1 <= n_modes <= len(DEFAULT_MODES):
        raise InvalidInputError(f"n_modes must be in 1..{len(DEFAULT_MODES)}")
    return FleetConfig(
        modes=list(DEFAULT_MODES[:n_modes]),
        sensors=list(DEFAULT_SENSORS),
        systems_per_mode=systems_per_mode,
        seed=seed,
        **kwargs,
    )


def sample_random_effects(mode: ModeSpec, rng: np.random.Generator, cap: int = 1_000_000) -> tuple[float, float]:
    """Draw (intercept, slope) from the mode's bivariate normal, rejecting slope <= 0."""
    mean = np.asarray(mode.gamma_mean, dtype=float)
    cov = np.asarray(mode.gamma_cov, dtype=float)
    chol = _cov_factor(cov)
    drawn = 0
    while drawn < cap:
        batch = min(1024, cap - drawn)
        draws = mean + rng.standard_normal((batch, 2)) @ chol.T
        drawn += batch
        ok = np.flatnonzero(draws[:, 1] > 0)
        if ok.size:
            g0, g1 = draws[ok[0]]
            return float(g0), float(g1)
    raise RuntimeError(f"mode {mode.name}: no positive slope in {cap} draws")


def _cov_factor(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # semidefinite (e.g. all-zero) covariance
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def failure_time(gamma0: float, gamma1: float, threshold: float) -> float:
    """First time the path ``gamma0 + gamma1 t`` reaches ``threshold``."""
    if gamma1 <= 0:
        raise InvalidInputError("slope must be positive")
    return (threshold - gamma0) / gamma1


def generate_sensor_signal(effects: SystemEffects, mode: ModeSpec, sensor: SensorSpec, s: int, t, noise=0.0):
    """Noise-free reading of sensor ``s`` (0-based) at time(s) ``t`` plus ``noise``."""
    t = np.asarray(t, dtype=float)
    eta = effects.gamma0 + effects.gamma1 * t
    return (
        sensor.delta1 * effects.u1[s] * t ** sensor.delta2
        + sensor.delta3 * effects.u2[s] * sensor.temporal(t)
        + effects.u3[s]
        + mode.trend_signs[s] * eta
        + noise
    )


def _system_rng(seed: int, mode_index: int, system_index: int, channel: int) -> np.random.Generator:
    # channel 0 carries the random effects, channel s+1 sensor s
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(mode_index, system_index, channel)))


def generate_system(config: FleetConfig, mode_index: int, system_index: int) -> SensorHistory:
    mode = config.modes[mode_index]
    rng = _system_rng(config.seed, mode_index, system_index, 0)
    n_sensors = len(config.sensors)
    while True:
        g0, g1 = sample_random_effects(mode, rng, config.rejection_cap)
        tau = failure_time(g0, g1, config.failure_threshold)
        if tau >= 1.0:
            break
    n_cycles = int(math.floor(tau))
    t = np.arange(1, n_cycles + 1, dtype=float)
    u1 = np.empty(n_sensors)
    u2 = np.empty(n_sensors)
    u3 = np.empty(n_sensors)
    noise = np.empty((n_sensors, n_cycles))
    for s in range(n_sensors):
        srng = _system_rng(config.seed, mode_index, system_index, s + 1)
        u1[s], u2[s], u3[s] = srng.uniform(0.0, config.uniform_hi, size=3)
        noise[s] = srng.normal(0.0, config.noise_sd, size=n_cycles) if config.noise_sd > 0 else 0.0
    effects = SystemEffects(g0, g1, u1, u2, u3)
    readings = np.column_stack([
        generate_sensor_signal(effects, mode, sensor, s, t, noise[s])
        for s, sensor in enumerate(config.sensors)
    ])
    return SensorHistory(
        system_id=f"{mode.name}-{system_index:04d}",
        readings=readings,
        failure_time=tau,
        true_mode=mode.name,
    )


def generate_fleet(config: FleetConfig, modes: Sequence[str] | None = None) -> list[SensorHistory]:
    """``systems_per_mode`` histories for every mode (or the named subset)."""
    names = [m.name for m in config.modes] if modes is None else list(modes)
    fleet = []
    for name in names:
        k = next(i for i, m in enumerate(config.modes) if m.name == name)
        fleet.extend(generate_system(config, k, j) for j in range(config.systems_per_mode))
    return fleet


def split_by_mode(fleet: Sequence[SensorHistory], n_test_per_mode: int):
    """Last ``n_test_per_mode`` systems of each mode go to the test set."""
    by_mode: dict[str | None, list[SensorHistory]] = {}
    for h in fleet:
        by_mode.setdefault(h.true_mode, []).append(h)
    train, test = [], []
    for group in by_mode.values():
        if n_test_per_mode >= len(group):
            raise InvalidInputError("test split leaves no training systems")
        cut = len(group) - n_test_per_mode
        train.extend(group[:cut])
        test.extend(group[cut:])
    return train, test
