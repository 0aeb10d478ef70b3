"""Ready-made experiment scenarios and the omega cross-validation sweep."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import datagen
from . import preprocess as pp
from .datagen import FleetConfig, SensorHistory
from .errors import InvalidInputError
from .pipeline import PipelineConfig, RunReport, StreamBatch, run

log = logging.getLogger(__name__)

SIM_STATIONARY = "sim-stationary"
SIM_NONSTATIONARY = "sim-nonstationary"
CMAPSS = "cmapss"
SCENARIOS = (SIM_STATIONARY, SIM_NONSTATIONARY, CMAPSS)

# window length used for the simulated fleets (see README)
SIM_WINDOW = 50
CMAPSS_WINDOW = 30
OMEGA_GRID = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class Scenario:
    train: list[SensorHistory]
    test: list[SensorHistory]
    stream: list[StreamBatch]


def truncate_test(fleet: Sequence[SensorHistory], seed: int, min_len: int) -> list[SensorHistory]:
    """Cut every test history at a random cycle, seeded per system position."""
    out = []
    for i, h in enumerate(fleet):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1_000_003, i)))
        out.append(pp.random_truncation(h, rng, min_len))
    return out


def simulated(config: FleetConfig, n_test_per_mode: int, window: int, test_seed: int | None = None) -> Scenario:
    """Train/test fleets from a generator config.

    Modes named in ``config.emergence_schedule`` are held back and arrive as
    stream batches at their scheduled iteration; their test systems are part
    of the test set from the start.
    """
    fleet = datagen.generate_fleet(config)
    train, test = datagen.split_by_mode(fleet, n_test_per_mode)
    late = {name: it for it, name in config.emergence_schedule}
    initial = [h for h in train if h.true_mode not in late]
    if not initial:
        raise InvalidInputError("every mode is scheduled to emerge later; nothing to start from")
    stream = []
    for it, name in sorted(config.emergence_schedule):
        stream.append(StreamBatch(it, tuple(h for h in train if h.true_mode == name)))
    seed = config.seed if test_seed is None else test_seed
    return Scenario(initial, truncate_test(test, seed, window), stream)


def stationary_config(n_modes: int = 4, n_train: int = 40, n_test: int = 10, seed: int = 0) -> FleetConfig:
    return datagen.default_config(n_modes, systems_per_mode=n_train + n_test, seed=seed)


def nonstationary_config(n_initial: int = 2, n_train: int = 40, n_test: int = 10, seed: int = 0,
                         arrival: int = 10) -> FleetConfig:
    """``n_initial`` modes from the start, one more arriving at ``arrival``."""
    cfg = datagen.default_config(n_initial + 1, systems_per_mode=n_train + n_test, seed=seed)
    cfg.emergence_schedule = [(arrival, cfg.modes[n_initial].name)]
    return cfg


def sim_pipeline_config(**overrides) -> PipelineConfig:
    base = dict(window=SIM_WINDOW)
    base.update(overrides)
    return PipelineConfig(**base)


def run_stationary(n_modes=4, n_train=40, n_test=10, seed=0, out_dir=None, **overrides) -> RunReport:
    sc = simulated(stationary_config(n_modes, n_train, n_test, seed), n_test, overrides.get("window", SIM_WINDOW))
    return run(sim_pipeline_config(seed=seed, **overrides), sc.train, sc.test, out_dir=out_dir)


def run_nonstationary(n_train=40, n_test=10, seed=0, arrival=10, out_dir=None, **overrides) -> RunReport:
    cfg = nonstationary_config(2, n_train, n_test, seed, arrival)
    sc = simulated(cfg, n_test, overrides.get("window", SIM_WINDOW))
    return run(sim_pipeline_config(seed=seed, **overrides), sc.train, sc.test, sc.stream, out_dir=out_dir)


@dataclass
class SweepRow:
    omega: float
    mean_val_rmse: float
    mean_silhouette: float
    mean_j: float
    mean_modes: float
    folds: int


def sweep_omega(config: PipelineConfig, train: Sequence[SensorHistory], grid=OMEGA_GRID, folds: int = 5,
                seed: int = 0) -> list[SweepRow]:
    """K-fold cross-validation of omega.

    Each fold runs the pipeline on the other folds and scores the held-out
    fold as a test set: RMSE of its final-window predictions after random
    truncation, and the J score of the fit.
    """
    train = list(train)
    if folds < 2 or folds > len(train):
        raise InvalidInputError("folds must lie in 2..len(train)")
    rng = np.random.default_rng(seed)
    fold_of = rng.permutation(len(train)) % folds
    rows = []
    for omega in grid:
        rmses, sils, js, modes = [], [], [], []
        for f in range(folds):
            fit = [h for h, g in zip(train, fold_of) if g != f]
            held = truncate_test([h for h, g in zip(train, fold_of) if g == f], seed + f, config.window)
            rep = run(replace(config, omega=omega), fit, held)
            last = rep.records[-1]
            rmses.append(last.test_rmse)
            sils.append(last.silhouette)
            js.append(last.silhouette - omega * last.test_rmse)
            modes.append(last.n_modes)
        rows.append(SweepRow(omega, float(np.mean(rmses)), float(np.mean(sils)), float(np.mean(js)),
                             float(np.mean(modes)), folds))
    return rows
