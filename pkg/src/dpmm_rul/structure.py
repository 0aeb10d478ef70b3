"""Performance score and birth/merge moves that change the number of modes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable

import numpy as np
from sklearn.metrics import silhouette_samples

from . import dpmm
from .dpmm import StickPrior, VariationalState
from .errors import InvalidInputError

log = logging.getLogger(__name__)

J_SCORE = "j-score"
ELBO_SCORE = "elbo"
RUL_SCORE = "rul-loss"
SCORE_VARIANTS = (J_SCORE, ELBO_SCORE, RUL_SCORE)


def silhouette(obs: np.ndarray, labels) -> float:
    """Mean Euclidean silhouette; 0 for a single cluster, singletons score 0."""
    obs = np.asarray(obs, dtype=float)
    labels = np.asarray(labels)
    if len(labels) == 0 or len(obs) == 0:
        raise InvalidInputError("silhouette of an empty set")
    if len(obs) != len(labels):
        raise InvalidInputError("one label per observation is required")
    n_labels = len(np.unique(labels))
    if n_labels < 2:
        return 0.0
    if n_labels == len(labels):
        return 0.0
    return float(np.mean(silhouette_samples(obs, labels, metric="euclidean")))


@dataclass(frozen=True)
class JScoreReport:
    silhouette: float
    rul_loss: float
    omega: float
    score: float


def j_score(obs: np.ndarray, labels, rul_loss: float, omega: float) -> JScoreReport:
    if omega <= 0:
        raise InvalidInputError("omega must be positive")
    if rul_loss < 0:
        raise InvalidInputError("RUL loss must be non-negative")
    sil = silhouette(obs, labels)
    return JScoreReport(sil, float(rul_loss), float(omega), sil - omega * float(rul_loss))


@dataclass(frozen=True)
class BirthConfig:
    r_threshold: float = 0.1
    k_prime: int = 2
    local_iters: int = 20

    def __post_init__(self):
        if not 0 < self.r_threshold < 1:
            raise InvalidInputError("r_threshold must lie in (0, 1)")
        if self.k_prime < 0:
            raise InvalidInputError("k_prime must be non-negative")
        if self.local_iters < 0:
            raise InvalidInputError("local_iters must be non-negative")


@dataclass
class BirthReport:
    target: int | None
    subset_size: int
    added: int
    reason: str = ""


@dataclass
class MergeCandidate:
    pair: tuple[int, int]
    delta_j: float
    state: VariationalState = field(repr=False)


@dataclass
class MergeReport:
    base_score: float
    candidates: list[MergeCandidate]
    accepted: MergeCandidate | None
    removed_empty: int = 0
    pruned: VariationalState | None = field(default=None, repr=False)


def occupied(state: VariationalState, min_size: int = 1) -> np.ndarray:
    """Components holding at least ``min_size`` hard-assigned systems and non-negligible mass."""
    labels = dpmm.hard_assign(state)
    held = np.bincount(labels, minlength=state.K) >= max(int(min_size), 1)
    return held & state.active()


def n_modes(state: VariationalState) -> int:
    return int(occupied(state).sum())


def min_mode_size(n_systems: int, fraction: float = 0.05) -> int:
    """Smallest support for a mode to survive a structure pass."""
    return max(2, int(np.ceil(fraction * n_systems)))


def prune_empty(state: VariationalState, obs: np.ndarray, prior: StickPrior,
                min_size: int = 1) -> tuple[VariationalState, int]:
    """Merge away components holding fewer than ``min_size`` systems.

    Their systems are reassigned over the remaining components.  The largest
    component always survives.
    """
    held = occupied(state, min_size)
    if not held.any():
        held = np.zeros(state.K, dtype=bool)
        held[np.argmax(state.counts)] = True
    keep = np.flatnonzero(held)
    removed = state.K - len(keep)
    if removed == 0:
        return state, 0
    return dpmm.drop_components(state, keep, obs, prior), removed


def _principal_split(sub: np.ndarray, k_prime: int) -> np.ndarray:
    """Hard initial labels for the local fit: quantile bins along the top principal axis."""
    if k_prime == 1 or len(sub) < 2:
        return np.zeros(len(sub), dtype=int)
    centred = sub - sub.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    proj = centred @ vt[0]
    ranks = np.argsort(np.argsort(proj, kind="stable"), kind="stable")
    return np.minimum(ranks * k_prime // len(sub), k_prime - 1)


def fit_local(sub: np.ndarray, prior: StickPrior, k_prime: int, iters: int) -> VariationalState:
    """Small DPMM on a subset, started from a principal-axis split."""
    init = _principal_split(sub, k_prime)
    resp = np.zeros((len(sub), k_prime))
    resp[np.arange(len(sub)), init] = 1.0
    state = dpmm.from_responsibilities(resp, sub, prior)
    return dpmm.run_cavi(state, sub, prior, iters)


def birth_move(
    state: VariationalState,
    obs: np.ndarray,
    prior: StickPrior,
    config: BirthConfig,
    rng: np.random.Generator,
    max_components: int | None = None,
) -> tuple[VariationalState, BirthReport]:
    """Split a randomly chosen mode with a locally fitted mixture.

    The chosen mode's mass on the subset is handed to the ``k_prime`` new
    components in proportion to their local responsibilities; then all
    systems are reassigned with one sweep over the enlarged mixture.
    """
    obs = np.asarray(obs, dtype=float)
    if config.k_prime == 0:
        return state, BirthReport(None, 0, 0, "k_prime is 0")
    candidates = np.flatnonzero(occupied(state))
    if candidates.size == 0:
        raise InvalidInputError("birth needs at least one active mode")
    if max_components is not None and state.K + config.k_prime > max_components:
        return state, BirthReport(None, 0, 0, "truncation cap reached")
    target = int(rng.choice(candidates))
    rows = np.flatnonzero(state.resp[:, target] >= config.r_threshold)
    if rows.size == 0:
        return state, BirthReport(target, 0, 0, "no system above the responsibility threshold")
    local = fit_local(obs[rows], prior, config.k_prime, config.local_iters)
    resp = np.concatenate([state.resp, np.zeros((state.N, config.k_prime))], axis=1)
    resp[rows, state.K:] = state.resp[rows, target, None] * local.resp
    resp[rows, target] = 0.0
    grown = dpmm.from_responsibilities(resp, obs, prior)
    grown = dpmm.cavi_sweep(grown, obs, prior)
    return grown, BirthReport(target, int(rows.size), config.k_prime)


def merge_pair(state: VariationalState, a: int, b: int, obs: np.ndarray, prior: StickPrior) -> VariationalState:
    """Pool the responsibilities of ``b`` into ``a`` and drop ``b``."""
    if a == b:
        raise InvalidInputError("cannot merge a mode with itself")
    resp = state.resp.copy()
    resp[:, a] += resp[:, b]
    resp = np.delete(resp, b, axis=1)
    return dpmm.from_responsibilities(resp, obs, prior)


def merge_move(
    state: VariationalState,
    obs: np.ndarray,
    prior: StickPrior,
    score_fn: Callable[[VariationalState], float],
    min_size: int = 1,
) -> tuple[VariationalState, MergeReport]:
    """Evaluate every pair of occupied modes and apply the best strict improvement.

    Components with fewer than ``min_size`` systems are removed first without
    scoring.  ``score_fn`` maps a state to the score being maximized (J, or an
    ablation substitute).
    """
    obs = np.asarray(obs, dtype=float)
    state, removed = prune_empty(state, obs, prior, min_size)
    base = float(score_fn(state))
    candidates = []
    if state.K >= 2:
        for a, b in combinations(range(state.K), 2):
            merged = merge_pair(state, a, b, obs, prior)
            candidates.append(MergeCandidate((a, b), float(score_fn(merged)) - base, merged))
    best = None
    for c in candidates:
        if c.delta_j > 0 and (best is None or c.delta_j > best.delta_j):
            best = c
    new_state = best.state if best is not None else state
    return new_state, MergeReport(base, candidates, best, removed, state)


def sort_by_mass(state: VariationalState, prior: StickPrior) -> VariationalState:
    """Relabel components by decreasing mass (stable) and refit the sticks to the new order."""
    order = np.argsort(-state.counts, kind="stable")
    return dpmm.update_sticks(state.permuted(order), prior)
