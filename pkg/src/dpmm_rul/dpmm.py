"""Truncated stick-breaking DP mixture with diagonal Gaussian components.

Each component has a diagonal covariance; the conjugate prior factorizes into
one Normal-Inverse-Gamma per dimension (the diagonal restriction of a
Normal-Inverse-Wishart).  Per dimension ``d`` of component ``k``::

    sigma2_kd ~ InvGamma(nu_k / 2, psi_kd / 2)
    mu_kd | sigma2_kd ~ Normal(m_kd, sigma2_kd / kappa_k)

Mean-field inference is plain coordinate ascent (CAVI).  The last stick of a
truncated state is closed (beta_K = 1), so only the first K - 1 sticks carry
a variational Beta factor.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma, gammaln, logsumexp, xlogy

from .errors import InvalidInputError

LOG_2PI = np.log(2.0 * np.pi)
EMPTY_MASS = 1e-3
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class BaseNIW:
    m0: np.ndarray
    kappa0: float
    nu0: float
    psi0: np.ndarray

    def __post_init__(self):
        if self.kappa0 <= 0:
            raise InvalidInputError("kappa0 must be positive")
        if self.nu0 <= 1:
            raise InvalidInputError("nu0 must exceed 1")
        if np.any(np.asarray(self.psi0) <= 0):
            raise InvalidInputError("psi0 entries must be positive")

    @property
    def dim(self) -> int:
        return len(self.m0)


@dataclass(frozen=True)
class StickPrior:
    alpha: float
    base: BaseNIW

    def __post_init__(self):
        if self.alpha <= 0:
            raise InvalidInputError("alpha must be positive")


@dataclass(frozen=True)
class ModeParams:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class VariationalState:
    """Truncated variational posterior.

    ``resp`` is N x K; sticks are K-vectors; ``m``/``psi`` are K x D and
    ``kappa``/``nu`` K-vectors.
    """

    resp: np.ndarray
    stick_a: np.ndarray
    stick_b: np.ndarray
    m: np.ndarray
    kappa: np.ndarray
    nu: np.ndarray
    psi: np.ndarray

    @property
    def K(self) -> int:
        return self.resp.shape[1]

    @property
    def N(self) -> int:
        return self.resp.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return self.resp.sum(axis=0)

    def active(self) -> np.ndarray:
        return self.counts >= EMPTY_MASS

    def copy(self) -> "VariationalState":
        return VariationalState(*(getattr(self, f).copy() for f in _FIELDS))

    def permuted(self, order) -> "VariationalState":
        order = np.asarray(order)
        return VariationalState(
            self.resp[:, order], self.stick_a[order], self.stick_b[order],
            self.m[order], self.kappa[order], self.nu[order], self.psi[order],
        )

    def mode_params(self, k: int) -> ModeParams:
        """Plug-in posterior means of component ``k``."""
        nu = self.nu[k]
        denom = nu - 2.0 if nu > 2.0 else nu
        return ModeParams(self.m[k].copy(), self.psi[k] / denom)


_FIELDS = ("resp", "stick_a", "stick_b", "m", "kappa", "nu", "psi")


def default_prior(obs: np.ndarray, alpha: float = 1.0, kappa0: float = 1.0, nu0: float = 3.0) -> StickPrior:
    """Data-centred base measure: mean and per-dimension variance of ``obs``."""
    obs = np.asarray(obs, dtype=float)
    var = obs.var(axis=0)
    # constant dimensions would give psi0 = 0
    floor = 1e-6 * max(float(var.mean()), 1e-12)
    return StickPrior(alpha, BaseNIW(obs.mean(axis=0), kappa0, nu0, np.maximum(var, floor)))


def stick_weights(betas) -> np.ndarray:
    """Mixture weights from stick proportions; the final break is forced to 1."""
    b = np.array(betas, dtype=float)
    if b.ndim != 1 or b.size == 0:
        raise InvalidInputError("betas must be a non-empty vector")
    if np.any((b[:-1] <= 0) | (b[:-1] >= 1)) or not 0 < b[-1] <= 1:
        raise InvalidInputError("stick proportions must lie in (0, 1)")
    b[-1] = 1.0
    rest = np.concatenate([[1.0], np.cumprod(1.0 - b[:-1])])
    w = b * rest
    w[-1] = 1.0 - w[:-1].sum()
    return w


def expected_log_weights(stick_a, stick_b) -> np.ndarray:
    """E[log pi_k] under the Beta stick factors, with the last stick closed."""
    a = np.asarray(stick_a, dtype=float)
    b = np.asarray(stick_b, dtype=float)
    ab = digamma(a + b)
    e_log_beta = digamma(a) - ab
    e_log_rest = digamma(b) - ab
    e_log_beta[-1] = 0.0
    e_log_rest[-1] = 0.0
    return e_log_beta + np.concatenate([[0.0], np.cumsum(e_log_rest[:-1])])


def _e_log_var(state: VariationalState) -> np.ndarray:
    return np.log(state.psi / 2.0) - digamma(state.nu / 2.0)[:, None]


def expected_log_lik_matrix(state: VariationalState, obs: np.ndarray) -> np.ndarray:
    """N x K matrix of E_q[log N(l_n | mu_k, Sigma_k)]."""
    obs = np.asarray(obs, dtype=float)
    N, D = obs.shape
    e_log_var = _e_log_var(state)
    prec = state.nu[:, None] / state.psi
    out = np.empty((N, state.K))
    for k in range(state.K):
        quad = ((obs - state.m[k]) ** 2) @ prec[k] + D / state.kappa[k]
        out[:, k] = -0.5 * (D * LOG_2PI + e_log_var[k].sum() + quad)
    return out


def expected_log_likelihood(obs: np.ndarray, k: int, state: VariationalState) -> float:
    """E_q[log N(l | mu_k, Sigma_k)] for a single observation."""
    return float(expected_log_lik_matrix(state, np.atleast_2d(obs))[0, k])


def _normalize_log(log_r: np.ndarray) -> np.ndarray:
    norm = logsumexp(log_r, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise RuntimeError("responsibility row with no finite entries")
    r = np.exp(log_r - norm)
    return r / r.sum(axis=1, keepdims=True)


def update_responsibilities(state: VariationalState, obs: np.ndarray) -> VariationalState:
    log_r = expected_log_lik_matrix(state, obs) + expected_log_weights(state.stick_a, state.stick_b)
    return replace(state, resp=_normalize_log(log_r))


def update_sticks(state: VariationalState, prior: StickPrior) -> VariationalState:
    counts = state.counts
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0.0]])
    return replace(state, stick_a=1.0 + counts, stick_b=prior.alpha + tail)


def update_niw(state: VariationalState, obs: np.ndarray, prior: StickPrior) -> VariationalState:
    obs = np.asarray(obs, dtype=float)
    base = prior.base
    r = state.resp
    counts = r.sum(axis=0)
    K, D = r.shape[1], obs.shape[1]
    m = np.empty((K, D))
    psi = np.empty((K, D))
    for k in range(K):
        nk = counts[k]
        if nk > 0:
            xbar = (r[:, k] @ obs) / nk
            scatter = r[:, k] @ ((obs - xbar) ** 2)
        else:
            xbar = base.m0
            scatter = np.zeros(D)
        kappa_k = base.kappa0 + nk
        m[k] = (base.kappa0 * base.m0 + nk * xbar) / kappa_k
        psi[k] = base.psi0 + scatter + base.kappa0 * nk / kappa_k * (xbar - base.m0) ** 2
    return replace(state, m=m, kappa=base.kappa0 + counts, nu=base.nu0 + counts, psi=psi)


def from_responsibilities(resp: np.ndarray, obs: np.ndarray, prior: StickPrior) -> VariationalState:
    """State whose global factors are optimal for the given responsibilities."""
    resp = np.asarray(resp, dtype=float)
    K, D = resp.shape[1], prior.base.dim
    state = VariationalState(
        resp, np.ones(K), np.full(K, prior.alpha),
        np.tile(prior.base.m0, (K, 1)), np.full(K, prior.base.kappa0),
        np.full(K, prior.base.nu0), np.tile(prior.base.psi0, (K, 1)),
    )
    return update_niw(update_sticks(state, prior), obs, prior)


def init_state(obs: np.ndarray, prior: StickPrior, K: int = 1) -> VariationalState:
    """Single-component start: every system fully assigned to mode 1."""
    resp = np.zeros((len(obs), K))
    resp[:, 0] = 1.0
    return from_responsibilities(resp, obs, prior)


def _niw_log_density_expectation(state: VariationalState, m0, kappa0, nu0, psi0) -> np.ndarray:
    """E_q[log NIG(mu, sigma2 | m0, kappa0, nu0, psi0)] summed over dimensions, per component."""
    e_log_var = _e_log_var(state)
    e_prec = state.nu[:, None] / state.psi
    a0 = np.asarray(nu0, dtype=float) / 2.0
    b0 = np.asarray(psi0, dtype=float) / 2.0
    kappa0 = np.asarray(kappa0, dtype=float)
    if kappa0.ndim == 1:
        kappa0 = kappa0[:, None]
    if a0.ndim == 1:
        a0 = a0[:, None]
    e_quad = e_prec * (state.m - m0) ** 2 + 1.0 / state.kappa[:, None]
    dens = (
        a0 * np.log(b0) - gammaln(a0) - (a0 + 1.0) * e_log_var - b0 * e_prec
        - 0.5 * LOG_2PI + 0.5 * np.log(kappa0) - 0.5 * e_log_var - 0.5 * kappa0 * e_quad
    )
    return dens.sum(axis=1)


def elbo_terms(state: VariationalState, obs: np.ndarray, prior: StickPrior) -> dict[str, float]:
    """The seven ELBO contributions, keyed by the expectation they evaluate."""
    r = state.resp
    K = state.K
    alpha = prior.alpha
    base = prior.base
    a, b = state.stick_a[: K - 1], state.stick_b[: K - 1]
    ab = digamma(a + b)
    e_log_1mb = digamma(b) - ab
    e_log_b = digamma(a) - ab
    counts = r.sum(axis=0)
    return {
        "log_lik": float(np.sum(r * expected_log_lik_matrix(state, obs))),
        "log_p_z": float(counts @ expected_log_weights(state.stick_a, state.stick_b)),
        "log_p_beta": float(np.sum(np.log(alpha) + (alpha - 1.0) * e_log_1mb)),
        "log_p_theta": float(_niw_log_density_expectation(state, base.m0, base.kappa0, base.nu0, base.psi0).sum()),
        "log_q_z": float(np.sum(xlogy(r, r))),
        "log_q_beta": float(np.sum(
            (a - 1.0) * e_log_b + (b - 1.0) * e_log_1mb + gammaln(a + b) - gammaln(a) - gammaln(b)
        )),
        "log_q_theta": float(_log_q_theta(state).sum()),
    }


def _log_q_theta(state: VariationalState) -> np.ndarray:
    e_log_var = _e_log_var(state)
    a = state.nu[:, None] / 2.0
    b = state.psi / 2.0
    dens = (
        a * np.log(b) - gammaln(a) - (a + 1.0) * e_log_var - a
        - 0.5 * LOG_2PI + 0.5 * np.log(state.kappa)[:, None] - 0.5 * e_log_var - 0.5
    )
    return dens.sum(axis=1)


def elbo(state: VariationalState, obs: np.ndarray, prior: StickPrior) -> float:
    t = elbo_terms(state, obs, prior)
    return (t["log_lik"] + t["log_p_z"] + t["log_p_beta"] + t["log_p_theta"]
            - t["log_q_z"] - t["log_q_beta"] - t["log_q_theta"])


def cavi_sweep(state: VariationalState, obs: np.ndarray, prior: StickPrior) -> VariationalState:
    state = update_responsibilities(state, obs)
    state = update_sticks(state, prior)
    return update_niw(state, obs, prior)


def run_cavi(state: VariationalState, obs: np.ndarray, prior: StickPrior, sweeps: int) -> VariationalState:
    for _ in range(sweeps):
        state = cavi_sweep(state, obs, prior)
    return state


def hard_assign(state_or_resp) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    resp = state_or_resp.resp if isinstance(state_or_resp, VariationalState) else np.asarray(state_or_resp)
    return np.argmax(resp, axis=1)


def predictive_responsibilities(state: VariationalState, obs: np.ndarray) -> np.ndarray:
    """Responsibilities for observations that do not update the posterior."""
    log_r = expected_log_lik_matrix(state, obs) + expected_log_weights(state.stick_a, state.stick_b)
    return _normalize_log(log_r)


def drop_components(state: VariationalState, keep, obs: np.ndarray, prior: StickPrior) -> VariationalState:
    """Remove components not in ``keep``; their responsibility mass is renormalized away."""
    keep = np.asarray(keep)
    resp = state.resp[:, keep]
    row = resp.sum(axis=1, keepdims=True)
    orphan = row[:, 0] <= 0
    if np.any(orphan):
        # systems held only by removed components fall back to predictive assignment
        tmp = state.permuted(keep)
        resp[orphan] = predictive_responsibilities(tmp, obs[orphan])
        row = resp.sum(axis=1, keepdims=True)
    return from_responsibilities(resp / row, obs, prior)


def check_state(state: VariationalState, prior: StickPrior | None = None, atol: float = 1e-9) -> None:
    """Assert the structural invariants of a variational state."""
    r = state.resp
    if np.any(r < -atol) or np.any(r > 1 + atol):
        raise AssertionError("responsibilities outside [0, 1]")
    if not np.allclose(r.sum(axis=1), 1.0, atol=atol):
        raise AssertionError("responsibility rows do not sum to 1")
    if np.any(state.stick_a <= 0) or np.any(state.stick_b <= 0):
        raise AssertionError("non-positive stick parameters")
    if np.any(state.psi <= 0):
        raise AssertionError("non-positive scale entries")
    if prior is not None:
        if np.any(state.kappa < prior.base.kappa0 - atol) or np.any(state.nu < prior.base.nu0 - atol):
            raise AssertionError("posterior pseudo-counts below the prior")


def _atomic_savez(path, **arrays):
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_state(path, state: VariationalState, prior: StickPrior | None = None) -> None:
    """Write a versioned ``.npz`` snapshot (see README for the schema)."""
    arrays = {f: getattr(state, f) for f in _FIELDS}
    meta = {"version": SNAPSHOT_VERSION, "kind": "variational_state"}
    if prior is not None:
        meta["alpha"] = prior.alpha
        meta["kappa0"] = prior.base.kappa0
        meta["nu0"] = prior.base.nu0
        arrays["m0"] = prior.base.m0
        arrays["psi0"] = prior.base.psi0
    arrays["meta"] = np.array(json.dumps(meta))
    _atomic_savez(path, **arrays)


def load_state(path) -> tuple[VariationalState, StickPrior | None]:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != SNAPSHOT_VERSION or meta.get("kind") != "variational_state":
            raise InvalidInputError(f"unsupported snapshot {meta}")
        state = VariationalState(*(z[f].copy() for f in _FIELDS))
        prior = None
        if "alpha" in meta:
            prior = StickPrior(meta["alpha"], BaseNIW(z["m0"].copy(), meta["kappa0"], meta["nu0"], z["psi0"].copy()))
    return state, prior
