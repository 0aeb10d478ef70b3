import numpy as np
import pytest
from hypothesis import given, settings, strategies as hs
from scipy import integrate, stats

from dpmm_rul import dpmm
from dpmm_rul.dpmm import BaseNIW, StickPrior, VariationalState
from dpmm_rul.errors import InvalidInputError


def random_state(rng, N, D, K, prior):
    resp = rng.dirichlet(np.ones(K), size=N)
    return VariationalState(
        resp,
        rng.uniform(0.5, 5, K), rng.uniform(0.5, 5, K),
        rng.normal(size=(K, D)),
        prior.base.kappa0 + rng.uniform(0, 10, K),
        prior.base.nu0 + rng.uniform(0, 10, K),
        rng.uniform(0.5, 5, (K, D)),
    )


def make_prior(D, alpha=1.0, kappa0=1.0, nu0=3.0, rng=None):
    psi0 = np.ones(D) if rng is None else rng.uniform(0.5, 2, D)
    return StickPrior(alpha, BaseNIW(np.zeros(D), kappa0, nu0, psi0))


# stick weights

def test_stick_weight_examples():
    np.testing.assert_array_equal(dpmm.stick_weights([0.3]), [1.0])
    np.testing.assert_allclose(dpmm.stick_weights([0.5, 0.5]), [0.5, 0.5])
    np.testing.assert_allclose(dpmm.stick_weights([0.9, 0.9, 1.0]), [0.9, 0.09, 0.01])
    with pytest.raises(InvalidInputError):
        dpmm.stick_weights([1.2, 0.5])


@given(hs.lists(hs.floats(1e-6, 1 - 1e-6), min_size=1, max_size=30))
def test_stick_weights_close(betas):
    w = dpmm.stick_weights(betas)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w >= -1e-15)


def test_expected_log_weights_decrease_under_equal_responsibilities():
    for K in (2, 3, 5, 10):
        for alpha in (0.3, 1.0, 4.0):
            prior = make_prior(1, alpha=alpha)
            s = random_state(np.random.default_rng(K), 20, 1, K, prior)
            s.resp = np.full((20, K), 1.0 / K)
            s = dpmm.update_sticks(s, prior)
            e = dpmm.expected_log_weights(s.stick_a, s.stick_b)
            assert np.all(np.diff(e[:-1]) < 0)
            # the closing component equals its predecessor's remainder; strictly lower only for alpha < 1
            if alpha < 1:
                assert e[-1] < e[-2]


# expected log likelihood

def test_point_mass_limit_matches_gaussian(rng):
    D = 3
    mean, var = rng.normal(size=D), rng.uniform(0.5, 2, D)
    big = 1e8
    s = VariationalState(np.ones((1, 1)), np.ones(1), np.ones(1), mean[None], np.array([big]),
                         np.array([big]), (var * (big - 2))[None])
    x = rng.normal(size=D)
    expected = stats.norm.logpdf(x, mean, np.sqrt(var)).sum()
    assert dpmm.expected_log_likelihood(x, 0, s) == pytest.approx(expected, abs=1e-3)


def test_identical_modes_identical_values(rng):
    prior = make_prior(4)
    s = random_state(rng, 5, 4, 2, prior)
    s.m[1], s.kappa[1], s.nu[1], s.psi[1] = s.m[0], s.kappa[0], s.nu[0], s.psi[0]
    x = rng.normal(size=(5, 4))
    ll = dpmm.expected_log_lik_matrix(s, x)
    np.testing.assert_array_equal(ll[:, 0], ll[:, 1])


def _nig_expect(f, m, kappa, nu, psi):
    """E[f(mu, sigma2)] under NIG(m, kappa, nu, psi) by nested quadrature."""
    gh_x, gh_w = np.polynomial.hermite_e.hermegauss(40)
    ig = stats.invgamma(nu / 2.0, scale=psi / 2.0)

    def inner(s2):
        mu = m + np.sqrt(s2 / kappa) * gh_x
        return np.sum(gh_w * f(mu, s2)) / np.sqrt(2 * np.pi)

    # integrate over the quantile so the heavy right tail is finite; upper half via isf for precision
    lo = integrate.quad(lambda u: inner(ig.ppf(u)), 0, 0.5, limit=400, epsabs=1e-12)[0]
    hi = integrate.quad(lambda v: inner(ig.isf(v)), 0, 0.5, limit=400, epsabs=1e-12)[0]
    val = lo + hi
    return val


def test_expected_log_likelihood_vs_quadrature():
    s = VariationalState(np.ones((1, 1)), np.ones(1), np.ones(1), np.array([[0.7]]), np.array([3.0]),
                         np.array([5.0]), np.array([[2.5]]))
    x = 1.9
    oracle = _nig_expect(lambda mu, s2: stats.norm.logpdf(x, mu, np.sqrt(s2)), 0.7, 3.0, 5.0, 2.5)
    assert dpmm.expected_log_likelihood(np.array([x]), 0, s) == pytest.approx(oracle, rel=1e-7)


def test_elbo_terms_vs_quadrature_oracle():
    # D = 1, N = 2, K = 2 hand-set state; every term by numeric integration
    prior = StickPrior(1.5, BaseNIW(np.array([0.2]), 2.0, 4.0, np.array([1.5])))
    obs = np.array([[-0.4], [1.3]])
    s = VariationalState(
        np.array([[0.8, 0.2], [0.35, 0.65]]), np.array([2.2, 1.0]), np.array([2.9, 1.5]),
        np.array([[-0.1], [0.9]]), np.array([3.1, 2.6]), np.array([5.3, 4.6]), np.array([[2.0], [1.2]]),
    )
    terms = dpmm.elbo_terms(s, obs, prior)
    r = s.resp
    a, b = s.stick_a[0], s.stick_b[0]
    qb = stats.beta(a, b)
    e_log_b = integrate.quad(lambda x: np.log(x) * qb.pdf(x), 0, 1, epsabs=1e-13, limit=200)[0]
    e_log_1mb = integrate.quad(lambda x: np.log1p(-x) * qb.pdf(x), 0, 1, epsabs=1e-13, limit=200)[0]
    e_log_pi = np.array([e_log_b, e_log_1mb])

    loglik = 0.0
    p_theta = 0.0
    q_theta = 0.0
    for k in range(2):
        m, kap, nu, psi = s.m[k, 0], s.kappa[k], s.nu[k], s.psi[k, 0]
        for n in range(2):
            x = obs[n, 0]
            loglik += r[n, k] * _nig_expect(lambda mu, s2: stats.norm.logpdf(x, mu, np.sqrt(s2)), m, kap, nu, psi)

        def log_prior(mu, s2):
            return (stats.invgamma.logpdf(s2, 2.0, scale=0.75)
                    + stats.norm.logpdf(mu, 0.2, np.sqrt(s2 / 2.0)))

        def log_q(mu, s2, m=m, kap=kap, nu=nu, psi=psi):
            return stats.invgamma.logpdf(s2, nu / 2, scale=psi / 2) + stats.norm.logpdf(mu, m, np.sqrt(s2 / kap))

        p_theta += _nig_expect(log_prior, m, kap, nu, psi)
        q_theta += _nig_expect(log_q, m, kap, nu, psi)

    oracle = {
        "log_lik": loglik,
        "log_p_z": float(r.sum(axis=0) @ e_log_pi),
        "log_p_beta": integrate.quad(lambda x: stats.beta.logpdf(x, 1, 1.5) * qb.pdf(x), 0, 1,
                                     epsabs=1e-13, limit=200)[0],
        "log_p_theta": p_theta,
        "log_q_z": float(np.sum(r * np.log(r))),
        "log_q_beta": -qb.entropy(),
        "log_q_theta": q_theta,
    }
    for key, value in oracle.items():
        assert terms[key] == pytest.approx(value, rel=1e-6, abs=1e-9), key
    total = (oracle["log_lik"] + oracle["log_p_z"] + oracle["log_p_beta"] + oracle["log_p_theta"]
             - oracle["log_q_z"] - oracle["log_q_beta"] - oracle["log_q_theta"])
    assert dpmm.elbo(s, obs, prior) == pytest.approx(total, rel=1e-6)


def test_zero_responsibility_entropy_term():
    prior = make_prior(1)
    s = dpmm.init_state(np.array([[0.0], [1.0]]), prior, K=2)
    assert dpmm.elbo_terms(s, np.array([[0.0], [1.0]]), prior)["log_q_z"] == 0.0


# responsibilities

def test_single_component_responsibilities(rng):
    prior = make_prior(3)
    s = random_state(rng, 6, 3, 1, prior)
    out = dpmm.update_responsibilities(s, rng.normal(size=(6, 3)))
    np.testing.assert_array_equal(out.resp, 1.0)


def test_symmetric_modes_equidistant_observation():
    prior = make_prior(1)
    s = VariationalState(np.full((1, 2), 0.5), np.array([1.0, 1.0]), np.array([1.0, 1.0]),
                         np.array([[-1.0], [1.0]]), np.array([2.0, 2.0]), np.array([5.0, 5.0]),
                         np.array([[1.0], [1.0]]))
    # with a closed last stick equal weights need E[log beta_1] = E[log(1 - beta_1)]
    out = dpmm.update_responsibilities(s, np.array([[0.0]]))
    np.testing.assert_allclose(out.resp, [[0.5, 0.5]], atol=1e-9)


def test_responsibilities_brute_force(rng):
    prior = make_prior(2)
    s = random_state(rng, 3, 2, 2, prior)
    x = rng.normal(size=(3, 2))
    out = dpmm.update_responsibilities(s, x).resp
    from scipy.special import digamma
    a, b = s.stick_a, s.stick_b
    e_log_pi = [digamma(a[0]) - digamma(a[0] + b[0]), digamma(b[0]) - digamma(a[0] + b[0])]
    expected = np.empty((3, 2))
    for n in range(3):
        for k in range(2):
            t = 0.0
            for d in range(2):
                e_log_var = np.log(s.psi[k, d] / 2) - digamma(s.nu[k] / 2)
                quad = s.nu[k] / s.psi[k, d] * (x[n, d] - s.m[k, d]) ** 2 + 1 / s.kappa[k]
                t += -0.5 * (np.log(2 * np.pi) + e_log_var + quad)
            expected[n, k] = np.exp(t + e_log_pi[k])
    expected /= expected.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


# global updates

def test_stick_update_examples():
    prior = make_prior(1, alpha=1.0)
    resp = np.zeros((10, 2))
    resp[:, 0] = 1
    s = dpmm.from_responsibilities(resp, np.zeros((10, 1)), prior)
    assert (s.stick_a[0], s.stick_b[0]) == (11, 1)
    assert s.stick_a[1] == 1  # empty mode keeps the prior
    prior = make_prior(1, alpha=0.7)
    s = dpmm.from_responsibilities(np.full((4, 2), 0.5), np.zeros((4, 1)), prior)
    assert s.stick_a[0] == pytest.approx(3) and s.stick_b[0] == pytest.approx(2.7)


def test_niw_update_examples(rng):
    prior = make_prior(3, rng=rng)
    resp = np.zeros((4, 2))
    resp[:, 0] = 1
    x = rng.normal(size=(4, 3))
    s = dpmm.from_responsibilities(resp, x, prior)
    np.testing.assert_array_equal(s.m[1], prior.base.m0)
    np.testing.assert_array_equal(s.psi[1], prior.base.psi0)
    assert s.kappa[1] == prior.base.kappa0 and s.nu[1] == prior.base.nu0
    one = dpmm.from_responsibilities(np.ones((1, 1)), x[:1], prior)
    np.testing.assert_allclose(one.m[0], (prior.base.kappa0 * prior.base.m0 + x[0]) / (prior.base.kappa0 + 1))


def niw_oracle(resp, obs, prior):
    """Weighted raw-moment form of the conjugate update, one scalar at a time."""
    base = prior.base
    N, D = obs.shape
    K = resp.shape[1]
    m = np.zeros((K, D))
    psi = np.zeros((K, D))
    kappa = np.zeros(K)
    nu = np.zeros(K)
    for k in range(K):
        w = 0.0
        for n in range(N):
            w += resp[n, k]
        kappa[k] = base.kappa0 + w
        nu[k] = base.nu0 + w
        for d in range(D):
            s1 = 0.0
            s2 = 0.0
            for n in range(N):
                s1 += resp[n, k] * obs[n, d]
                s2 += resp[n, k] * obs[n, d] ** 2
            m[k, d] = (base.kappa0 * base.m0[d] + s1) / kappa[k]
            psi[k, d] = base.psi0[d] + s2 + base.kappa0 * base.m0[d] ** 2 - kappa[k] * m[k, d] ** 2
    return m, kappa, nu, psi


def test_niw_update_matches_moment_oracle(rng):
    D, K = 5, 3
    prior = StickPrior(1.0, BaseNIW(rng.normal(size=D), 1.7, 4.0, rng.uniform(0.5, 2, D)))
    obs = rng.normal(size=(50, D))
    resp = rng.dirichlet(np.ones(K), size=50)
    s = dpmm.from_responsibilities(resp, obs, prior)
    m, kappa, nu, psi = niw_oracle(resp, obs, prior)
    np.testing.assert_allclose(s.m, m, atol=1e-8)
    np.testing.assert_allclose(s.psi, psi, atol=1e-8)
    np.testing.assert_allclose(s.kappa, kappa, atol=1e-8)
    np.testing.assert_allclose(s.nu, nu, atol=1e-8)


# CAVI

def test_cavi_elbo_monotone_over_sweeps(rng):
    obs = np.vstack([rng.normal(-3, 1, (30, 4)), rng.normal(3, 1, (30, 4))])
    prior = dpmm.default_prior(obs)
    s = random_state(rng, 60, 4, 6, prior)
    values = [dpmm.elbo(s, obs, prior)]
    for _ in range(20):
        s = dpmm.cavi_sweep(s, obs, prior)
        values.append(dpmm.elbo(s, obs, prior))
        dpmm.check_state(s, prior)
    diffs = np.diff(values)
    assert np.all(diffs >= -1e-8 * np.abs(values[:-1]))


def test_cavi_fixed_point(rng):
    obs = np.vstack([rng.normal(-5, 1, (20, 2)), rng.normal(5, 1, (20, 2))])
    prior = dpmm.default_prior(obs)
    s = dpmm.run_cavi(random_state(rng, 40, 2, 3, prior), obs, prior, 300)
    again = dpmm.cavi_sweep(s, obs, prior)
    for f in ("resp", "stick_a", "stick_b", "m", "kappa", "nu", "psi"):
        np.testing.assert_allclose(getattr(again, f), getattr(s, f), atol=1e-10)


def test_two_clusters_found_with_truncation_five(rng):
    obs = np.vstack([rng.normal(-10, 1, (50, 3)), rng.normal(10, 1, (50, 3))])
    prior = dpmm.default_prior(obs)
    s = dpmm.from_responsibilities(rng.dirichlet(np.ones(5), size=100), obs, prior)
    s = dpmm.run_cavi(s, obs, prior, 50)
    top2 = np.sort(s.counts)[-2:].sum()
    assert top2 / 100 > 0.99


def test_hard_assign():
    np.testing.assert_array_equal(dpmm.hard_assign(np.array([[0.2, 0.8]])), [1])
    np.testing.assert_array_equal(dpmm.hard_assign(np.array([[0.5, 0.5]])), [0])
    r = np.random.default_rng(1).dirichlet(np.ones(4), size=100)
    brute = []
    for row in r:
        best = 0
        for k in range(1, 4):
            if row[k] > row[best]:
                best = k
        brute.append(best)
    np.testing.assert_array_equal(dpmm.hard_assign(r), brute)


def test_relabeling_permutes_state_consistently(rng):
    prior = make_prior(3)
    obs = rng.normal(size=(12, 3))
    s = random_state(rng, 12, 3, 4, prior)
    order = [2, 0, 3, 1]
    p = s.permuted(order)
    np.testing.assert_array_equal(dpmm.hard_assign(p), np.argsort(order)[dpmm.hard_assign(s)])
    t, tp = dpmm.elbo_terms(s, obs, prior), dpmm.elbo_terms(p, obs, prior)
    # every term not touching the ordered sticks is label-invariant
    for key in ("log_lik", "log_p_theta", "log_q_z", "log_q_theta"):
        assert tp[key] == pytest.approx(t[key], rel=1e-12)
    np.testing.assert_allclose(dpmm.expected_log_lik_matrix(p, obs), dpmm.expected_log_lik_matrix(s, obs)[:, order])


def test_predictive_responsibilities_do_not_touch_state(rng):
    prior = make_prior(2)
    s = random_state(rng, 5, 2, 3, prior)
    before = s.copy()
    r = dpmm.predictive_responsibilities(s, rng.normal(size=(4, 2)))
    np.testing.assert_allclose(r.sum(axis=1), 1.0)
    np.testing.assert_array_equal(s.resp, before.resp)


def test_drop_components_renormalizes(rng):
    obs = rng.normal(size=(8, 2))
    prior = dpmm.default_prior(obs)
    s = random_state(rng, 8, 2, 3, prior)
    s.resp[0] = [0.0, 0.0, 1.0]
    out = dpmm.drop_components(s, [0, 1], obs, prior)
    assert out.K == 2
    dpmm.check_state(out, prior)


def test_snapshot_round_trip(tmp_path, rng):
    obs = rng.normal(size=(6, 3))
    prior = dpmm.default_prior(obs)
    s = random_state(rng, 6, 3, 2, prior)
    path = tmp_path / "state.npz"
    dpmm.save_state(path, s, prior)
    s2, prior2 = dpmm.load_state(path)
    for f in ("resp", "stick_a", "stick_b", "m", "kappa", "nu", "psi"):
        np.testing.assert_array_equal(getattr(s2, f), getattr(s, f))
    assert prior2.alpha == prior.alpha
    np.testing.assert_array_equal(prior2.base.psi0, prior.base.psi0)


def test_prior_validation():
    with pytest.raises(InvalidInputError):
        BaseNIW(np.zeros(1), 0.0, 3.0, np.ones(1))
    with pytest.raises(InvalidInputError):
        BaseNIW(np.zeros(1), 1.0, 1.0, np.ones(1))
    with pytest.raises(InvalidInputError):
        StickPrior(0.0, BaseNIW(np.zeros(1), 1.0, 3.0, np.ones(1)))


def test_default_prior_handles_constant_dimension():
    obs = np.column_stack([np.arange(5.0), np.full(5, 2.0)])
    prior = dpmm.default_prior(obs)
    assert np.all(prior.base.psi0 > 0)
