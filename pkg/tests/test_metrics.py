import math

import numpy as np
import pytest
from hypothesis import given, strategies as hs

from dpmm_rul import datagen
from dpmm_rul.errors import InvalidInputError
from dpmm_rul.metrics import avg_pairwise_similarity, cosine_similarity, nmi, rmse


def brute_nmi(a, b):
    """Contingency-table NMI with the arithmetic-mean normalizer."""
    n = len(a)
    ca, cb = sorted(set(a)), sorted(set(b))
    table = {(x, y): 0 for x in ca for y in cb}
    for x, y in zip(a, b):
        table[x, y] += 1
    pa = {x: sum(table[x, y] for y in cb) / n for x in ca}
    pb = {y: sum(table[x, y] for x in ca) / n for y in cb}
    mi = 0.0
    for (x, y), c in table.items():
        if c:
            p = c / n
            mi += p * math.log(p / (pa[x] * pb[y]))
    ha = -sum(p * math.log(p) for p in pa.values())
    hb = -sum(p * math.log(p) for p in pb.values())
    if ha == 0 or hb == 0:
        return 0.0
    return mi / ((ha + hb) / 2)


def test_nmi_examples():
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)
    assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
    assert brute_nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)
    assert brute_nmi([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
    assert nmi([0, 0, 0], [0, 1, 2]) == 0.0
    with pytest.raises(InvalidInputError):
        nmi([0, 1], [0])
    with pytest.raises(InvalidInputError):
        nmi([], [])


def test_nmi_matches_contingency_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(2, 60))
        a, b = rng.integers(0, 4, n), rng.integers(0, 5, n)
        assert nmi(a, b) == pytest.approx(brute_nmi(a.tolist(), b.tolist()), abs=1e-10)


@given(hs.lists(hs.tuples(hs.integers(0, 3), hs.integers(0, 3)), min_size=2, max_size=40))
def test_nmi_symmetric_and_relabel_invariant(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12)
    relabel = np.array([7, 3, 9, 1])
    assert nmi(relabel[a], b) == pytest.approx(nmi(a, b), abs=1e-12)


def test_rmse():
    assert rmse([1, 2], [1, 2]) == 0
    assert rmse([0, 0], [3, 4]) == pytest.approx(3.5355339059327378)
    assert rmse([4, 0], [3, 0]) == rmse([0, 4], [0, 3])
    with pytest.raises(InvalidInputError):
        rmse([1], [1, 2])


def test_cosine():
    u = np.array([1.0, -2.0, 3.0])
    assert cosine_similarity(u, u) == pytest.approx(1.0)
    assert cosine_similarity(u, -u) == pytest.approx(-1.0)
    a, b = datagen.DEFAULT_MODES[0].trend_signs, datagen.DEFAULT_MODES[1].trend_signs
    assert cosine_similarity(a, b) == 0.0
    assert avg_pairwise_similarity([u, u, u]) == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        cosine_similarity(np.zeros(3), u)
