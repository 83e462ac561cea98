import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from noisyssl.gmm import DegenerateLossesError, fit_gmm_1d


def _percentile(sorted_vals, q):
    # linear interpolation between closest ranks
    pos = (len(sorted_vals) - 1) * q
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * (pos - lo)


def reference_em(values, max_iter=100, tol=1e-6, floor=1e-6):
    """Plain-Python EM, written loop by loop without numpy."""
    xs = [float(v) for v in values]
    lo, hi = min(xs), max(xs)
    xs = [(v - lo) / (hi - lo) for v in xs]
    n = len(xs)
    s = sorted(xs)
    mu = [_percentile(s, 0.1), _percentile(s, 0.9)]
    mean = sum(xs) / n
    var0 = max(sum((v - mean) ** 2 for v in xs) / n, floor)
    var = [var0, var0]
    pi = [0.5, 0.5]
    prev = None
    for _ in range(max_iter):
        resp, ll = [], 0.0
        for v in xs:
            dens = [pi[k] / math.sqrt(2 * math.pi * var[k]) * math.exp(-(v - mu[k]) ** 2 / (2 * var[k]))
                    for k in range(2)]
            tot = sum(dens)
            ll += math.log(tot)
            resp.append([d / tot for d in dens])
        ll /= n
        for k in range(2):
            nk = sum(r[k] for r in resp)
            pi[k] = nk / n
            mu[k] = sum(r[k] * v for r, v in zip(resp, xs)) / nk
            var[k] = max(sum(r[k] * (v - mu[k]) ** 2 for r, v in zip(resp, xs)) / nk, floor)
        if prev is not None and abs(ll - prev) < tol:
            break
        prev = ll
    post = []
    low = 0 if mu[0] < mu[1] else 1
    for v in xs:
        dens = [pi[k] / math.sqrt(2 * math.pi * var[k]) * math.exp(-(v - mu[k]) ** 2 / (2 * var[k]))
                for k in range(2)]
        post.append(dens[low] / sum(dens))
    return sorted(mu), post


def _two_clusters(rng, n=200):
    sigma = rng.uniform(0.01, 0.05)
    a = rng.uniform(0.0, 0.4)
    b = a + rng.uniform(5, 15) * sigma
    frac = rng.uniform(0.3, 0.7)
    na = int(n * frac)
    return np.concatenate([rng.normal(a, sigma, na), rng.normal(b, sigma, n - na)])


def test_matches_reference_em_on_random_cluster_sets():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        values = _two_clusters(rng)
        fit = fit_gmm_1d(values)
        ref_means, ref_post = reference_em(values)
        assert np.all(np.abs(np.sort(fit.means) - ref_means) < 0.01)
        assert np.max(np.abs(fit.clean_posterior - ref_post)) < 0.01
        assert np.all(np.diff(fit.history) >= -1e-12)


def test_well_separated_clusters():
    rng = np.random.default_rng(0)
    values = np.concatenate([rng.normal(0.1, 0.01, 500), rng.normal(0.9, 0.01, 500)])
    fit = fit_gmm_1d(values, normalize=False)
    assert np.allclose(np.sort(fit.means), [0.1, 0.9], atol=0.01)
    assert np.all(fit.clean_posterior[:500] > 0.99)
    assert np.all(fit.clean_posterior[500:] < 0.01)


def test_symmetric_input_gives_equal_weights():
    values = np.array([0.1] * 50 + [0.9] * 50)
    fit = fit_gmm_1d(values)
    assert np.allclose(fit.weights, 0.5, atol=0.01)


def test_two_point_case():
    fit = fit_gmm_1d([0.0, 1.0])
    assert np.allclose(np.sort(fit.means), [0.0, 1.0], atol=1e-3)
    assert fit.clean_posterior[0] > 0.5


def test_degenerate_and_tiny_inputs():
    with pytest.raises(DegenerateLossesError, match="degenerate"):
        fit_gmm_1d([0.3, 0.3, 0.3])
    with pytest.raises(ValueError):
        fit_gmm_1d([0.3])


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=3, max_size=60))
def test_fit_invariants(values):
    if max(values) - min(values) < 1e-9:
        return
    fit = fit_gmm_1d(values)
    assert abs(fit.weights.sum() - 1) < 1e-9
    assert np.all(fit.variances >= 1e-6)
    assert np.all((fit.clean_posterior >= 0) & (fit.clean_posterior <= 1))
    assert np.all(np.diff(fit.history) >= -1e-9)
    assert fit.iterations <= 100
