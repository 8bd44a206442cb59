import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pnrcam.conditioning import ConditioningRule
from pnrcam.photon_model import DetectorParams, joint_pnd, marginal_a
from pnrcam.scene import SceneImage, SensingMatrix, pattern_means
from pnrcam.tvmin import shrink, tv_adjoint, tv_gradient

unit = st.floats(0.0, 1.0)
params = st.builds(DetectorParams, unit, unit, st.floats(0.0, 2.0), st.floats(0.0, 2.0),
                   st.floats(0.0, math.pi / 2))
n_bars = st.floats(0.0, 3.0)


@settings(max_examples=40, deadline=None)
@given(n_bars, params)
def test_joint_is_a_distribution(n_bar, p):
    j = joint_pnd(n_bar, p)
    assert np.all(j.probs >= 0)
    assert abs(j.probs.sum() + j.truncation_mass - 1) < 1e-9
    assert j.truncation_mass < 1e-8


@settings(max_examples=40, deadline=None)
@given(n_bars, params)
def test_swapping_arms_transposes(n_bar, p):
    a = joint_pnd(n_bar, p, 25).probs
    b = joint_pnd(n_bar, p.swapped(), 25).probs
    np.testing.assert_allclose(a.T, b, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(n_bars, params)
def test_arm_a_mean(n_bar, p):
    mean = marginal_a(joint_pnd(n_bar, p)).mean()
    expected = p.eta_a * n_bar * math.cos(p.theta) ** 2 + p.nu_a
    assert abs(mean - expected) < 1e-7 * (1 + expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1),
       st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_pattern_means_linear(w, h, m, seed, a, b):
    rng = np.random.default_rng(seed)
    q = SensingMatrix(rng.integers(0, 2, (m, w * h)))
    s1, s2 = rng.random(w * h), rng.random(w * h)
    combined = pattern_means(q, SceneImage(w, h, a * s1 + b * s2)).n_bar
    parts = a * pattern_means(q, SceneImage(w, h, s1)).n_bar + b * pattern_means(q, SceneImage(w, h, s2)).n_bar
    np.testing.assert_allclose(combined, parts, rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.integers(1, 50), elements=st.floats(-1e3, 1e3)), st.floats(1e-6, 1e2))
def test_shrink_minimizes_prox(v, t):
    w = shrink(v, t)
    assert np.all(np.abs(w) <= np.abs(v) + 1e-12)
    obj = lambda u: np.abs(u) + (u - v) ** 2 / (2 * t)
    for eps in (1e-4, -1e-4):
        assert np.all(obj(w) <= obj(w + eps) + 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_gradient_adjoint(h, w, seed):
    rng = np.random.default_rng(seed)
    u, p = rng.normal(size=(h, w)), rng.normal(size=(2, h, w))
    assert abs(np.sum(tv_gradient(u) * p) - np.sum(u * tv_adjoint(p))) < 1e-9


@given(st.sampled_from(["post", "sub", "joint", "none"]), st.integers(0, 99), st.integers(0, 99))
def test_rule_text_round_trip(mode, n, m):
    rule = ConditioningRule(mode, 0 if mode == "none" else n, m if mode == "joint" else 0)
    assert ConditioningRule.parse(str(rule)) == rule
