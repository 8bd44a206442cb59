import json

import numpy as np
import pytest

from pnrcam.conditioning import ConditioningRule, MeasurementVector
from pnrcam.errors import ConfigError, NumericalError, UndefinedStatisticError
from pnrcam.scene import builtin_scene, make_pattern_set, read_pgm
from pnrcam.tvmin import (SolverConfig, conjugate_gradient, quality_metrics, reconstruct,
                          save_reconstruction, shrink, total_variation, tv_adjoint, tv_gradient)


def problem(seed=0, name="block", n=32, frac=0.25):
    scene = builtin_scene(name, n, n, 1.0)
    q = make_pattern_set(n * n, int(frac * n * n), 0.5, seed)
    return scene, q, q.as_float() @ scene.s0


def nonincreasing(trace):
    t = np.asarray(trace)
    return bool(np.all(np.diff(t) <= 1e-9 * np.abs(t[:-1]) + 1e-12))


def test_gradient_adjoint():
    rng = np.random.default_rng(0)
    u = rng.standard_normal((7, 5))
    p = rng.standard_normal((2, 7, 5))
    assert np.sum(tv_gradient(u) * p) == pytest.approx(np.sum(u * tv_adjoint(p)), rel=1e-12)


def test_gradient_replicate_boundary():
    g = tv_gradient(np.arange(12.0).reshape(3, 4))
    assert np.all(g[0, :, -1] == 0) and np.all(g[1, -1, :] == 0)
    assert np.all(g[0, :, :-1] == 1) and np.all(g[1, :-1, :] == 4)
    assert total_variation(np.ones((4, 4))) == 0


def test_shrink_closed_form():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(1000) * 3
    t = 0.7
    expected = np.where(v > t, v - t, np.where(v < -t, v + t, 0.0))
    np.testing.assert_allclose(shrink(v, t), expected, atol=1e-12)
    # shrink(v, t) minimizes |w| + (w - v)^2 / (2 t) elementwise
    grid = np.linspace(-12, 12, 240001)
    for x in v[:20]:
        f = np.abs(grid) + (grid - x) ** 2 / (2 * t)
        assert abs(grid[np.argmin(f)] - shrink(np.array([x]), t)[0]) < 2e-4


def test_conjugate_gradient():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((30, 30))
    spd = a @ a.T + 30 * np.eye(30)
    b = rng.standard_normal(30)
    x, _ = conjugate_gradient(lambda v: spd @ v, b, np.zeros(30), 200, 1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(spd, b), rtol=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_exact_recovery(seed):
    scene, q, y = problem(seed)
    res = reconstruct(q, y, scene.shape)
    assert quality_metrics(res.s, scene.s0).correlation > 0.99
    assert nonincreasing(res.objective_trace)


def test_row_permutation_invariance():
    scene, q, y = problem(3, "hbar")
    perm = np.random.default_rng(0).permutation(q.m_rows)
    a = reconstruct(q, y, scene.shape, SolverConfig(max_outer_iters=60))
    b = reconstruct(q.take(perm), y[perm], scene.shape, SolverConfig(max_outer_iters=60))
    assert a.s.tobytes() == b.s.tobytes()


def test_scale_invariance():
    scene, q, y = problem(4)
    a = reconstruct(q, y, scene.shape, SolverConfig(max_outer_iters=50))
    b = reconstruct(q, 1e-3 * y, scene.shape, SolverConfig(max_outer_iters=50))
    np.testing.assert_allclose(b.s, 1e-3 * a.s, atol=1e-5 * np.abs(1e-3 * a.s).max())


def test_missing_rows_dropped():
    scene, q, y = problem(5)
    missing = np.zeros(q.m_rows, dtype=bool)
    missing[::7] = True
    yy = np.where(missing, np.nan, y)
    mv = MeasurementVector(yy, "conditional_mean_intensity", np.ones(q.m_rows), missing,
                           np.arange(q.m_rows), ConditioningRule())
    cfg = SolverConfig(max_outer_iters=40)
    a = reconstruct(q, mv, scene.shape, cfg)
    keep = np.flatnonzero(~missing)
    b = reconstruct(q.take(keep), y[keep], scene.shape, cfg)
    assert a.s.tobytes() == b.s.tobytes()


def test_noisy_trace_monotone():
    scene, q, y = problem(6, "checker")
    noisy = y + np.random.default_rng(0).normal(0, 0.2 * y.std(), y.size)
    res = reconstruct(q, noisy, scene.shape, SolverConfig(mu=2.0**10))
    assert nonincreasing(res.objective_trace)
    assert len(res.objective_trace) == res.iterations


def test_nonneg_projection():
    scene, q, y = problem(7)
    res = reconstruct(q, y, scene.shape, SolverConfig(nonneg=True, max_outer_iters=80))
    assert res.s.min() >= 0


def test_input_errors():
    scene, q, y = problem(0, n=8)
    with pytest.raises(ConfigError):
        reconstruct(q, y[:-1], scene.shape)
    with pytest.raises(ConfigError):
        reconstruct(q, y, (4, 4))
    bad = y.copy()
    bad[0] = np.inf
    with pytest.raises(NumericalError):
        reconstruct(q, bad, scene.shape)
    with pytest.raises(ConfigError):
        SolverConfig(mu=0)
    with pytest.raises(ConfigError):
        SolverConfig(boundary="periodic")


def test_quality_metrics():
    s0 = builtin_scene("block", 8, 8, 1.0).s0
    m = quality_metrics(3 * s0 + 1, s0)
    assert m.correlation == pytest.approx(1.0)
    assert m.mse == pytest.approx(0.0, abs=1e-20)
    assert m.image_snr == pytest.approx(4.0)
    with pytest.raises(UndefinedStatisticError):
        quality_metrics(np.ones(64), s0)


def test_save_reconstruction(tmp_path):
    scene, q, y = problem(1, n=16)
    res = reconstruct(q, y, scene.shape, SolverConfig(max_outer_iters=30))
    save_reconstruction(tmp_path / "rec", res, {"rule": "none"})
    img, maxval, _ = read_pgm(tmp_path / "rec.pgm")
    meta = json.loads((tmp_path / "rec.json").read_text())
    assert maxval == 65535 and img.min() == 0 and img.max() == 65535
    assert meta["rule"] == "none"
    back = meta["min"] + img / 65535 * (meta["max"] - meta["min"])
    np.testing.assert_allclose(back, res.image, atol=(meta["max"] - meta["min"]) / 65535)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "rec.csv", delimiter=","), res.image)
