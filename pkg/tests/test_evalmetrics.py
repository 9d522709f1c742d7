"""Evaluation metrics: test LL, active units, rate/distortion, angle fit."""

import math

import numpy as np
import pytest

from helpers import StubModel, linear_gaussian_chain
from vhpvae.evalmetrics import test_loglik_iw as mean_loglik_iw
from vhpvae.evalmetrics import (
    ActiveUnitsReport,
    EvalReport,
    active_units,
    active_units_csv,
    angle_regression,
    circular_fit,
    circular_regression,
    eval_report_csv,
    loglik_iw_per_datum,
    rate_distortion,
    wrap_angle,
    worker_count,
)
from vhpvae.stochastic import DiagGaussian, VhpModel, iw_kl_bound

TWO_PI = 2.0 * math.pi


def small_model(seed=0, dim_x=4, dim_z=2, dim_zeta=2, hidden=(8,)):
    rng = np.random.default_rng(seed)
    return VhpModel.create(rng, dim_x=dim_x, dim_z=dim_z, dim_zeta=dim_zeta,
                           hidden=hidden)


def marginal_samples(n, seed):
    _, _, (m_x, s_x) = linear_gaussian_chain()
    rng = np.random.default_rng(seed)
    return m_x + np.sqrt(s_x) * rng.standard_normal((n, 2))


def constant_net(mean, log_std):
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)

    def net(x, binding=None):
        n = np.asarray(x).shape[0]
        return DiagGaussian(np.tile(mean, (n, 1)), np.tile(log_std, (n, 1)))

    return net


def identity_net(log_std):
    def net(x, binding=None):
        x = np.asarray(x, dtype=np.float64)
        return DiagGaussian(x.copy(), np.full_like(x, log_std))

    return net


def test_loglik_matches_closed_form_marginal():
    model, logpdf, _ = linear_gaussian_chain()
    x = marginal_samples(32, seed=5)
    truth = float(np.mean(logpdf(x)))
    estimate = mean_loglik_iw(model, x, s=5000, seed=0)
    assert abs(estimate - truth) <= 0.01 * abs(truth)


def test_loglik_single_sample_is_plain_weight():
    model, _, _ = linear_gaussian_chain()
    x = marginal_samples(5, seed=9)
    got = loglik_iw_per_datum(model, x, s=1, seed=42)
    children = np.random.SeedSequence(42).spawn(5)
    q = model.encoder(x)
    for i in range(5):
        rng = np.random.default_rng(children[i])
        z = q.mean[i:i + 1] + np.exp(q.log_std[i:i + 1]) \
            * rng.standard_normal((1, 2))
        prop = model.prior_encoder(z)
        zeta = prop.sample(rng.standard_normal((1, 2)))
        log_w = (model.decoder(z).log_prob(x[i:i + 1])
                 + model.prior_decoder(zeta).log_prob(z)
                 + np.sum(-0.5 * zeta * zeta - 0.5 * math.log(TWO_PI), axis=-1)
                 - DiagGaussian(q.mean[i:i + 1], q.log_std[i:i + 1]).log_prob(z)
                 - prop.log_prob(zeta))
        assert got[i] == pytest.approx(float(log_w[0]), rel=1e-12)


def test_loglik_nondecreasing_in_sample_count():
    model = small_model(seed=3, dim_x=3)
    x = np.random.default_rng(8).uniform(size=(1, 3))
    diffs = []
    for rep in range(256):
        high = loglik_iw_per_datum(model, x, s=4, seed=rep)[0]
        low = loglik_iw_per_datum(model, x, s=1, seed=10_000 + rep)[0]
        diffs.append(high - low)
    diffs = np.array(diffs)
    se = diffs.std(ddof=1) / math.sqrt(len(diffs))
    assert diffs.mean() >= -3.0 * se


def test_loglik_invalid_sample_count():
    model, _, _ = linear_gaussian_chain()
    with pytest.raises(ValueError):
        mean_loglik_iw(model, np.zeros((2, 2)), s=0)


def test_loglik_rejects_non_finite_weights():
    model, _, _ = linear_gaussian_chain()

    def bad_decoder(z, binding=None):
        z = np.asarray(z)
        return DiagGaussian(np.full((z.shape[0], 2), np.nan), np.zeros(2))

    broken = StubModel(2, 2, 2, model.encoder, bad_decoder,
                       model.prior_encoder, model.prior_decoder)
    with pytest.raises(ValueError, match="non-finite importance weight"):
        mean_loglik_iw(broken, np.zeros((2, 2)), s=3)


def test_worker_count_env_validation(monkeypatch):
    monkeypatch.delenv("VHP_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("VHP_THREADS", "4")
    assert worker_count() == 4
    monkeypatch.setenv("VHP_THREADS", "0")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.setenv("VHP_THREADS", "many")
    with pytest.raises(ValueError):
        worker_count()


def test_loglik_independent_of_thread_count(monkeypatch):
    model, _, _ = linear_gaussian_chain()
    x = marginal_samples(7, seed=2)
    monkeypatch.delenv("VHP_THREADS", raising=False)
    base = loglik_iw_per_datum(model, x, s=3, seed=1)
    monkeypatch.setenv("VHP_THREADS", "3")
    threaded = loglik_iw_per_datum(model, x, s=3, seed=1)
    assert np.array_equal(base, threaded)


def test_active_units_zero_for_standard_normal_inner_posterior():
    stub = StubModel(4, 2, 3,
                     constant_net(np.zeros(2), np.zeros(2)),
                     constant_net(np.zeros(4), np.zeros(4)),
                     constant_net(np.zeros(3), np.zeros(3)),
                     constant_net(np.zeros(2), np.zeros(2)))
    report = active_units(stub, np.zeros((6, 4)))
    assert np.array_equal(report.values, np.zeros(3))
    assert report.active == 0
    assert sorted(report.dims) == [0, 1, 2]


def test_active_units_analytic_single_dimension():
    stub = StubModel(4, 2, 3,
                     constant_net(np.zeros(2), np.zeros(2)),
                     constant_net(np.zeros(4), np.zeros(4)),
                     constant_net([1.0, 0.0, 0.0], np.zeros(3)),
                     constant_net(np.zeros(2), np.zeros(2)))
    report = active_units(stub, np.zeros((5, 4)))
    assert report.dims[0] == 0
    assert report.values[0] == pytest.approx(0.5, rel=1e-12)
    assert np.array_equal(report.values[1:], np.zeros(2))
    assert report.active == 1


def test_active_units_matches_monte_carlo_oracle():
    model = small_model(seed=11, dim_x=4, dim_zeta=3)
    x = np.random.default_rng(0).uniform(size=(6, 4))
    report = active_units(model, x, seed=7)
    by_dim = {d: v for d, v in zip(report.dims, report.values)}

    rng = np.random.default_rng(7)
    q = model.encoder(x)
    z = q.sample(rng.standard_normal((6, model.dim_z)))
    prop = model.prior_encoder(z)
    mc_rng = np.random.default_rng(123)
    m = 40_000
    eps = mc_rng.standard_normal((m, 6, 3))
    zeta = prop.mean + np.exp(prop.log_std) * eps
    log_q = (-0.5 * ((zeta - prop.mean) * np.exp(-prop.log_std)) ** 2
             - prop.log_std - 0.5 * math.log(TWO_PI))
    log_p = -0.5 * zeta * zeta - 0.5 * math.log(TWO_PI)
    per_draw = np.mean(log_q - log_p, axis=1)
    mc = per_draw.mean(axis=0)
    se = per_draw.std(axis=0, ddof=1) / math.sqrt(m)
    for dim in range(3):
        assert abs(by_dim[dim] - mc[dim]) <= 3.0 * se[dim] + 1e-9


def test_active_units_permutation_equivariant():
    perm = [2, 0, 1]
    mean = np.array([0.3, 0.9, 0.1])
    log_std = np.array([0.2, -0.4, 0.0])
    base_stub = StubModel(4, 2, 3,
                          constant_net(np.zeros(2), np.zeros(2)),
                          constant_net(np.zeros(4), np.zeros(4)),
                          constant_net(mean, log_std),
                          constant_net(np.zeros(2), np.zeros(2)))
    perm_stub = StubModel(4, 2, 3,
                          constant_net(np.zeros(2), np.zeros(2)),
                          constant_net(np.zeros(4), np.zeros(4)),
                          constant_net(mean[perm], log_std[perm]),
                          constant_net(np.zeros(2), np.zeros(2)))
    data = np.zeros((4, 4))
    base = active_units(base_stub, data)
    moved = active_units(perm_stub, data)
    assert np.array_equal(base.values, moved.values)
    assert base.active == moved.active == 2
    assert base.dims == [1, 0, 2]
    assert moved.dims == [2, 1, 0]


def test_active_units_requires_data():
    model = small_model()
    with pytest.raises(ValueError):
        active_units(model, np.zeros((0, 4)))


def test_rate_distortion_perfect_autoencoder_constant():
    log_std = -1.0
    stub = StubModel(3, 3, 2,
                     identity_net(-20.0),
                     identity_net(log_std),
                     constant_net(np.zeros(2), np.zeros(2)),
                     constant_net(np.zeros(3), np.zeros(3)),
                     iw_samples=4)
    x = np.random.default_rng(4).uniform(size=(16, 3))
    report = rate_distortion(stub, x, s_loglik=8, seed=0)
    expected = 3 * (0.5 * math.log(TWO_PI) + log_std)
    assert report.distortion == pytest.approx(expected, abs=1e-6)
    assert report.k_rate == 4
    assert report.s_loglik == 8
    assert report.per_datum_nll.shape == (16,)


def test_rate_is_nonnegative_within_noise():
    model = small_model(seed=21)
    x = np.random.default_rng(3).uniform(size=(64, 4))
    q = model.encoder(x)
    z = q.sample(np.random.default_rng(5).standard_normal((64, 2)))
    rows = np.array([
        float(iw_kl_bound(model,
                          DiagGaussian(q.mean[i:i + 1], q.log_std[i:i + 1]),
                          z[i:i + 1], 8, np.random.default_rng(1000 + i)))
        for i in range(64)])
    se = rows.std(ddof=1) / math.sqrt(len(rows))
    assert rows.mean() >= -3.0 * se


def test_nll_bounded_by_rate_plus_distortion():
    model = small_model(seed=13)
    x = np.random.default_rng(17).uniform(size=(48, 4))
    report = rate_distortion(model, x, s_loglik=256, seed=2)
    se = report.per_datum_nll.std(ddof=1) / math.sqrt(48)
    assert report.mean_nll <= report.distortion + report.rate + 3.0 * se + 1e-9


def test_rate_distortion_deterministic_by_seed():
    model = small_model(seed=1)
    x = np.random.default_rng(2).uniform(size=(10, 4))
    rep1 = rate_distortion(model, x, s_loglik=16, seed=9)
    rep2 = rate_distortion(model, x, s_loglik=16, seed=9)
    rep3 = rate_distortion(model, x, s_loglik=16, seed=10)
    assert np.array_equal(rep1.per_datum_nll, rep2.per_datum_nll)
    assert rep1.rate == rep2.rate
    assert rep1.distortion == rep2.distortion
    assert not np.array_equal(rep1.per_datum_nll, rep3.per_datum_nll)


def test_eval_report_rejects_non_finite_values():
    with pytest.raises(ValueError):
        EvalReport(np.array([1.0, np.inf]), 1.0, 0.5, 0.5, 4, 4)


def test_wrap_angle_range():
    x = np.linspace(-12.0, 12.0, 97)
    w = wrap_angle(x)
    assert np.all(w >= -math.pi) and np.all(w < math.pi)
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(TWO_PI + 0.25) == pytest.approx(0.25, abs=1e-12)


def test_circular_regression_identity_latents():
    rng = np.random.default_rng(0)
    ang = rng.uniform(0.0, TWO_PI, size=200)
    z = 1.7 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    assert circular_regression(z, ang) < 1e-9


def test_circular_fit_recovers_sign_offset_and_centre():
    rng = np.random.default_rng(8)
    ang = rng.uniform(0.0, TWO_PI, size=300)
    phi = -(ang - 0.6)  # latents traverse the circle backwards, shifted
    z = np.array([3.0, -2.0]) + 1.7 * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    s, c, centre, err = circular_fit(z, ang)
    assert s == -1.0
    assert abs(wrap_angle(c - 0.6)) < 1e-9
    assert np.max(np.abs(centre - [3.0, -2.0])) < 1e-9
    assert err < 1e-9
    recovered = wrap_angle(
        s * np.arctan2(z[:, 1] - centre[1], z[:, 0] - centre[0]) + c - ang)
    assert np.max(np.abs(recovered)) < 1e-9


def test_circular_regression_ignores_translation():
    rng = np.random.default_rng(12)
    ang = rng.uniform(0.0, TWO_PI, size=200)
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    assert circular_regression(ring + np.array([40.0, -7.0]), ang) < 1e-9


def test_circular_regression_absorbs_flip_and_offset():
    rng = np.random.default_rng(1)
    ang = rng.uniform(0.0, TWO_PI, size=200)
    flipped = -ang + math.pi
    z = np.stack([np.cos(flipped), np.sin(flipped)], axis=1)
    assert circular_regression(z, ang) < 1e-9


def test_circular_regression_uninformative_latents():
    rng = np.random.default_rng(2)
    n = 10_000
    ang = rng.uniform(0.0, TWO_PI, size=n)
    noise = rng.uniform(-math.pi, math.pi, size=n)
    z = np.stack([np.cos(noise), np.sin(noise)], axis=1)
    err = circular_regression(z, ang)
    assert abs(err - math.pi / 2.0) < 0.05


def test_circular_regression_orthogonal_invariance():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(100, 2))
    ang = rng.uniform(0.0, TWO_PI, size=100)
    base = circular_regression(z, ang)
    for trial in range(5):
        alpha = rng.uniform(0.0, TWO_PI)
        rot = np.array([[math.cos(alpha), -math.sin(alpha)],
                        [math.sin(alpha), math.cos(alpha)]])
        if trial % 2:
            rot = rot @ np.diag([1.0, -1.0])
        assert circular_regression(z @ rot.T, ang) == pytest.approx(
            base, abs=1e-9)


def test_circular_regression_input_validation():
    with pytest.raises(ValueError):
        circular_regression(np.zeros((4, 3)), np.zeros(4))
    with pytest.raises(ValueError):
        circular_regression(np.ones((4, 2)), np.array([0.0, 1.0, 2.0, 6.9]))
    with pytest.raises(ValueError):
        circular_regression(np.ones((4, 2)), np.array([0.0, -0.1, 2.0, 3.0]))


def test_angle_regression_uses_posterior_means():
    model = small_model(seed=5, dim_x=6)
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(30, 6))
    ang = rng.uniform(0.0, TWO_PI, size=30)
    direct = circular_regression(model.encoder(x).mean, ang)
    assert angle_regression(model, x, ang) == direct
    wide = small_model(seed=5, dim_x=6, dim_z=3)
    with pytest.raises(ValueError):
        angle_regression(wide, x, ang)


def test_eval_report_csv_round_trips():
    report = EvalReport(np.array([1.0, 2.0]), 1.5, 0.25, 1.25, 128, 16)
    text = eval_report_csv(report)
    lines = text.strip().split("\n")
    assert lines[0] == "metric,value"
    values = dict(line.split(",") for line in lines[1:])
    assert float(values["mean_nll"]) == 1.5
    assert float(values["rate"]) == 0.25
    assert float(values["distortion"]) == 1.25
    assert int(values["s_loglik"]) == 128
    assert int(values["k_rate"]) == 16


def test_active_units_csv_layout():
    report = ActiveUnitsReport(np.array([0.5, 0.002]), [1, 0], 1, 0.01)
    lines = active_units_csv(report).strip().split("\n")
    assert lines[0] == "dimension,expected_kl"
    assert lines[1] == "1,0.5"
    assert lines[2] == "0,0.002"
    assert lines[3] == "active,1"
