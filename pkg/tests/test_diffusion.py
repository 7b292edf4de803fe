import math

import numpy as np
import pytest

from urabound.diffusion import (
    ScoreModel,
    TrainHyper,
    TrainingError,
    _mlp_grad,
    analytic_gaussian_score,
    analytic_model,
    ancestral_sample,
    build_schedule,
    denoise,
    forward_sample,
    gaussian_eps_fn,
    linear_model,
    matched_schedule,
    noise_prediction_loss,
    train_score,
    training_samples,
)
from urabound.sysmodel import SystemConfig, block_rng, sample_channel_output, sample_y_marginal


def ls_slope(sigma2, alpha_bar):
    """Score slope minimizing the noise-prediction loss on N(0, sigma2 I) data."""
    return -1.0 / ((sigma2 - 1.0) * alpha_bar + 1.0)


def test_schedule_examples():
    s = build_schedule(2, 0.1)
    assert np.allclose(s.alpha_bars[1:], [0.9, 0.81], rtol=0, atol=1e-15)
    assert s.alpha_bars[0] == 1.0
    lin = build_schedule(1000, (1e-4, 0.02))
    assert lin.alpha_bars[-1] < 1e-4


def test_schedule_recursion_and_monotone():
    s = build_schedule(50, (1e-3, 0.3))
    for l in range(1, 51):
        assert s.alpha_bars[l] == (1.0 - s.betas[l - 1]) * s.alpha_bars[l - 1]
    assert np.all(np.diff(s.alpha_bars) < 0)


def test_schedule_rejects_bad_beta():
    for beta in (0.0, 1.0, -0.1, (0.1, 1.2)):
        with pytest.raises(ValueError):
            build_schedule(10, beta)
    with pytest.raises(ValueError):
        build_schedule(0, 0.1)


def test_matched_schedule_hits_target():
    s = matched_schedule(4.0, T=100)
    assert s.T == 100 and s.l_star == 100
    assert s.alpha_bar(100) == pytest.approx(0.8, rel=1e-12)


def test_forward_sample_examples():
    s = build_schedule(10, 0.05)
    x, eps = forward_sample(np.zeros(8), 4, s, seed=1)
    assert np.allclose(x, math.sqrt(1 - s.alpha_bar(4)) * eps)
    tiny = build_schedule(3, 1e-12)
    x0 = np.arange(5.0)
    x, _ = forward_sample(x0, 3, tiny, seed=2)
    assert np.allclose(x, x0, atol=1e-5)
    with pytest.raises(ValueError):
        forward_sample(x0, 0, s, seed=0)
    with pytest.raises(ValueError):
        forward_sample(x0, 11, s, seed=0)


def test_forward_sample_moments():
    s = build_schedule(20, 0.03)
    level = 10
    ab = s.alpha_bar(level)
    x0 = block_rng(5, 0).standard_normal((10**5, 8)) * math.sqrt(3.0)
    x, eps = forward_sample(x0, level, s, seed=9)
    assert np.allclose(x, math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps, atol=1e-14)
    target = ab * 3.0 + (1 - ab)
    count = x.shape[0]
    for j in range(8):
        col = x[:, j]
        assert abs(col.mean()) <= 3 * math.sqrt(target / count)
        assert abs(col.var() - target) <= 3 * target * math.sqrt(2.0 / count)


def test_analytic_score_examples():
    assert np.array_equal(analytic_gaussian_score(np.zeros(3), 2.0), np.zeros(3))
    assert np.allclose(analytic_gaussian_score(np.array([1.0, -2.0]), 1.0), [-1.0, 2.0])
    e1 = np.eye(4)[0]
    assert np.allclose(analytic_gaussian_score(e1, 5.0), -0.2 * e1)
    with pytest.raises(ValueError):
        analytic_gaussian_score(e1, 0.0)


def test_linear_with_matching_slope_reproduces_analytic():
    y = block_rng(0, 0).standard_normal((7, 6))
    a = analytic_model(5.0, 6)
    lin = linear_model(-1.0 / 5.0, 0.0, 6)
    assert np.allclose(a(y), lin(y), rtol=0, atol=1e-15)


def test_denoise_examples():
    y = block_rng(1, 0).standard_normal(9)
    assert np.allclose(denoise(analytic_model(1.0, 9), y), 0.0)
    y5 = np.zeros(6)
    y5[0] = 5.0
    out = denoise(analytic_model(5.0, 6), y5)
    assert np.allclose(out, 0.8 * y5)
    assert np.array_equal(denoise(linear_model(0.0, 0.0, 9), y), y)
    with pytest.raises(ValueError):
        denoise(analytic_model(5.0, 6), np.zeros(5))


def test_analytic_denoiser_is_best_linear_shrinkage():
    cfg = SystemConfig(ka=4, n=64, k=8, p=1.2, p_prime=1.0)
    ys, sums = [], []
    for seed in range(2000):
        s = sample_channel_output(cfg, seed)
        ys.append(s.y)
        sums.append(s.codewords.sum(axis=0))
    ys, sums = np.array(ys), np.array(sums)
    model = analytic_model(cfg.output_variance, cfg.n)
    mse_model = np.mean((denoise(model, ys) - sums) ** 2)
    grid = np.round(np.arange(0, 101) * 0.01, 2)
    mse = np.array([np.mean((a * ys - sums) ** 2) for a in grid])
    assert abs(grid[np.argmin(mse)] - 0.8) <= 0.011
    assert mse_model <= mse.min() * (1 + 1e-3)


def test_perfect_predictor_has_zero_loss():
    eps = block_rng(0, 1).standard_normal((10, 4))
    assert noise_prediction_loss(eps, eps) == 0.0


def test_linear_training_recovers_least_squares_slope():
    # raw N(0, 5 I) data at a level with abar = 0.8
    sigma2, n, count = 5.0, 16, 50_000
    data = block_rng(2, 0).standard_normal((count, n)) * math.sqrt(sigma2)
    sched = build_schedule(10, 1 - 0.8 ** (1 / 10))
    model, report = train_score("linear", data, sched, hyper=TrainHyper(epochs=20, seed=1))
    oracle = ls_slope(sigma2, sched.alpha_bar(10))
    assert model.params[0] == pytest.approx(oracle, rel=0.03)
    # fixed point of the training iteration agrees with the least-squares solution
    assert abs(model.params[0] - oracle) <= 1e-3
    assert len(report.loss_trace) == 20 and math.isfinite(report.final_loss)


def test_linear_training_matched_schedule_gives_channel_score():
    cfg = SystemConfig(ka=4, n=16, k=8, p=1.2, p_prime=1.0)
    ys, scale = training_samples(cfg, 50_000, seed=3)
    sched = matched_schedule(cfg.ka * cfg.p_prime)
    model, _ = train_score("linear", ys, sched, hyper=TrainHyper(seed=0), data_scale=scale)
    assert model.params[0] == pytest.approx(-1.0 / cfg.output_variance, rel=0.03)


def test_linear_bias_small_on_centered_data():
    # the least-squares bias on centered data is zero; what remains is Monte
    # Carlo error from the fresh training noise, about
    # sqrt(n / (1 - abar) / averaged samples) = 0.0063 with 40 averaged epochs
    data = block_rng(4, 0).standard_normal((50_000, 16)) * math.sqrt(5.0)
    data -= data.mean(axis=0)
    sched = build_schedule(10, 1 - 0.8 ** (1 / 10))
    model, _ = train_score("linear", data, sched, hyper=TrainHyper(epochs=80, seed=2))
    assert np.linalg.norm(model.params[1:]) <= 0.01


def test_training_is_deterministic():
    data = block_rng(6, 0).standard_normal((2000, 4))
    sched = build_schedule(5, 0.05)
    m1, r1 = train_score("linear", data, sched, hyper=TrainHyper(epochs=3, seed=5))
    m2, r2 = train_score("linear", data, sched, hyper=TrainHyper(epochs=3, seed=5))
    assert m1.to_json() == m2.to_json() and r1.loss_trace == r2.loss_trace


def test_training_errors():
    sched = build_schedule(5, 0.05)
    with pytest.raises(TrainingError):
        train_score("linear", np.zeros((1, 4)), sched)
    with pytest.raises(TrainingError):
        train_score("linear", np.zeros((0, 4)), sched)
    with pytest.raises(TrainingError):
        train_score("linear", np.ones((10, 4)), sched, hyper=TrainHyper(epochs=0))
    with pytest.raises(TrainingError):
        # a huge step size makes SGD blow up until the loss overflows
        train_score("linear", 1e3 * np.ones((64, 4)), sched, hyper=TrainHyper(epochs=50, lr=10.0))


def test_mlp_gradient_matches_finite_differences():
    rng = block_rng(7, 0)
    h = 5
    theta = rng.standard_normal(3 * h + 1)
    xl = rng.standard_normal((6, 3))
    eps = rng.standard_normal((6, 3))
    _, grad = _mlp_grad(theta, xl, eps)
    fd = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = 1e-6
        fd[i] = (_mlp_grad(theta + step, xl, eps)[0] - _mlp_grad(theta - step, xl, eps)[0]) / 2e-6
    assert np.allclose(grad, fd, rtol=1e-6, atol=1e-8)


def test_mlp_learns_gaussian_score():
    cfg = SystemConfig(ka=4, n=2, k=8, p=1.2, p_prime=1.0)
    ys, scale = training_samples(cfg, 50_000, seed=8)
    sched = matched_schedule(cfg.ka * cfg.p_prime)
    model, report = train_score("mlp", ys, sched, hyper=TrainHyper(seed=0), data_scale=scale)
    probe = np.array([1.0, 2.0])
    assert np.allclose(model(probe), -probe / 5.0, atol=0.05)
    assert report.sample_count == 50_000


def test_checkpoint_round_trip_bit_exact():
    data = block_rng(9, 0).standard_normal((500, 3))
    sched = build_schedule(5, 0.05)
    for kind in ("linear", "mlp"):
        m, _ = train_score(kind, data, sched, hyper=TrainHyper(epochs=2, seed=1, hidden=4))
        back = ScoreModel.from_json(m.to_json())
        assert back.to_json() == m.to_json()
        assert back.params.tobytes() == m.params.tobytes()
        assert back.checksum() == m.checksum()
    a = analytic_model(5.0, 3)
    assert ScoreModel.from_json(a.to_json()).to_json() == a.to_json()


def test_model_dimension_check():
    with pytest.raises(ValueError):
        linear_model(-0.2, 0.0, 4)(np.zeros(5))
    with pytest.raises(ValueError):
        ScoreModel(kind="linear", n=4, params=np.zeros(3))
    with pytest.raises(ValueError):
        ScoreModel(kind="bogus", n=4)


def test_ancestral_sampler_reaches_data_variance():
    data_var = 3.0
    sched = build_schedule(200, (1e-4, 0.05))
    start = block_rng(10, 0).standard_normal((20_000, 2))
    out = ancestral_sample(gaussian_eps_fn(data_var, sched), sched, start, seed=3)
    assert out.var() == pytest.approx(data_var, rel=0.05)


def test_training_samples_scale():
    cfg = SystemConfig(ka=4, n=8, k=8, p=1.2, p_prime=1.0)
    ys, scale = training_samples(cfg, 10, seed=0)
    assert scale == pytest.approx(math.sqrt(5.0))
    assert np.array_equal(ys, sample_y_marginal(cfg, 10, seed=0))
