"""Benchmark tests: payoffs, closed-form oracles, Monte Carlo cross-checks,
the portfolio-control residual against its quadratic-case oracle, and
metric conventions."""

import numpy as np
import pytest

from sigbsde import bench
from sigbsde.ad import Tape
from sigbsde.bench import (
    PortfolioParams,
    asian_basket_payoff,
    barrier_knockout_payoff,
    black_scholes_oracle,
    compute_metrics,
    geometric_asian_oracle,
    hjb_residual_t3,
    make_task,
    mc_reference_price,
    tail_mean,
)
from sigbsde.sde import simulate_batch


def make_batch_from_values(values):
    """PathBatch stub for a single scalar path given at grid points."""
    from sigbsde.sde import PathBatch

    x = np.asarray(values, dtype=float)[None, :, None]
    n = x.shape[1] - 1
    avg = np.cumsum(x, axis=1) / np.arange(1, n + 2)[None, :, None]
    return PathBatch(
        X=x, dW=np.zeros((1, n, 1)), grid=np.linspace(0, 1, n + 1), dt=1.0 / n,
        running_avg=avg,
        running_max=np.maximum.accumulate(x, axis=1),
        running_min=np.minimum.accumulate(x, axis=1),
    )


# ---------------------------------------------------------------------------
# Payoffs
# ---------------------------------------------------------------------------


def test_asian_payoff_simple_average():
    batch = make_batch_from_values([100.0, 110.0, 120.0])
    got = asian_basket_payoff(batch, np.array([1.0]), 100.0)
    assert got[0] == pytest.approx(10.0)


def test_asian_payoff_clamps_at_zero():
    batch = make_batch_from_values([100.0, 90.0, 80.0])
    assert asian_basket_payoff(batch, np.array([1.0]), 100.0)[0] == 0.0


def test_asian_payoff_two_legs_constant():
    from sigbsde.sde import PathBatch

    x = np.full((1, 4, 2), 100.0)
    batch = PathBatch(
        X=x, dW=np.zeros((1, 3, 2)), grid=np.linspace(0, 1, 4), dt=1 / 3,
        running_avg=x.copy(), running_max=x.copy(), running_min=x.copy(),
    )
    got = asian_basket_payoff(batch, np.array([0.5, 0.5]), 90.0)
    assert got[0] == pytest.approx(10.0)


def test_asian_payoff_validates_weights():
    batch = make_batch_from_values([100.0, 100.0])
    with pytest.raises(ValueError):
        asian_basket_payoff(batch, np.array([0.5, 0.5]), 100.0)
    with pytest.raises(ValueError):
        asian_basket_payoff(batch, np.array([0.7]), 100.0)


def test_barrier_payoff_survives_below_barrier():
    batch = make_batch_from_values([100.0, 119.0, 110.0])
    assert barrier_knockout_payoff(batch, 100.0, 120.0)[0] == pytest.approx(10.0)


def test_barrier_payoff_knocked_out():
    batch = make_batch_from_values([100.0, 120.0, 110.0])
    assert barrier_knockout_payoff(batch, 100.0, 120.0)[0] == 0.0


def test_barrier_payoff_out_of_money():
    batch = make_batch_from_values([100.0, 105.0, 95.0])
    assert barrier_knockout_payoff(batch, 100.0, 120.0)[0] == 0.0


def test_barrier_below_vanilla_pathwise():
    model = make_task("barrier_up_out", n_steps=25).model
    batch = simulate_batch(model, 2000, 25, 1.0, seed=3, with_logsig=False)
    barrier = barrier_knockout_payoff(batch, 100.0, 120.0)
    vanilla = np.maximum(batch.X[:, -1, 0] - 100.0, 0.0)
    assert np.all(barrier <= vanilla + 1e-12)


# ---------------------------------------------------------------------------
# Closed-form oracles
# ---------------------------------------------------------------------------


def test_black_scholes_reference_values():
    price, delta, gamma = black_scholes_oracle(100.0, 100.0, 0.0, 0.2, 1.0)
    assert price == pytest.approx(7.9656, abs=1e-3)
    assert delta == pytest.approx(0.5398, abs=1e-4)
    assert gamma == pytest.approx(0.01985, abs=1e-4)


def test_black_scholes_deterministic_limit():
    price, _, _ = black_scholes_oracle(110.0, 100.0, 0.0, 1e-8, 1.0)
    assert price == pytest.approx(10.0, abs=1e-6)


def test_black_scholes_zero_strike():
    price, delta, _ = black_scholes_oracle(100.0, 0.0, 0.0, 0.2, 1.0)
    assert price == pytest.approx(100.0)
    assert delta == 1.0


def test_black_scholes_rejects_degenerate():
    with pytest.raises(ValueError):
        black_scholes_oracle(100.0, 100.0, 0.0, -0.1, 1.0)
    with pytest.raises(ValueError):
        black_scholes_oracle(100.0, 100.0, 0.0, 0.2, 0.0)


def test_geometric_asian_zero_vol_limit():
    assert geometric_asian_oracle(110.0, 100.0, 0.0, 1e-9, 1.0) == pytest.approx(10.0, abs=1e-6)
    assert geometric_asian_oracle(90.0, 100.0, 0.0, 1e-9, 1.0) == 0.0


def test_geometric_asian_far_strike():
    assert geometric_asian_oracle(100.0, 1e7, 0.0, 0.2, 1.0) < 1e-8


def test_geometric_asian_below_european():
    # averaging reduces effective volatility, so the Asian call is cheaper
    geo = geometric_asian_oracle(100.0, 100.0, 0.0, 0.2, 1.0)
    eur = black_scholes_oracle(100.0, 100.0, 0.0, 0.2, 1.0)[0]
    assert 0.0 < geo < eur


def test_geometric_asian_discrete_converges_to_continuous():
    cont = geometric_asian_oracle(100.0, 100.0, 0.0, 0.2, 1.0)
    d50 = geometric_asian_oracle(100.0, 100.0, 0.0, 0.2, 1.0, n_steps=50)
    d800 = geometric_asian_oracle(100.0, 100.0, 0.0, 0.2, 1.0, n_steps=800)
    assert abs(d800 - cont) < abs(d50 - cont)


def test_geometric_asian_discrete_mc_oracle():
    # MC oracle under exact lognormal sampling at the grid points
    rng = np.random.default_rng(11)
    n, m, sigma, horizon = 20, 400_000, 0.25, 1.0
    dt = horizon / n
    z = rng.standard_normal((m, n))
    logs = np.cumsum((-0.5 * sigma**2) * dt + sigma * np.sqrt(dt) * z, axis=1)
    logs = np.concatenate([np.zeros((m, 1)), logs], axis=1) + np.log(100.0)
    payoff = np.maximum(np.exp(logs.mean(axis=1)) - 100.0, 0.0)
    got = geometric_asian_oracle(100.0, 100.0, 0.0, sigma, horizon, n_steps=n)
    se = payoff.std(ddof=1) / np.sqrt(m)
    assert abs(payoff.mean() - got) < 3 * se


# ---------------------------------------------------------------------------
# Monte Carlo reference
# ---------------------------------------------------------------------------


def test_mc_cross_checks_black_scholes():
    # cross-oracle consistency: fine grid keeps the Euler bias inside 3 SE
    task = make_task("european_call", n_steps=200)
    price, se = mc_reference_price(task, 200_000, seed=5)
    assert abs(price - task.oracle_price) < 3 * se + 0.02


def test_mc_zero_vol_deterministic():
    task = make_task("european_call", n_steps=10, s0=110.0, sigma=1e-12)
    price, se = mc_reference_price(task, 2_000, seed=1)
    assert price == pytest.approx(10.0, abs=1e-8)
    assert se < 1e-10


def test_mc_se_scaling():
    task = make_task("european_call", n_steps=10)
    _, se1 = mc_reference_price(task, 20_000, seed=2)
    _, se2 = mc_reference_price(task, 80_000, seed=2)
    assert se2 == pytest.approx(se1 / 2.0, rel=0.15)


def test_asian_below_european_mc():
    asian = make_task("asian_basket", n_steps=25, dim=1, rho=0.0)
    eur = make_task("european_call", n_steps=25)
    pa, sa = mc_reference_price(asian, 100_000, seed=7)
    pe, se = mc_reference_price(eur, 100_000, seed=7)
    assert pa < pe - 3 * (sa + se)


# ---------------------------------------------------------------------------
# Portfolio control
# ---------------------------------------------------------------------------


def test_lq_value_function_is_martingale():
    # MC oracle: under the optimal feedback policy the value process is a
    # martingale, so E[g(X_T)] equals u(0, x0) up to discretisation noise
    task = make_task("portfolio_lq", n_steps=100)
    price, se = mc_reference_price(task, 200_000, seed=9)
    assert abs(price - task.oracle_price) < 3 * se + 2e-3


def test_hjb_residual_zero_on_lq_oracle():
    # plugging the closed-form (Y, Z, Gamma) of the quadratic case into the
    # optimality-gap residual must give (numerically) exactly zero
    task = make_task("portfolio_lq", n_steps=10)
    pp = task.params["portfolio"]
    rng = np.random.default_rng(13)
    for t in (0.0, 0.4, 0.9):
        w = pp.w_target + np.concatenate([rng.uniform(0.2, 2.0, 8),
                                          -rng.uniform(0.2, 2.0, 8)])
        v = rng.uniform(0.01, 0.1, 16)
        x = np.stack([w, v], axis=1)
        y = -pp.lq_curvature(t, task.horizon) * (w - pp.w_target) ** 2
        z = task.z_reference(t, x)
        gamma = task.gamma_reference(t, x)
        tape = Tape()
        resid = task.hjb(t, x, tape.leaf(y), tape.leaf(z), tape.leaf(gamma))
        assert np.max(np.abs(resid.value)) < 1e-8


def test_hjb_residual_positive_off_optimum():
    task = make_task("portfolio_lq", n_steps=10)
    pp = task.params["portfolio"]
    x = np.array([[1.5, 0.04]])
    y = np.array([-0.5])
    z_true = task.z_reference(0.0, x)
    gamma = task.gamma_reference(0.0, x)
    tape = Tape()
    wrong_z = tape.leaf(z_true * 3.0)  # inconsistent derivatives
    resid = task.hjb(0.0, x, tape.leaf(y), wrong_z, tape.leaf(gamma))
    assert resid.value[0] > 1e-4


def test_hjb_residual_deterministic_and_finite():
    task = make_task("portfolio_lq", n_steps=10)
    rng = np.random.default_rng(17)
    x = np.stack([rng.uniform(0.5, 1.5, 32), rng.uniform(0.01, 0.1, 32)], axis=1)
    y = rng.normal(size=32)
    z = rng.normal(size=(32, 2))
    gamma = rng.normal(size=(32, 2, 2))
    vals = []
    for _ in range(2):
        tape = Tape()
        resid = task.hjb(0.3, x, tape.leaf(y), tape.leaf(z), tape.leaf(gamma))
        vals.append(resid.value.copy())
        assert np.all(np.isfinite(resid.value))
    assert np.array_equal(vals[0], vals[1])


def test_hjb_clamp_handles_nonconcave_gamma():
    task = make_task("portfolio_lq", n_steps=10)
    x = np.array([[1.5, 0.04]])
    tape = Tape()
    gamma = np.zeros((1, 2, 2))  # u_ww = 0: clamped to the concavity floor
    resid = task.hjb(0.0, x, tape.leaf(np.zeros(1)), tape.leaf(np.ones((1, 2))),
                     tape.leaf(gamma))
    assert np.isfinite(resid.value[0])
    assert resid.value[0] >= 0.0


def test_portfolio_exp_payoff_bounded_above():
    task = make_task("portfolio_exp", n_steps=10)
    batch = simulate_batch(task.model, 256, 10, 1.0, seed=21, with_logsig=False)
    assert np.all(task.payoff(batch) < 0.0)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def test_tail_mean_convention():
    assert tail_mean(np.array([1.0, 2.0, 3.0, 4.0]), 0.75) == 4.0
    assert tail_mean(np.array([1.0, 2.0, 3.0, 4.0]), 0.5) == 3.5
    assert tail_mean(np.array([5.0]), 0.99) == 5.0


def test_tail_mean_monotone_in_q():
    rng = np.random.default_rng(23)
    sample = rng.exponential(size=500)
    values = [tail_mean(sample, q) for q in (0.5, 0.75, 0.9, 0.95, 0.99)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


def test_compute_metrics_rpe():
    report = compute_metrics(102.0, np.array([1.0, -2.0]), oracle_price=100.0)
    assert report.rpe_percent == pytest.approx(2.0)
    assert report.abs_error == pytest.approx(2.0)
    exact = compute_metrics(100.0, np.zeros(4), oracle_price=100.0)
    assert exact.rpe_percent == 0.0


def test_compute_metrics_without_oracle():
    report = compute_metrics(5.0, np.array([1.0, 2.0, 3.0, 4.0]), cvar_grid=(0.75,))
    assert report.rpe_percent is None
    assert report.cvar_percent[0.75] == pytest.approx(4.0)  # absolute, not %


def test_compute_metrics_cvar_relative():
    report = compute_metrics(10.0, np.array([1.0, 2.0, 3.0, 4.0]),
                             oracle_price=10.0, cvar_grid=(0.75,))
    assert report.cvar_percent[0.75] == pytest.approx(40.0)  # 4/10 in percent


def test_compute_metrics_nan_rate():
    report = compute_metrics(1.0, np.zeros(2), nan_events=3, nan_total=600)
    assert report.nan_rate_percent == pytest.approx(0.5)
