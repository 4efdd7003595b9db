"""Benchmark tasks, pricing oracles, metrics, and the recurrent baseline.

Tasks bundle a market model with a payoff, an optional driver and
second-order residual, a bump-evaluable value proxy for curvature targets,
and whatever reference oracle exists (closed form or chunked Monte Carlo).

The portfolio-control preset is documented here in full since it is this
package's own construction: wealth w is steered by a feedback control pi
against a volatility factor v,

    dw = pi * mu_bar dt + pi * sigma0 dW1,   dv = kappa (theta - v) dt + xi dW2,

the simulation runs under the closed-form optimal policy of the quadratic
special case (terminal reward -a_T (w - w_target)^2), whose value function
-p(t) (w - w_target)^2 with p(t) = a_T exp(-(mu_bar/sigma0)^2 (T - t)) serves
as the oracle for (Y, Z, Gamma). The second-order residual is the
concavity-adjusted optimality gap of the simulated policy against the
Hamiltonian implied by the decoded derivatives; it vanishes identically on
the oracle and is violation-positive by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from . import ad
from .ad import Var
from .sde import MarketModel, PathBatch, black_scholes_basket, simulate_batch

_CONCAVITY_FLOOR = 1e-10
_POLICY_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# Closed-form oracles
# ---------------------------------------------------------------------------


def black_scholes_oracle(s0: float, strike: float, rate: float, sigma: float,
                         horizon: float) -> tuple[float, float, float]:
    """European call price, delta, and gamma."""
    if sigma <= 0 or horizon <= 0:
        raise ValueError("sigma and horizon must be positive")
    if s0 <= 0 or strike <= 0:
        # strike -> 0 limit: the call degenerates to the forward
        if strike <= 0:
            return s0, 1.0, 0.0
        raise ValueError("spot must be positive")
    srt = sigma * math.sqrt(horizon)
    d1 = (math.log(s0 / strike) + (rate + 0.5 * sigma * sigma) * horizon) / srt
    d2 = d1 - srt
    disc = math.exp(-rate * horizon)
    price = s0 * ndtr(d1) - strike * disc * ndtr(d2)
    delta = float(ndtr(d1))
    gamma = math.exp(-0.5 * d1 * d1) / (math.sqrt(2.0 * math.pi) * s0 * srt)
    return float(price), delta, float(gamma)


def geometric_asian_oracle(s0: float, strike: float, rate: float, sigma: float,
                           horizon: float, n_steps: Optional[int] = None) -> float:
    """Geometric-average Asian call under lognormal dynamics.

    The continuous average is lognormal with variance sigma^2 T / 3 and
    log-mean ln s0 + (r - sigma^2/2) T / 2. With ``n_steps`` given, the
    exact discretely-monitored variant over the uniform grid (including the
    start point) is returned instead, which removes monitoring bias when
    comparing against grid-sampled payoffs.
    """
    if horizon <= 0 or s0 <= 0 or strike < 0:
        raise ValueError("degenerate inputs")
    if n_steps is None:
        mu = math.log(s0) + 0.5 * (rate - 0.5 * sigma * sigma) * horizon
        var = sigma * sigma * horizon / 3.0
    else:
        n = n_steps
        idx = np.arange(n + 1)
        mean_t = horizon / 2.0  # average of the uniform grid incl. both ends
        sum_min = float(np.minimum.outer(idx, idx).sum()) * (horizon / n)
        mu = math.log(s0) + (rate - 0.5 * sigma * sigma) * mean_t
        var = sigma * sigma * sum_min / (n + 1) ** 2
    disc = math.exp(-rate * horizon)
    if var < 1e-16:
        return disc * max(math.exp(mu) - strike, 0.0)
    sd = math.sqrt(var)
    if strike == 0.0:
        return disc * math.exp(mu + 0.5 * var)
    d1 = (mu + var - math.log(strike)) / sd
    d2 = d1 - sd
    return disc * (math.exp(mu + 0.5 * var) * ndtr(d1) - strike * ndtr(d2))


# ---------------------------------------------------------------------------
# Payoffs
# ---------------------------------------------------------------------------


def asian_basket_payoff(batch: PathBatch, weights: np.ndarray, strike: float) -> np.ndarray:
    """Arithmetic-average basket call on the running grid average."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (batch.X.shape[-1],):
        raise ValueError("weight length must match state dimension")
    if not np.isclose(weights.sum(), 1.0):
        raise ValueError("weights must sum to 1")
    avg = batch.running_avg[:, -1] @ weights
    return np.maximum(avg - strike, 0.0)


def barrier_knockout_payoff(batch: PathBatch, strike: float, barrier_up: float,
                            weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Up-and-out call: zero once the (weighted) value touches the barrier
    at any grid point; discrete monitoring only."""
    d = batch.X.shape[-1]
    weights = np.full(d, 1.0 / d) if weights is None else np.asarray(weights, dtype=float)
    value = batch.X @ weights
    alive = value.max(axis=1) < barrier_up
    return np.maximum(value[:, -1] - strike, 0.0) * alive


def geometric_asian_payoff(batch: PathBatch, strike: float) -> np.ndarray:
    """Geometric average over all grid points of a scalar path."""
    logs = np.log(batch.X[:, :, 0])
    return np.maximum(np.exp(logs.mean(axis=1)) - strike, 0.0)


def european_call_payoff(batch: PathBatch, strike: float) -> np.ndarray:
    return np.maximum(batch.X[:, -1, 0] - strike, 0.0)


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


@dataclass
class Task:
    """A pricing or control problem the trainer can run end to end."""

    name: str
    model: MarketModel
    horizon: float
    n_steps: int
    payoff: Callable[[PathBatch], np.ndarray]
    rate: float = 0.0
    driver: Optional[Callable] = None       # (t, x, Y, Z, Gamma) -> Var
    hjb: Optional[Callable] = None          # (t, x, Y, Z, Gamma) -> Var
    proxy: Optional[Callable] = None        # (batch, n) -> evaluator(x) -> (B,)
    oracle_kind: str = "none"
    oracle_price: Optional[float] = None
    oracle_se: float = 0.0
    z_reference: Optional[Callable] = None      # (t, X) -> (M, m_w)
    gamma_reference: Optional[Callable] = None  # (t, X) -> (M, d, d)
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.model.dim


def _discount_driver(rate: float):
    if rate == 0.0:
        return None

    def driver(t, x, y, z, gamma):
        return ad.mul(y, -rate)

    return driver


def european_call_task(n_steps: int, s0=100.0, strike=100.0, sigma=0.2,
                       rate=0.0, horizon=1.0) -> Task:
    model = black_scholes_basket(1, s0=s0, mu=rate, sigma=sigma)
    price, delta, _ = black_scholes_oracle(s0, strike, rate, sigma, horizon)

    def z_ref(t, x):
        s = x[:, 0]
        out = np.zeros_like(s)
        tau = horizon - t
        if tau <= 1e-12:
            out = sigma * s * (s > strike)
        else:
            srt = sigma * np.sqrt(tau)
            d1 = (np.log(np.maximum(s, 1e-300) / strike) + 0.5 * srt * srt) / srt + rate * tau / srt
            out = sigma * s * ndtr(d1)
        return out[:, None]

    def gamma_ref(t, x):
        s = np.maximum(x[:, 0], 1e-12)
        tau = max(horizon - t, 1e-8)
        srt = sigma * np.sqrt(tau)
        d1 = (np.log(s / strike) + (rate + 0.5 * sigma * sigma) * tau) / srt
        return (np.exp(-0.5 * d1 * d1) / (np.sqrt(2 * np.pi) * s * srt))[:, None, None]

    def proxy(batch, n):
        tau = horizon - batch.grid[n]

        def evaluator(x):
            return np.exp(-rate * tau) * np.maximum(x[:, 0] - strike, 0.0)

        return evaluator

    return Task(
        name="european_call", model=model, horizon=horizon, n_steps=n_steps,
        payoff=lambda b: european_call_payoff(b, strike), rate=rate,
        driver=_discount_driver(rate), proxy=proxy,
        oracle_kind="closed_form", oracle_price=price,
        z_reference=z_ref, gamma_reference=gamma_ref,
        params={"s0": s0, "strike": strike, "sigma": sigma, "delta0": delta},
    )


def geometric_asian_task(n_steps: int, s0=100.0, strike=100.0, sigma=0.2,
                         rate=0.0, horizon=1.0) -> Task:
    model = black_scholes_basket(1, s0=s0, mu=rate, sigma=sigma)
    price = geometric_asian_oracle(s0, strike, rate, sigma, horizon, n_steps=n_steps)

    def proxy(batch, n):
        tau = horizon - batch.grid[n]
        seen = np.log(batch.X[:, : n + 1, 0]).sum(axis=1)
        remaining = batch.n_steps - n

        def evaluator(x):
            log_avg = (seen + remaining * np.log(np.maximum(x[:, 0], 1e-300))) / (batch.n_steps + 1)
            return np.exp(-rate * tau) * np.maximum(np.exp(log_avg) - strike, 0.0)

        return evaluator

    return Task(
        name="asian_geometric", model=model, horizon=horizon, n_steps=n_steps,
        payoff=lambda b: geometric_asian_payoff(b, strike), rate=rate,
        driver=_discount_driver(rate), proxy=proxy,
        oracle_kind="closed_form", oracle_price=price,
        params={"s0": s0, "strike": strike, "sigma": sigma},
    )


def asian_basket_task(dim: int, n_steps: int, s0=100.0, strike=100.0, sigma=0.2,
                      rho=0.3, rate=0.0, horizon=1.0) -> Task:
    model = black_scholes_basket(dim, s0=s0, mu=rate, sigma=sigma, rho=rho)
    weights = np.full(dim, 1.0 / dim)

    def proxy(batch, n):
        tau = horizon - batch.grid[n]
        avg_seen = batch.running_avg[:, n]
        remaining = batch.n_steps - n

        def evaluator(x):
            frozen = (avg_seen * (n + 1) + remaining * x) / (batch.n_steps + 1)
            return np.exp(-rate * tau) * np.maximum(frozen @ weights - strike, 0.0)

        return evaluator

    return Task(
        name=f"asian_basket_d{dim}", model=model, horizon=horizon, n_steps=n_steps,
        payoff=lambda b: asian_basket_payoff(b, weights, strike), rate=rate,
        driver=_discount_driver(rate), proxy=proxy,
        oracle_kind="mc_reference",
        params={"s0": s0, "strike": strike, "sigma": sigma, "rho": rho,
                "weights": weights},
    )


def barrier_task(n_steps: int, s0=100.0, strike=100.0, barrier=120.0, sigma=0.2,
                 rate=0.0, horizon=1.0) -> Task:
    if barrier <= s0:
        raise ValueError("up-and-out barrier must start above the spot")
    model = black_scholes_basket(1, s0=s0, mu=rate, sigma=sigma)

    def proxy(batch, n):
        tau = horizon - batch.grid[n]
        alive = batch.running_max[:, n, 0] < barrier

        def evaluator(x):
            ok = alive & (x[:, 0] < barrier)
            return np.exp(-rate * tau) * np.maximum(x[:, 0] - strike, 0.0) * ok

        return evaluator

    return Task(
        name="barrier_up_out", model=model, horizon=horizon, n_steps=n_steps,
        payoff=lambda b: barrier_knockout_payoff(b, strike, barrier), rate=rate,
        driver=_discount_driver(rate), proxy=proxy,
        oracle_kind="mc_reference",
        params={"s0": s0, "strike": strike, "sigma": sigma, "barrier": barrier},
    )


# ---------------------------------------------------------------------------
# Portfolio control (T3)
# ---------------------------------------------------------------------------


@dataclass
class PortfolioParams:
    """Coefficients of the controlled wealth / volatility-factor system."""

    mu_bar: float = 0.3
    sigma0: float = 0.5
    kappa: float = 1.0
    theta: float = 0.04
    xi: float = 0.2
    w0: float = 1.0
    v0: float = 0.04
    w_target: float = 0.0
    a_terminal: float = 1.0
    risk_aversion: float = 1.0  # exponential-utility variant only

    def lq_curvature(self, t: float, horizon: float) -> float:
        rate = (self.mu_bar / self.sigma0) ** 2
        return self.a_terminal * math.exp(-rate * (horizon - t))

    def lq_policy(self, w: np.ndarray) -> np.ndarray:
        return -self.mu_bar * (w - self.w_target) / self.sigma0**2

    def myopic_policy(self, w: np.ndarray) -> np.ndarray:
        return np.full_like(w, self.mu_bar / (self.risk_aversion * self.sigma0**2))


def _portfolio_model(pp: PortfolioParams, policy: Callable) -> MarketModel:
    def drift(t, summary):
        w, v = summary.state[:, 0], summary.state[:, 1]
        pi = policy(w)
        return np.stack([pi * pp.mu_bar, pp.kappa * (pp.theta - v)], axis=1)

    def diffusion(t, summary):
        w = summary.state[:, 0]
        pi = policy(w)
        out = np.zeros((w.shape[0], 2, 2))
        out[:, 0, 0] = pi * pp.sigma0
        out[:, 1, 1] = pp.xi
        return out

    return MarketModel(
        dim=2, brownian_dim=2, x0=np.array([pp.w0, pp.v0]),
        drift=drift, diffusion=diffusion, name="portfolio_control",
    )


def hjb_residual_t3(t, x: np.ndarray, y: Var, z: Var, gamma: Var,
                    pp: PortfolioParams, policy: Callable) -> Var:
    """Optimality gap of the simulated policy under the decoded derivatives.

    The control enters the Hamiltonian quadratically, H(pi) = A pi^2 / 2
    + B pi with A = sigma0^2 u_ww and B = mu_bar u_w (the vol factor is
    uncontrolled and uncorrelated here), so sup_pi H - H(pi_hat)
    = (B + A pi_hat)^2 / (-2A) once A < 0. States where the policy noise
    vanishes leave u_w unobservable through Z and are masked out.
    """
    w = np.asarray(x)[:, 0]
    pi = policy(w)
    scale = pi * pp.sigma0
    observable = np.abs(scale) >= _POLICY_FLOOR
    safe_scale = np.where(observable, scale, 1.0)

    u_w = ad.div(z[:, 0], safe_scale)
    a = ad.mul(gamma[:, 0, 0], pp.sigma0**2)
    a_neg = ad.minimum_const(a, -_CONCAVITY_FLOOR)
    b = ad.mul(u_w, pp.mu_bar)
    num = ad.square(ad.add(b, ad.mul(a_neg, pi)))
    gap = ad.div(num, ad.mul(a_neg, -2.0))
    return ad.mul(gap, observable.astype(float))


def portfolio_lq_task(n_steps: int, horizon: float = 1.0,
                      pp: Optional[PortfolioParams] = None) -> Task:
    """Quadratic special case with closed-form value, integrand, curvature."""
    pp = pp or PortfolioParams()
    model = _portfolio_model(pp, pp.lq_policy)

    def payoff(batch: PathBatch) -> np.ndarray:
        w = batch.X[:, -1, 0]
        return -pp.a_terminal * (w - pp.w_target) ** 2

    def z_ref(t, x):
        w = x[:, 0]
        p = pp.lq_curvature(t, horizon)
        z1 = 2.0 * p * pp.mu_bar * (w - pp.w_target) ** 2 / pp.sigma0
        return np.stack([z1, np.zeros_like(z1)], axis=1)

    def gamma_ref(t, x):
        p = pp.lq_curvature(t, horizon)
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = -2.0 * p
        return out

    def proxy(batch, n):
        def evaluator(x):
            return -pp.a_terminal * (x[:, 0] - pp.w_target) ** 2

        return evaluator

    def hjb(t, x, y, z, gamma):
        return hjb_residual_t3(t, x, y, z, gamma, pp, pp.lq_policy)

    p0 = pp.lq_curvature(0.0, horizon)
    return Task(
        name="portfolio_lq", model=model, horizon=horizon, n_steps=n_steps,
        payoff=payoff, hjb=hjb, proxy=proxy,
        oracle_kind="closed_form",
        oracle_price=-p0 * (pp.w0 - pp.w_target) ** 2,
        z_reference=z_ref, gamma_reference=gamma_ref,
        params={"portfolio": pp},
    )


def portfolio_exp_task(n_steps: int, horizon: float = 1.0,
                       pp: Optional[PortfolioParams] = None) -> Task:
    """Risk-sensitive variant: exponential utility under the myopic policy."""
    pp = pp or PortfolioParams()
    model = _portfolio_model(pp, pp.myopic_policy)

    def payoff(batch: PathBatch) -> np.ndarray:
        w = batch.X[:, -1, 0]
        return -np.exp(-pp.risk_aversion * (w - pp.w0))

    def proxy(batch, n):
        def evaluator(x):
            return -np.exp(-pp.risk_aversion * (x[:, 0] - pp.w0))

        return evaluator

    def hjb(t, x, y, z, gamma):
        return hjb_residual_t3(t, x, y, z, gamma, pp, pp.myopic_policy)

    return Task(
        name="portfolio_exp", model=model, horizon=horizon, n_steps=n_steps,
        payoff=payoff, hjb=hjb, proxy=proxy, oracle_kind="mc_reference",
        params={"portfolio": pp},
    )


_TASKS = {
    "european_call": european_call_task,
    "asian_geometric": geometric_asian_task,
    "asian_basket": asian_basket_task,
    "barrier_up_out": barrier_task,
    "portfolio_lq": portfolio_lq_task,
    "portfolio_exp": portfolio_exp_task,
}


def make_task(name: str, n_steps: int, **kwargs) -> Task:
    if name not in _TASKS:
        raise KeyError(f"unknown task '{name}'; have {sorted(_TASKS)}")
    return _TASKS[name](n_steps=n_steps, **kwargs)


# ---------------------------------------------------------------------------
# Monte Carlo reference
# ---------------------------------------------------------------------------


def mc_reference_price(task: Task, m_ref: int, n_ref: Optional[int] = None,
                       seed: int = 0, chunk: int = 100_000) -> tuple[float, float]:
    """Chunked antithetic Monte Carlo price with its standard error.

    Runs on the task's own grid by default so that references share the
    training discretisation.
    """
    n_ref = n_ref or task.n_steps
    total, sumsq, count = 0.0, 0.0, 0
    remaining, chunk_id = m_ref, 0
    disc = math.exp(-task.rate * task.horizon)
    while remaining > 0:
        m = min(chunk, remaining)
        m += m % 2  # antithetic needs even counts
        batch = simulate_batch(task.model, m, n_ref, task.horizon,
                               seed=int(np.random.SeedSequence((seed, chunk_id)).generate_state(1)[0]),
                               antithetic=True, with_logsig=False)
        values = disc * task.payoff(batch)
        total += values.sum()
        sumsq += (values * values).sum()
        count += m
        remaining -= m
        chunk_id += 1
    mean = total / count
    var = max(sumsq / count - mean * mean, 0.0)
    return float(mean), float(np.sqrt(var / count))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def tail_mean(values: np.ndarray, q: float) -> float:
    """Mean of the worst (1 - q) fraction of a sample."""
    values = np.sort(np.asarray(values, dtype=float).reshape(-1))
    k = max(1, math.ceil((1.0 - q) * values.size - 1e-12))
    return float(values[-k:].mean())


@dataclass
class MetricsReport:
    """Evaluation summary mirroring the benchmark table columns."""

    y0: float
    oracle_price: Optional[float] = None
    oracle_se: float = 0.0
    rpe_percent: Optional[float] = None
    abs_error: Optional[float] = None
    cvar_percent: dict = field(default_factory=dict)
    z_rmse: Optional[float] = None
    gamma_rmse: Optional[float] = None
    hjb_residual_rms: Optional[float] = None
    nan_rate_percent: float = 0.0
    time_per_epoch_s: Optional[float] = None
    peak_mem_gb: Optional[float] = None
    param_count: int = 0

    def to_flat_dict(self) -> dict:
        out = {
            "y0": self.y0, "oracle_price": self.oracle_price,
            "oracle_se": self.oracle_se, "rpe_percent": self.rpe_percent,
            "abs_error": self.abs_error, "z_rmse": self.z_rmse,
            "gamma_rmse": self.gamma_rmse,
            "hjb_residual_rms": self.hjb_residual_rms,
            "nan_rate_percent": self.nan_rate_percent,
            "time_per_epoch_s": self.time_per_epoch_s,
            "peak_mem_gb": self.peak_mem_gb, "param_count": self.param_count,
        }
        for q, v in self.cvar_percent.items():
            out[f"cvar_{q}"] = v
        return out


def compute_metrics(y0: float, terminal_mismatch: np.ndarray,
                    oracle_price: Optional[float] = None, oracle_se: float = 0.0,
                    cvar_grid: tuple[float, ...] = (0.95,),
                    z_errors: Optional[np.ndarray] = None,
                    gamma_errors: Optional[np.ndarray] = None,
                    hjb_values: Optional[np.ndarray] = None,
                    nan_events: int = 0, nan_total: int = 1,
                    time_per_epoch_s: Optional[float] = None,
                    peak_mem_gb: Optional[float] = None,
                    param_count: int = 0) -> MetricsReport:
    """Assemble the evaluation report from run artifacts.

    Tail numbers are means of |terminal mismatch| over the worst (1 - q)
    tail; with an oracle they are expressed as a percentage of its price.
    """
    report = MetricsReport(
        y0=y0, oracle_price=oracle_price, oracle_se=oracle_se,
        nan_rate_percent=100.0 * nan_events / max(nan_total, 1),
        time_per_epoch_s=time_per_epoch_s, peak_mem_gb=peak_mem_gb,
        param_count=param_count,
    )
    abs_mismatch = np.abs(terminal_mismatch)
    scale = abs(oracle_price) if oracle_price else None
    for q in cvar_grid:
        cv = tail_mean(abs_mismatch, q)
        report.cvar_percent[q] = 100.0 * cv / scale if scale else cv
    if oracle_price is not None:
        report.abs_error = abs(y0 - oracle_price)
        if oracle_price != 0.0:
            report.rpe_percent = 100.0 * report.abs_error / abs(oracle_price)
    if z_errors is not None:
        report.z_rmse = float(np.sqrt(np.mean(z_errors**2)))
    if gamma_errors is not None:
        report.gamma_rmse = float(np.sqrt(np.mean(gamma_errors**2)))
    if hjb_values is not None:
        clamped = np.maximum(hjb_values, 0.0)
        report.hjb_residual_rms = float(np.sqrt(np.mean(clamped**2)))
    return report


def discrete_rnn_baseline(config):
    """Train the gated-recurrent baseline under the shared protocol."""
    from . import train as train_mod  # local import; train orchestrates bench tasks

    cfg = config.replace(baseline="rnn")
    return train_mod.run_train(cfg)
