"""Forward simulation of path-dependent diffusions on a uniform grid.

Euler-Maruyama stepping with per-path Brownian streams drawn from a
counter-based generator, running path functionals (average / extrema), and
per-step Lyndon coordinates of the time-augmented prefix path filled through
the vectorised log-signature accumulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import sigcore

_JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)


@dataclass
class PathSummary:
    """O(1)-memory prefix summary handed to path-dependent coefficients."""

    state: np.ndarray        # (M, d) current value
    running_avg: np.ndarray  # (M, d) mean over grid points 0..n
    running_max: np.ndarray
    running_min: np.ndarray
    step: int
    t: float


DriftFn = Callable[[float, PathSummary], np.ndarray]
DiffusionFn = Callable[[float, PathSummary], np.ndarray]


@dataclass
class MarketModel:
    """State dynamics dX = b(t, X_prefix) dt + sigma(t, X_prefix) dW."""

    dim: int
    brownian_dim: int
    x0: np.ndarray
    drift: DriftFn
    diffusion: DiffusionFn
    correlation: Optional[np.ndarray] = None  # (m_w, m_w) PSD
    name: str = "custom"

    def correlation_cholesky(self) -> np.ndarray:
        if self.correlation is None:
            return np.eye(self.brownian_dim)
        corr = np.asarray(self.correlation, dtype=float)
        if corr.shape != (self.brownian_dim, self.brownian_dim):
            raise ValueError("correlation shape mismatch")
        if not np.allclose(corr, corr.T, atol=1e-12):
            raise ValueError("correlation must be symmetric")
        chol, _ = robust_cholesky(corr[None])
        return chol[0]


@dataclass
class Sqrtm:
    """Lower-triangular factor of Sigma = sigma sigma^T, per path."""

    factor: np.ndarray  # (M, d, d)
    jitter: float = 0.0


@dataclass
class PathBatch:
    """A batch of simulated paths with increments and running functionals."""

    X: np.ndarray                 # (M, N+1, d)
    dW: np.ndarray                # (M, N, m_w)
    grid: np.ndarray              # (N+1,)
    dt: float
    running_avg: np.ndarray       # (M, N+1, d)
    running_max: np.ndarray
    running_min: np.ndarray
    logsig_coords: Optional[np.ndarray] = None  # (M, N+1, D)
    sig_depth: Optional[int] = None
    antithetic_pairing: Optional[np.ndarray] = None
    nan_events: list = field(default_factory=list)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def n_steps(self) -> int:
        return self.X.shape[1] - 1

    def summary_at(self, n: int) -> PathSummary:
        return PathSummary(
            state=self.X[:, n],
            running_avg=self.running_avg[:, n],
            running_max=self.running_max[:, n],
            running_min=self.running_min[:, n],
            step=n,
            t=float(self.grid[n]),
        )


def time_augment(increment: np.ndarray, dt: float) -> np.ndarray:
    """Prepend the time step to a state increment (batched on axis 0 if 2-D)."""
    inc = np.asarray(increment, dtype=float)
    if inc.ndim == 1:
        return np.concatenate([[dt], inc])
    head = np.full((*inc.shape[:-1], 1), dt)
    return np.concatenate([head, inc], axis=-1)


def brownian_increments(seed: int, n_paths: int, n_steps: int, dim: int,
                        antithetic: bool = False) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Standard-normal driver block from a counter-based Philox stream.

    Path i owns the fixed counter range [i*n_steps*dim, (i+1)*n_steps*dim),
    so the draw for (seed, path, step, channel) never depends on scheduling
    or on how many paths are simulated together. With antithetic pairing,
    path 2j+1 is the exact negation of path 2j.
    """
    bitgen = np.random.Philox(key=np.random.SeedSequence(seed).generate_state(2, np.uint64))
    rng = np.random.Generator(bitgen)
    if antithetic:
        if n_paths % 2:
            raise ValueError("antithetic sampling requires an even path count")
        half = rng.standard_normal((n_paths // 2, n_steps, dim))
        xi = np.empty((n_paths, n_steps, dim))
        xi[0::2] = half
        xi[1::2] = -half
        pairing = np.arange(n_paths)
        pairing[0::2] += 1
        pairing[1::2] -= 1
        return xi, pairing
    return rng.standard_normal((n_paths, n_steps, dim)), None


def robust_cholesky(mats: np.ndarray) -> tuple[np.ndarray, float]:
    """Batched lower Cholesky with a jitter ladder on PSD failure."""
    d = mats.shape[-1]
    eye = np.eye(d)
    for jitter in _JITTER_LADDER:
        try:
            return np.linalg.cholesky(mats + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError(
        f"cholesky failed after max jitter {_JITTER_LADDER[-1]:g}"
    )


def diffusion_factor(model: MarketModel, t: float, summary: PathSummary) -> Sqrtm:
    """Per-path factor of sigma sigma^T used to scale the Z head."""
    sigma = model.diffusion(t, summary)
    cov = sigma @ np.swapaxes(sigma, -1, -2)
    factor, jitter = robust_cholesky(cov)
    return Sqrtm(factor=factor, jitter=jitter)


def simulate_batch(model: MarketModel, n_paths: int, n_steps: int, horizon: float,
                   seed: int, antithetic: bool = False, with_logsig: bool = True,
                   sig_depth: int = 3) -> PathBatch:
    """Euler-Maruyama simulation of a path batch.

    Fills running averages and extrema along the way and, unless disabled,
    the Lyndon coordinates of the time-augmented prefix log-signature after
    every step (the step-0 row is the zero vector of the empty path).
    """
    if n_paths < 1 or n_steps < 1 or horizon <= 0:
        raise ValueError("need n_paths >= 1, n_steps >= 1, horizon > 0")
    d, m_w = model.dim, model.brownian_dim
    dt = horizon / n_steps
    xi, pairing = brownian_increments(seed, n_paths, n_steps, m_w, antithetic)
    chol = model.correlation_cholesky()
    dW = np.sqrt(dt) * (xi @ chol.T)

    X = np.empty((n_paths, n_steps + 1, d))
    X[:, 0] = np.broadcast_to(np.asarray(model.x0, dtype=float), (n_paths, d))
    avg = np.empty_like(X)
    hi = np.empty_like(X)
    lo = np.empty_like(X)
    avg[:, 0] = X[:, 0]
    hi[:, 0] = X[:, 0]
    lo[:, 0] = X[:, 0]

    acc = None
    coords = None
    if with_logsig:
        acc = sigcore.BatchLogSig(n_paths, d + 1, sig_depth)
        coords = np.zeros((n_paths, n_steps + 1, sigcore.logsig_dim(d + 1, sig_depth)))

    nan_events: list[tuple[int, int]] = []
    grid = np.linspace(0.0, horizon, n_steps + 1)
    for n in range(n_steps):
        summary = PathSummary(X[:, n], avg[:, n], hi[:, n], lo[:, n], n, float(grid[n]))
        b = model.drift(grid[n], summary)
        sigma = model.diffusion(grid[n], summary)
        step = b * dt + np.einsum("mij,mj->mi", sigma, dW[:, n])
        X[:, n + 1] = X[:, n] + step
        bad = ~np.all(np.isfinite(X[:, n + 1]), axis=1)
        if np.any(bad):
            nan_events.extend((int(i), n + 1) for i in np.nonzero(bad)[0])
        avg[:, n + 1] = (avg[:, n] * (n + 1) + X[:, n + 1]) / (n + 2)
        hi[:, n + 1] = np.maximum(hi[:, n], X[:, n + 1])
        lo[:, n + 1] = np.minimum(lo[:, n], X[:, n + 1])
        if acc is not None:
            coords[:, n + 1] = acc.update(time_augment(X[:, n + 1] - X[:, n], dt))

    return PathBatch(
        X=X, dW=dW, grid=grid, dt=dt,
        running_avg=avg, running_max=hi, running_min=lo,
        logsig_coords=coords, sig_depth=sig_depth if with_logsig else None,
        antithetic_pairing=pairing, nan_events=nan_events,
    )


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def black_scholes_basket(dim: int, s0: float = 100.0, mu: float = 0.0,
                         sigma: float | np.ndarray = 0.2,
                         rho: float = 0.0) -> MarketModel:
    """Lognormal basket: dS_i = mu S_i dt + sigma_i S_i dW_i, equicorrelated."""
    vols = np.broadcast_to(np.asarray(sigma, dtype=float), (dim,)).copy()
    corr = np.full((dim, dim), rho) + (1.0 - rho) * np.eye(dim)

    def drift(t, summary):
        return mu * summary.state

    def diffusion(t, summary):
        out = np.zeros((summary.state.shape[0], dim, dim))
        idx = np.arange(dim)
        out[:, idx, idx] = vols * summary.state
        return out

    return MarketModel(
        dim=dim, brownian_dim=dim, x0=np.full(dim, s0),
        drift=drift, diffusion=diffusion, correlation=corr,
        name="black_scholes_basket",
    )


def stochastic_vol(s0: float = 100.0, v0: float = 0.04, mu: float = 0.0,
                   kappa: float = 2.0, theta: float = 0.04, xi: float = 0.3,
                   rho: float = -0.5) -> MarketModel:
    """One-factor stochastic volatility: a square-root variance driving S.

    Variance is floored at zero inside the square root (full-truncation
    Euler), and the two Brownian drivers are correlated by rho.
    """
    corr = np.array([[1.0, rho], [rho, 1.0]])

    def drift(t, summary):
        s, v = summary.state[:, 0], summary.state[:, 1]
        return np.stack([mu * s, kappa * (theta - v)], axis=1)

    def diffusion(t, summary):
        s, v = summary.state[:, 0], summary.state[:, 1]
        vol = np.sqrt(np.maximum(v, 0.0))
        out = np.zeros((s.shape[0], 2, 2))
        out[:, 0, 0] = vol * s
        out[:, 1, 1] = xi * vol
        return out

    return MarketModel(
        dim=2, brownian_dim=2, x0=np.array([s0, v0]),
        drift=drift, diffusion=diffusion, correlation=corr,
        name="stochastic_vol",
    )


_PRESETS = {
    "black_scholes_basket": black_scholes_basket,
    "stochastic_vol": stochastic_vol,
}


def model_preset(name: str, **kwargs) -> MarketModel:
    if name not in _PRESETS:
        raise KeyError(f"unknown model preset '{name}'; have {sorted(_PRESETS)}")
    return _PRESETS[name](**kwargs)
