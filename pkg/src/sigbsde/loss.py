"""Training objectives: tail-tilted terminal mismatch, drift residual,
one-sided second-order penalty, Malliavin-style supervision targets, the
curvature conditioning penalty, and the two-phase curriculum.

Differentiable pieces take tape variables (plain arrays are lifted onto a
private tape so the same functions serve unit tests); supervision targets
are plain numpy because they are constants during backprop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import Tape, Var


# ---------------------------------------------------------------------------
# Weights and schedule
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    """Weights of the composite objective at one training step."""

    lambda_t: float = 1.0
    lambda_b: float = 1.0
    lambda_2: float = 0.0
    q: float = 0.95
    eta: float = 0.5
    alpha_z: float = 0.0
    alpha_gamma: float = 0.0
    gamma_reg: float = 0.0

    def __post_init__(self):
        for name in ("lambda_t", "lambda_b", "lambda_2", "eta",
                     "alpha_z", "alpha_gamma", "gamma_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.90 <= self.q <= 0.99:
            raise ValueError("tilt quantile q must lie in [0.90, 0.99]")


@dataclass
class TiltSchedule:
    """Two-phase curriculum: warm start, then ramped tail emphasis.

    Phase 1 (the first ``phase_split`` fraction of steps) runs with weights
    (1, 1, 0) and the starting tilt. Phase 2 switches on the second-order
    weight and ramps (q, eta) linearly to their end values by the last step.
    """

    q_start: float = 0.95
    q_end: float = 0.99
    eta_start: float = 0.5
    eta_end: float = 1.5
    phase_split: float = 0.2
    lambda_t: float = 1.0
    lambda_b: float = 1.0
    lambda2_late: float = 0.2
    alpha_z: float = 0.0
    alpha_gamma: float = 0.0
    gamma_reg: float = 0.0


def curriculum_update(step: int, total_steps: int, schedule: TiltSchedule) -> LossWeights:
    """Loss weights in effect at ``step`` of ``total_steps``."""
    if not 0 <= step <= max(total_steps, 0):
        raise ValueError("step outside [0, total_steps]")
    boundary = schedule.phase_split * total_steps
    common = dict(
        lambda_t=schedule.lambda_t, lambda_b=schedule.lambda_b,
        alpha_z=schedule.alpha_z, alpha_gamma=schedule.alpha_gamma,
        gamma_reg=schedule.gamma_reg,
    )
    if total_steps > 0 and step < boundary:
        return LossWeights(lambda_2=0.0, q=schedule.q_start, eta=schedule.eta_start, **common)
    span = total_steps - boundary
    frac = 1.0 if span <= 0 else (step - boundary) / span
    return LossWeights(
        lambda_2=schedule.lambda2_late,
        q=schedule.q_start + frac * (schedule.q_end - schedule.q_start),
        eta=schedule.eta_start + frac * (schedule.eta_end - schedule.eta_start),
        **common,
    )


@dataclass
class LossBreakdown:
    """Component values of one evaluation of the composite objective."""

    terminal: float = 0.0
    drift: float = 0.0
    second_order: float = 0.0
    z_sup: float = 0.0
    gamma_sup: float = 0.0
    gamma_reg: float = 0.0
    total: float = 0.0
    quantile_used: float = float("nan")
    total_var: Var | None = None


# ---------------------------------------------------------------------------
# Differentiable losses
# ---------------------------------------------------------------------------


def _lift(x) -> Var:
    if isinstance(x, Var):
        return x
    return Tape().leaf(np.asarray(x, dtype=float))


def empirical_quantile(values: np.ndarray, q: float) -> float:
    """Ascending order statistic at 1-based index ceil(q * M)."""
    values = np.asarray(ad.value_of(values), dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("empty batch")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    rank = max(1, math.ceil(q * values.size - 1e-12))
    return float(np.sort(values)[rank - 1])


def terminal_tilt_loss(y_terminal, payoffs, q: float, eta: float) -> Var:
    """Squared terminal error with the worst tail inflated by (1 + eta).

    The tail set is {delta^2 >= Q_q(delta^2)} with the quantile taken over
    the same batch and treated as a constant during backprop.
    """
    y = _lift(y_terminal)
    delta = ad.sub(y, ad.value_of(payoffs))
    d2 = ad.square(delta)
    quantile = empirical_quantile(d2.value, q)
    tilt = 1.0 + eta * (d2.value >= quantile)
    return ad.mean_(ad.mul(d2, tilt))


def drift_residual_loss(y, z, dw, f_vals, dt: float, detach_next: bool = False) -> Var:
    """Discretised backward-equation residual, summed over steps.

    Computes E[sum_n (1/dt) (Y_{n+1} - Y_n + f_n dt - Z_n . dW_n)^2]; the
    trailing axes are (steps,) for Y and (steps, channels) for Z and dW, and
    any leading batch axes are averaged.

    With ``detach_next`` the next-step value enters as a constant: the loss
    value is unchanged but gradients flow strictly backward in time, turning
    the joint minimisation into the local regressions of window-local
    backward schemes (each Y_n, Z_n regresses on its frozen successor).
    """
    y = _lift(y)
    z = z if isinstance(z, Var) else y.tape.leaf(z)
    dw = ad.value_of(dw)
    if detach_next:
        inc = ad.sub(ad.value_of(y)[..., 1:], y[..., :-1])
    else:
        inc = ad.sub(y[..., 1:], y[..., :-1])
    mart = ad.sum_(ad.mul(z, dw), axis=-1)
    resid = ad.sub(inc, mart)
    if isinstance(f_vals, Var):
        resid = ad.add(resid, ad.mul(f_vals, dt))
    elif np.any(ad.value_of(f_vals)):
        resid = ad.add(resid, ad.value_of(f_vals) * dt)
    per_path = ad.sum_(ad.square(resid), axis=-1)
    return ad.mul(ad.mean_(per_path), 1.0 / dt)


def hjb_penalty(residuals) -> Var:
    """One-sided second-order penalty: E[sum_n max(residual, 0)^2]."""
    r = _lift(residuals)
    clamped = ad.maximum_const(r, 0.0)
    return ad.mean_(ad.sum_(ad.square(clamped), axis=-1))


def gamma_conditioning_penalty(gamma, eps: float = 1e-6) -> Var:
    """log(1 + kappa) per matrix, kappa the extreme |eigenvalue| ratio.

    Eigenvectors are computed off-tape and frozen; the bilinear forms
    v^T Gamma v reproduce the exact first-order eigenvalue derivatives, so
    the penalty discourages ill-conditioned curvature without requiring a
    differentiable eigensolver.
    """
    g = _lift(gamma)
    vals, vecs = np.linalg.eigh(g.value)
    i_max = np.argmax(np.abs(vals), axis=-1)
    i_min = np.argmin(np.abs(vals), axis=-1)
    take = np.take_along_axis
    v_max = take(vecs, i_max[..., None, None], axis=-1)  # (..., d, 1)
    v_min = take(vecs, i_min[..., None, None], axis=-1)

    def quad(v):
        out = ad.matmul(np.swapaxes(v, -1, -2), ad.matmul(g, v))
        return ad.reshape(out, out.value.shape[:-2])

    # eps in numerator and denominator keeps the ratio scale-free (exactly 1
    # for well-conditioned matrices) instead of rewarding a shrunk Gamma
    kappa = ad.div(ad.add(ad.abs_(quad(v_max)), eps), ad.add(ad.abs_(quad(v_min)), eps))
    return ad.mean_(ad.log(ad.add(kappa, 1.0)))


def total_loss(terminal, drift, second_order, z_sup, gamma_sup, gamma_reg,
               weights: LossWeights) -> LossBreakdown:
    """Weighted sum of components; the breakdown re-sums exactly."""
    parts = [
        ("terminal", terminal, weights.lambda_t),
        ("drift", drift, weights.lambda_b),
        ("second_order", second_order, weights.lambda_2),
        ("z_sup", z_sup, weights.alpha_z),
        ("gamma_sup", gamma_sup, weights.alpha_gamma),
        ("gamma_reg", gamma_reg, weights.gamma_reg),
    ]
    total_var = None
    breakdown = LossBreakdown()
    for name, component, weight in parts:
        setattr(breakdown, name, float(np.asarray(ad.value_of(component))))
        if weight == 0.0:
            continue
        term = ad.mul(component, weight) if isinstance(component, Var) else None
        if term is None:
            breakdown.total += weight * float(np.asarray(ad.value_of(component)))
        elif total_var is None:
            total_var = term
        else:
            total_var = ad.add(total_var, term)
    if total_var is not None:
        breakdown.total += float(total_var.value)
        breakdown.total_var = total_var
    breakdown.quantile_used = weights.q
    return breakdown


# ---------------------------------------------------------------------------
# Supervision targets (constants under backprop)
# ---------------------------------------------------------------------------


def malliavin_z_targets(y_next: np.ndarray, dw: np.ndarray, sigma: np.ndarray,
                        dt: float, corr: np.ndarray | None = None,
                        reduce: str = "mean", shrink: float = 0.5,
                        pseudo_inverse: bool = False) -> np.ndarray:
    """Regression targets for the scaled integrand from one-step weights.

    The raw per-sample weight (1/dt) Y_{n+1} (sigma^-1)^T C^-1 dW estimates
    the value gradient; mapping it through the same sqrt-covariance scaling
    as the Z head gives a target in Z-space (for scalar lognormal dynamics
    this is sigma * spot * delta). ``reduce``: "mean" collapses the batch
    (exact at t=0 where the state is deterministic), "shrink" blends each
    per-sample weight with the batch mean, "none" returns raw weights.
    """
    y_next = np.asarray(y_next, dtype=float)
    dw = np.asarray(dw, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 2:
        sigma = np.broadcast_to(sigma, (dw.shape[0], *sigma.shape))
    try:
        sigma_inv = np.linalg.pinv(sigma) if pseudo_inverse else np.linalg.inv(sigma)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(
            "singular diffusion; pass pseudo_inverse=True to use the pseudo-inverse"
        ) from err
    w = dw if corr is None else dw @ np.linalg.inv(corr).T
    grad_est = y_next[:, None] * np.einsum("mji,mj->mi", sigma_inv, w) / dt
    cov = sigma @ np.swapaxes(sigma, -1, -2)
    factor = np.linalg.cholesky(cov + 1e-14 * np.eye(cov.shape[-1]))
    raw = np.einsum("mi,mij->mj", grad_est, factor)
    if reduce == "none":
        return raw
    mean = raw.mean(axis=0)
    if reduce == "mean":
        return np.broadcast_to(mean, raw.shape).copy()
    if reduce == "shrink":
        return mean + shrink * (raw - mean)
    raise ValueError(f"unknown reduce mode '{reduce}'")


def malliavin_gamma_targets(evaluator, x0: np.ndarray, eps: float) -> np.ndarray:
    """Symmetric second differences of a value proxy in coordinate directions.

    Exact (to round-off) for quadratic functionals; the diagonal reduces to
    the one-dimensional second difference with spacing 2 * eps.
    """
    if eps <= 0:
        raise ValueError("bump size must be positive")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    batch, d = x0.shape
    out = np.zeros((batch, d, d))
    eye = np.eye(d)
    for i in range(d):
        for j in range(i, d):
            pp = evaluator(x0 + eps * eye[i] + eps * eye[j])
            pm = evaluator(x0 + eps * eye[i] - eps * eye[j])
            mp = evaluator(x0 - eps * eye[i] + eps * eye[j])
            mm = evaluator(x0 - eps * eye[i] - eps * eye[j])
            est = (np.asarray(pp) - pm - mp + np.asarray(mm)) / (4.0 * eps * eps)
            out[:, i, j] = est
            out[:, j, i] = est
    return out
