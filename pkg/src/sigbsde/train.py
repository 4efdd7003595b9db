"""Training loop, inference, evaluation, and the one-factor ablation driver.

One iteration simulates a fresh path batch, unrolls the backbone over all
local windows at once (windows are folded into the batch axis), decodes the
heads at every window step, accumulates the tilted terminal, drift-residual,
second-order, and supervision losses, and applies one clipped AdamW step.
Every epoch appends one row to a metrics CSV whose bytes depend only on the
seed and configuration.
"""

from __future__ import annotations

import csv
import io
import json
import resource
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, ad, bench, loss as losses, rde, sigcore
from .ad import OptState, Tape, adam_step, load_checkpoint, mlp_init, save_checkpoint
from .bench import MetricsReport, Task, compute_metrics, mc_reference_price
from .config import TrainConfig, save_config
from .loss import LossBreakdown, TiltSchedule, curriculum_update
from .rde import ControlNormalizer, SigRdeParams, window_starts
from .sde import PathBatch, robust_cholesky, simulate_batch, time_augment

CSV_COLUMNS = ("epoch", "terminal", "drift", "second_order", "z_sup",
               "gamma_sup", "total", "q", "eta", "lambda2", "nan_events")

_GRU_WIDTH_TOL = 0.10


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence((seed, *tags)).generate_state(1)[0])


def build_task(cfg: TrainConfig) -> Task:
    common = dict(s0=cfg.s0, strike=cfg.strike, sigma=cfg.sigma,
                  rate=cfg.rate, horizon=cfg.horizon)
    if cfg.task == "european_call":
        return bench.european_call_task(cfg.n_steps, **common)
    if cfg.task == "asian_geometric":
        return bench.geometric_asian_task(cfg.n_steps, **common)
    if cfg.task == "asian_basket":
        return bench.asian_basket_task(cfg.dim, cfg.n_steps, rho=cfg.rho, **common)
    if cfg.task == "barrier_up_out":
        return bench.barrier_task(cfg.n_steps, barrier=cfg.barrier, **common)
    if cfg.task == "portfolio_lq":
        return bench.portfolio_lq_task(cfg.n_steps, horizon=cfg.horizon)
    if cfg.task == "portfolio_exp":
        return bench.portfolio_exp_task(cfg.n_steps, horizon=cfg.horizon)
    raise KeyError(f"unknown task '{cfg.task}'")


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------


def _effective_control_depth(cfg: TrainConfig) -> int:
    return cfg.control_depth if cfg.use_signatures else 1


def _prefix_dim(cfg: TrainConfig, task: Task) -> int:
    return sigcore.logsig_dim(task.dim + 1, cfg.sig_depth)


def _init_gru_backbone(state_dim: int, brownian_dim: int, width: int,
                       prefix_dim: int, rng, activation: str,
                       head_hidden: int, y_bias: float,
                       z_bias: np.ndarray | None = None,
                       head_activation: str = "relu") -> SigRdeParams:
    hh = head_hidden or max(width // 4, 16)
    nets = {
        "cell": rde.init_gru(state_dim + 1, width, rng),
        "h_init": mlp_init([state_dim, width], activation, rng=rng),
        "combiner": mlp_init([width + prefix_dim, width, width], activation, rng=rng),
        "g_y": mlp_init([width, hh, 1], head_activation, rng=rng, final_bias=y_bias),
        "g_z": mlp_init([width, hh, brownian_dim], head_activation, rng=rng),
        "g_gamma": mlp_init([width, hh, state_dim * state_dim], head_activation, rng=rng),
    }
    nets["g_y"].weights[-1][:] = 0.0
    if z_bias is not None:
        nets["g_z"].weights[-1][:] = 0.0
        nets["g_z"].biases[-1][:] = np.asarray(z_bias, dtype=float)
    return SigRdeParams(width, state_dim + 1, state_dim, brownian_dim, prefix_dim, nets)


def _gru_param_count(state_dim: int, brownian_dim: int, width: int,
                     prefix_dim: int, head_hidden: int) -> int:
    input_dim = state_dim + 1
    hh = head_hidden or max(width // 4, 16)
    cell = input_dim * 3 * width + width * 3 * width + 6 * width + 2 * input_dim
    h_init = state_dim * width + width
    combiner = (width + prefix_dim) * width + width + width * width + width
    heads = 0
    for out in (1, brownian_dim, state_dim * state_dim):
        heads += width * hh + hh + hh * out + out
    return cell + h_init + combiner + heads


def matched_gru_width(cfg: TrainConfig, task: Task) -> int:
    """Hidden width whose parameter budget best matches the RDE backbone."""
    rng = np.random.default_rng(0)
    prefix = _prefix_dim(cfg, task)
    target = rde.init_sig_rde(task.dim, task.model.brownian_dim, cfg.width,
                              _effective_control_depth(cfg), prefix, rng,
                              cfg.activation, cfg.head_hidden or None).n_params
    best_width, best_gap = cfg.width, float("inf")
    for width in range(4, 4 * cfg.width + 1):
        count = _gru_param_count(task.dim, task.model.brownian_dim, width,
                                 prefix, cfg.head_hidden)
        gap = abs(count - target)
        if gap < best_gap:
            best_width, best_gap = width, gap
    if best_gap > _GRU_WIDTH_TOL * target:
        raise RuntimeError("could not match the recurrent baseline parameter budget")
    return best_width


def build_model(cfg: TrainConfig, task: Task, y_bias: float,
                z_bias: np.ndarray | None = None) -> SigRdeParams:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    prefix = _prefix_dim(cfg, task)
    if cfg.baseline == "rnn":
        width = matched_gru_width(cfg, task)
        return _init_gru_backbone(task.dim, task.model.brownian_dim, width, prefix,
                                  rng, cfg.activation, cfg.head_hidden, y_bias,
                                  z_bias=z_bias, head_activation=cfg.head_activation)
    return rde.init_sig_rde(task.dim, task.model.brownian_dim, cfg.width,
                            _effective_control_depth(cfg), prefix, rng,
                            cfg.activation, cfg.head_hidden or None, y_bias,
                            z_bias=z_bias, head_activation=cfg.head_activation)


def crude_price_estimate(cfg: TrainConfig, task: Task) -> float:
    """Cheap discounted-payoff mean used to warm start the value-head bias."""
    return crude_warm_start(cfg, task)[0]


def crude_warm_start(cfg: TrainConfig, task: Task) -> tuple[float, np.ndarray | None]:
    """Model-free warm starts from one coarse batch.

    Price: discounted payoff mean. Z-head bias: the t=0 one-step weight
    estimate mapped back through the head scaling, so the initial Z sits at
    the right magnitude instead of zero.
    """
    paths = min(4096, max(1024, cfg.batch * 4))
    paths += paths % 2
    batch = simulate_batch(task.model, paths, cfg.n_steps, cfg.horizon,
                           seed=derive_seed(cfg.seed, 3), antithetic=True,
                           with_logsig=False)
    disc = np.exp(-task.rate * task.horizon)
    price = float(disc * task.payoff(batch).mean())
    sigma0 = task.model.diffusion(0.0, batch.summary_at(0))
    try:
        z0 = losses.malliavin_z_targets(
            disc * task.payoff(batch), batch.dW[:, 0], sigma0, batch.dt,
            corr=task.model.correlation, reduce="mean", pseudo_inverse=True,
        )[0]
        cov0 = sigma0[0] @ sigma0[0].T
        factor0 = np.linalg.cholesky(cov0 + 1e-14 * np.eye(cov0.shape[-1]))
        z_bias = np.linalg.lstsq(factor0.T, z0, rcond=None)[0]
    except np.linalg.LinAlgError:
        z_bias = None
    return price, z_bias


# ---------------------------------------------------------------------------
# Windowed forward pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutputs:
    """Per-grid-point decodes assembled from window-owned segments.

    Every grid point n is decoded by its owner window (the latest window
    starting at or before n), and the owned decodes are gathered into one
    global chain. Residuals where ownership switches couple consecutive
    windows, which is what makes the overlapping-window scheme behave like
    multishooting with matching conditions.
    """

    y: ad.Var                 # (M, N+1)
    z: ad.Var                 # (M, N+1, m_w)
    gamma: ad.Var             # (M, N+1, d, d)
    ks: list[int]
    sigmas: np.ndarray        # (M, N+1, d, m_w)
    param_vars: list = field(default_factory=list)
    flagged: int = 0
    evals: int = 0


def _raw_inputs(batch: PathBatch) -> np.ndarray:
    return time_augment(np.diff(batch.X, axis=1), batch.dt)


def forward_windows(params: SigRdeParams, kind: str, task: Task, batch: PathBatch,
                    cfg: TrainConfig, normalizer: ControlNormalizer | None,
                    tape: Tape, observe_normalizer: bool = False) -> ForwardOutputs:
    m_paths, n_steps = batch.n_paths, batch.n_steps
    k_len = cfg.window
    ks = window_starts(n_steps, k_len, cfg.stride)
    n_win = len(ks)

    if kind == "rnn":
        controls = _raw_inputs(batch)
    else:
        controls = rde.build_control(batch, 0, n_steps, _effective_control_depth(cfg))
        if normalizer is not None:
            if observe_normalizer:
                normalizer.observe(controls)
            controls = normalizer.apply(controls)

    win_idx = np.asarray(ks)[:, None] + np.arange(k_len)      # (W, K)
    steps_abs = np.asarray(ks)[:, None] + np.arange(k_len + 1)  # (W, K+1)
    wctrl = controls[:, win_idx].reshape(m_paths * n_win, k_len, -1)

    # per-step diffusion and sqrt-covariance factors along the grid
    sigmas = np.stack(
        [task.model.diffusion(batch.grid[n], batch.summary_at(n)) for n in range(n_steps + 1)],
        axis=1,
    )
    covs = sigmas @ np.swapaxes(sigmas, -1, -2)
    flat_covs = covs.reshape(-1, covs.shape[-2], covs.shape[-1])
    facs, _ = robust_cholesky(flat_covs)
    facs = facs.reshape(covs.shape)
    fac_flat = facs[:, steps_abs].reshape(m_paths * n_win * (k_len + 1), *facs.shape[-2:])

    x_heads = batch.X[:, ks].reshape(m_paths * n_win, -1)
    if cfg.use_signatures and kind != "rnn" and batch.logsig_coords is not None:
        prefix = batch.logsig_coords[:, ks].reshape(m_paths * n_win, -1)
    else:
        prefix = np.zeros((m_paths * n_win, params.prefix_dim))

    lifted, param_vars = params.lift(tape)
    h0 = rde.start_state(lifted, x_heads, prefix, tape)
    if kind == "rnn":
        hs = rde.integrate_window_gru(lifted["cell"], wctrl, h0)
    else:
        hs = rde.integrate_window(lifted["f_net"], wctrl, h0)
    h_all = ad.reshape(ad.stack(hs, axis=1), (m_paths * n_win * (k_len + 1), params.width))

    y_flat, z_flat, gamma_flat = rde.decode_heads(lifted, h_all, fac_flat)
    d, m_w = params.state_dim, params.brownian_dim

    # ownership gather: grid point n comes from the latest window covering it
    grid_idx = np.arange(n_steps + 1)
    owner = np.searchsorted(np.asarray(ks), grid_idx, side="right") - 1
    offset = grid_idx - np.asarray(ks)[owner]
    col = owner * (k_len + 1) + offset

    y_w = ad.reshape(y_flat, (m_paths, n_win * (k_len + 1)))
    z_w = ad.reshape(z_flat, (m_paths, n_win * (k_len + 1), m_w))
    g_w = ad.reshape(gamma_flat, (m_paths, n_win * (k_len + 1), d, d))
    out = ForwardOutputs(
        y=ad.slice_(y_w, (slice(None), col)),
        z=ad.slice_(z_w, (slice(None), col)),
        gamma=ad.slice_(g_w, (slice(None), col)),
        ks=ks,
        sigmas=sigmas,
        param_vars=param_vars,
    )
    bad = (~np.isfinite(out.y.value)).astype(int)
    bad += (~np.isfinite(out.z.value)).any(axis=-1)
    bad += (~np.isfinite(out.gamma.value)).any(axis=(-1, -2))
    out.flagged = int(np.count_nonzero(bad))
    out.evals = out.y.value.size
    return out


# ---------------------------------------------------------------------------
# Loss assembly
# ---------------------------------------------------------------------------


def _flat_steps(out: ForwardOutputs, batch: PathBatch):
    """Flatten the (M, N) step block for driver / residual evaluation."""
    m, np1 = out.y.value.shape
    n = np1 - 1
    d = out.gamma.value.shape[-1]
    y = ad.reshape(out.y[:, :n], (m * n,))
    z = ad.reshape(out.z[:, :n, :], (m * n, -1))
    gamma = ad.reshape(out.gamma[:, :n], (m * n, d, d))
    t = np.broadcast_to(batch.grid[:n], (m, n)).reshape(-1)
    x = batch.X[:, :n].reshape(m * n, -1)
    return y, z, gamma, t, x


def compute_losses(out: ForwardOutputs, batch: PathBatch, task: Task,
                   cfg: TrainConfig, weights: losses.LossWeights) -> LossBreakdown:
    m, np1 = out.y.value.shape
    n_steps = np1 - 1
    payoffs = task.payoff(batch)

    y_term = out.y[:, n_steps]
    terminal = losses.terminal_tilt_loss(y_term, payoffs, weights.q, weights.eta)
    quantile = losses.empirical_quantile((y_term.value - payoffs) ** 2, weights.q)

    f_vals = 0.0
    hjb_component = 0.0
    need_driver = task.driver is not None
    need_hjb = cfg.use_hjb and task.hjb is not None
    if need_driver or need_hjb:
        y_s, z_s, g_s, t_s, x_s = _flat_steps(out, batch)
        if need_driver:
            f_vals = ad.reshape(task.driver(t_s, x_s, y_s, z_s, g_s), (m, n_steps))
        if need_hjb:
            resid = ad.reshape(task.hjb(t_s, x_s, y_s, z_s, g_s), (m, n_steps))
            hjb_component = losses.hjb_penalty(resid)

    drift = losses.drift_residual_loss(
        out.y, out.z[:, :n_steps, :], batch.dW, f_vals, batch.dt,
        detach_next=True,
    )

    z_sup = 0.0
    gamma_sup = 0.0
    if cfg.use_malliavin:
        # The weight identity E[Y_{n+1} w_n | F_n] = E[g~ w_n | F_n] (tower
        # property) lets the realized discounted payoff stand in for the
        # next-step value; unlike the decoded Y it carries signal from the
        # first iteration, at the price of extra (mean-zero) variance.
        flat = m * n_steps
        disc = np.exp(-task.rate * (task.horizon - batch.grid[1:]))
        proxy = payoffs[:, None] * disc[None, :]
        raw = losses.malliavin_z_targets(
            proxy.reshape(flat),
            batch.dW.reshape(flat, -1),
            out.sigmas[:, :-1].reshape(flat, *out.sigmas.shape[-2:]),
            batch.dt,
            corr=task.model.correlation,
            reduce="none",
        ).reshape(m, n_steps, -1)
        if batch.antithetic_pairing is not None:
            # averaging the weight within a +/- pair cancels the even-in-dW
            # part of the payoff, cutting target variance by orders of
            # magnitude at the price of smearing across the pair's states
            raw = 0.5 * (raw + raw[batch.antithetic_pairing])
        step_mean = raw.mean(axis=0, keepdims=True)
        targets = step_mean + cfg.z_shrink * (raw - step_mean)
        targets[:, 0] = step_mean[0, 0]  # deterministic start state
        diff = ad.sub(out.z[:, :n_steps, :], targets)
        z_sup = ad.mean_(ad.sum_(ad.sum_(ad.square(diff), axis=-1), axis=-1))

        if task.proxy is not None:
            heads = [
                losses.malliavin_gamma_targets(task.proxy(batch, k0), batch.X[:, k0], cfg.gamma_bump)
                for k0 in out.ks
            ]
            gamma_targets = np.stack(heads, axis=1)  # (M, W, d, d)
            gdiff = ad.sub(out.gamma[:, np.asarray(out.ks)], gamma_targets)
            gamma_sup = ad.mean_(ad.sum_(ad.sum_(ad.square(gdiff), axis=-1), axis=-1))

    d = out.gamma.value.shape[-1]
    gamma_flat = ad.reshape(out.gamma, (m * np1, d, d))
    gamma_pen = ad.mul(losses.gamma_conditioning_penalty(gamma_flat), float(np1))

    effective = losses.LossWeights(
        lambda_t=weights.lambda_t, lambda_b=weights.lambda_b,
        lambda_2=weights.lambda_2 if need_hjb else 0.0,
        q=weights.q, eta=weights.eta,
        alpha_z=weights.alpha_z if cfg.use_malliavin else 0.0,
        alpha_gamma=weights.alpha_gamma if (cfg.use_malliavin and task.proxy) else 0.0,
        gamma_reg=weights.gamma_reg,
    )
    breakdown = losses.total_loss(terminal, drift, hjb_component, z_sup,
                                  gamma_sup, gamma_pen, effective)
    breakdown.quantile_used = quantile
    return breakdown


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    code_version: str
    seed: int
    rows: list = field(default_factory=list)
    metrics: MetricsReport | None = None
    wall_clock: list = field(default_factory=list)
    checkpoint_path: str = ""
    outdir: str = ""
    initial_total: float = float("nan")
    final_total: float = float("nan")


def _schedule_from(cfg: TrainConfig) -> TiltSchedule:
    return TiltSchedule(
        q_start=cfg.q_start, q_end=cfg.q_end, eta_start=cfg.eta_start,
        eta_end=cfg.eta_end, phase_split=cfg.phase_split,
        lambda2_late=cfg.lambda2_late, alpha_z=cfg.alpha_z,
        alpha_gamma=cfg.alpha_gamma, gamma_reg=cfg.gamma_reg,
    )


def _format_cell(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_metrics_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_format_cell(row[c]) for c in CSV_COLUMNS])
    path.write_text(buf.getvalue())


def _checkpoint_payload(params: SigRdeParams, opt: OptState,
                        normalizer: ControlNormalizer) -> dict[str, np.ndarray]:
    arrays = {f"model/{name}": arr for name, arr in params.flat_arrays()}
    for i, (mm, vv) in enumerate(zip(opt.m, opt.v)):
        arrays[f"opt/m{i}"] = mm
        arrays[f"opt/v{i}"] = vv
    for name, arr in normalizer.state_arrays().items():
        arrays[f"norm/{name}"] = arr
    return arrays


def save_run_checkpoint(path: Path, cfg: TrainConfig, params: SigRdeParams,
                        opt: OptState, normalizer: ControlNormalizer,
                        epoch: int, kind: str) -> None:
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "epoch": epoch,
        "kind": kind,
        "code_version": __version__,
        "opt_state": {"step": opt.step, "skipped": opt.skipped,
                      "lr": opt.lr, "total_steps": opt.total_steps,
                      "weight_decay": opt.weight_decay, "clip": opt.clip},
        "rng_state": {"seed": cfg.seed, "next_epoch": epoch},
        "gru_width": params.width if kind == "rnn" else None,
    }
    save_checkpoint(path, _checkpoint_payload(params, opt, normalizer), meta)


def load_run_checkpoint(path: str):
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig(**{**meta["config"],
                         "seeds": tuple(meta["config"]["seeds"]),
                         "cvar_grid": tuple(meta["config"]["cvar_grid"])})
    task = build_task(cfg)
    kind = meta["kind"]
    if kind == "rnn":
        params = _init_gru_backbone(task.dim, task.model.brownian_dim,
                                    meta["gru_width"], _prefix_dim(cfg, task),
                                    np.random.default_rng(0), cfg.activation,
                                    cfg.head_hidden, 0.0)
    else:
        params = build_model(cfg, task, 0.0)
    names = [name for name, _ in params.flat_arrays()]
    try:
        params.set_flat([arrays[f"model/{n}"] for n in names])
    except KeyError as err:
        raise ValueError("checkpoint does not match the configured model") from err
    opt_meta = meta["opt_state"]
    opt = OptState(lr=opt_meta["lr"], weight_decay=opt_meta["weight_decay"],
                   clip=opt_meta["clip"], total_steps=opt_meta["total_steps"],
                   step=opt_meta["step"], skipped=opt_meta["skipped"])
    opt.m = [arrays[f"opt/m{i}"] for i in range(len(names)) if f"opt/m{i}" in arrays]
    opt.v = [arrays[f"opt/v{i}"] for i in range(len(names)) if f"opt/v{i}" in arrays]
    normalizer = ControlNormalizer(arrays["norm/scales"].shape[0])
    normalizer.load_state({"scales": arrays["norm/scales"], "frozen": arrays["norm/frozen"]})
    return cfg, task, params, opt, normalizer, meta


def _run_dir(cfg: TrainConfig) -> Path:
    path = Path(cfg.outdir) / f"{cfg.task}_{cfg.config_hash()}_s{cfg.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_train(cfg: TrainConfig) -> RunRecord:
    """Full training run; writes config, metrics CSV, checkpoint, run record."""
    outdir = _run_dir(cfg)
    task = build_task(cfg)
    y_bias, z_bias = (crude_warm_start(cfg, task) if cfg.warm_start_bias
                      else (0.0, None))
    params = build_model(cfg, task, y_bias, z_bias)
    kind = cfg.baseline
    opt = OptState(lr=cfg.lr, weight_decay=cfg.weight_decay, clip=cfg.clip,
                   total_steps=max(cfg.epochs, 1))
    q_channels = (task.dim + 1) if kind == "rnn" else rde.control_dim(
        task.dim, _effective_control_depth(cfg))
    normalizer = ControlNormalizer(q_channels, warmup=cfg.norm_warmup)
    schedule = _schedule_from(cfg)

    record = RunRecord(config_hash=cfg.config_hash(), code_version=__version__,
                       seed=cfg.seed, outdir=str(outdir))
    flagged_total, evals_total = 0, 0
    param_names = [name for name, _ in params.flat_arrays()]

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        weights = curriculum_update(epoch, cfg.epochs, schedule)
        batch = simulate_batch(
            task.model, cfg.batch, cfg.n_steps, cfg.horizon,
            seed=derive_seed(cfg.seed, 1, epoch), antithetic=cfg.antithetic,
            with_logsig=cfg.use_signatures and kind != "rnn",
            sig_depth=cfg.sig_depth,
        )
        tape = Tape()
        out = forward_windows(params, kind, task, batch, cfg, normalizer, tape,
                              observe_normalizer=True)
        breakdown = compute_losses(out, batch, task, cfg, weights)

        nan_events = len(batch.nan_events) + out.flagged
        flagged_total += len(batch.nan_events) + out.flagged
        evals_total += batch.n_paths * batch.n_steps + out.evals

        if breakdown.total_var is not None and np.isfinite(breakdown.total):
            grads_by_node = tape.backward(breakdown.total_var)
            grads = [
                grads_by_node[v.index] if grads_by_node[v.index] is not None
                else np.zeros_like(v.value)
                for v in out.param_vars
            ]
            before_skip = opt.skipped
            new_arrays = adam_step(opt, [arr for _, arr in params.flat_arrays()], grads)
            params.set_flat(new_arrays)
            nan_events += opt.skipped - before_skip
        else:
            opt.skipped += 1
            nan_events += 1

        record.rows.append({
            "epoch": epoch, "terminal": breakdown.terminal,
            "drift": breakdown.drift, "second_order": breakdown.second_order,
            "z_sup": breakdown.z_sup, "gamma_sup": breakdown.gamma_sup,
            "total": breakdown.total, "q": weights.q, "eta": weights.eta,
            "lambda2": weights.lambda_2, "nan_events": nan_events,
        })
        record.wall_clock.append(time.perf_counter() - tic)
        if epoch == 0:
            record.initial_total = breakdown.total
    if record.rows:
        record.final_total = record.rows[-1]["total"]

    ckpt_path = outdir / "checkpoint.json"
    save_run_checkpoint(ckpt_path, cfg, params, opt, normalizer, cfg.epochs, kind)
    record.checkpoint_path = str(ckpt_path)

    evaluation = evaluate_model(cfg, task, params, kind, normalizer)
    flagged_total += evaluation.pop("flagged")
    evals_total += evaluation.pop("evals")
    record.metrics = compute_metrics(
        y0=evaluation["y0"],
        terminal_mismatch=evaluation["terminal_mismatch"],
        oracle_price=task.oracle_price if task.oracle_kind == "closed_form" else None,
        cvar_grid=cfg.cvar_grid,
        z_errors=evaluation.get("z_errors"),
        gamma_errors=evaluation.get("gamma_errors"),
        hjb_values=evaluation.get("hjb_values"),
        nan_events=flagged_total, nan_total=evals_total,
        time_per_epoch_s=float(np.mean(record.wall_clock)) if record.wall_clock else None,
        peak_mem_gb=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024**2,
        param_count=params.n_params,
    )

    write_metrics_csv(outdir / "metrics.csv", record.rows)
    save_config(cfg, outdir / "config.ini")
    run_doc = {
        "config_hash": record.config_hash, "code_version": record.code_version,
        "seed": record.seed, "epochs": cfg.epochs,
        "wall_clock_s": record.wall_clock,
        "metrics": record.metrics.to_flat_dict(),
        "checkpoint": record.checkpoint_path,
        "initial_total": record.initial_total, "final_total": record.final_total,
    }
    (outdir / "run.json").write_text(json.dumps(run_doc, indent=1, sort_keys=True))
    return record


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def evaluate_model(cfg: TrainConfig, task: Task, params: SigRdeParams, kind: str,
                   normalizer: ControlNormalizer, n_paths: int | None = None,
                   seed_tag: int = 2) -> dict:
    """Forward pass on a fresh evaluation batch without gradient recording."""
    n_paths = n_paths or cfg.eval_paths
    n_paths += n_paths % 2
    batch = simulate_batch(
        task.model, n_paths, cfg.n_steps, cfg.horizon,
        seed=derive_seed(cfg.seed, seed_tag), antithetic=cfg.antithetic,
        with_logsig=cfg.use_signatures and kind != "rnn", sig_depth=cfg.sig_depth,
    )
    tape = Tape(recording=False)
    out = forward_windows(params, kind, task, batch, cfg, normalizer, tape)
    payoffs = task.payoff(batch)
    y_vals = out.y.value
    result = {
        "y0": float(y_vals[:, 0].mean()),
        "terminal_mismatch": y_vals[:, -1] - payoffs,
        "flagged": out.flagged + len(batch.nan_events),
        "evals": out.evals + batch.n_paths * batch.n_steps,
    }

    n_steps = batch.n_steps
    if task.z_reference is not None:
        refs = np.stack(
            [task.z_reference(batch.grid[n], batch.X[:, n]) for n in range(n_steps + 1)],
            axis=1,
        )
        result["z_errors"] = out.z.value - refs
    if task.gamma_reference is not None:
        refs = np.stack(
            [task.gamma_reference(batch.grid[n], batch.X[:, n]) for n in range(n_steps + 1)],
            axis=1,
        )
        result["gamma_errors"] = out.gamma.value - refs
    if task.hjb is not None:
        y_s, z_s, g_s, t_s, x_s = _flat_steps(out, batch)
        resid = task.hjb(t_s, x_s, y_s, z_s, g_s)
        result["hjb_values"] = ad.value_of(resid)

    pp = task.params.get("portfolio")
    if pp is not None:
        gamma_ww = out.gamma.value[:, 0, 0, 0]
        z1 = out.z.value[:, 0, 0]
        w0 = batch.X[:, 0, 0]
        scale = pp.lq_policy(w0) * pp.sigma0 if task.name == "portfolio_lq" \
            else pp.myopic_policy(w0) * pp.sigma0
        safe = np.where(np.abs(scale) < 1e-8, np.nan, scale)
        u_w = z1 / safe
        denom = pp.sigma0**2 * gamma_ww
        implied = -pp.mu_bar * u_w / np.where(np.abs(denom) < 1e-12, np.nan, denom)
        result["policy_summary"] = {
            "implied_control_mean": float(np.nanmean(implied)),
            "gamma_ww_mean": float(gamma_ww.mean()),
        }
    return result


def run_infer(checkpoint_path: str, n_paths: int | None = None,
              seed: int | None = None) -> tuple[float, dict]:
    """Algorithm-2-style valuation: simulate, integrate, decode, average Y0."""
    cfg, task, params, opt, normalizer, meta = load_run_checkpoint(checkpoint_path)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    evaluation = evaluate_model(cfg, task, params, meta["kind"], normalizer,
                                n_paths=n_paths)
    info = {k: v for k, v in evaluation.items()
            if k in ("policy_summary", "flagged", "evals")}
    info["terminal_rmse"] = float(np.sqrt(np.mean(evaluation["terminal_mismatch"] ** 2)))
    return evaluation["y0"], info


def run_evaluate(checkpoint_path: str, cvar_grid: tuple[float, ...] | None = None,
                 n_paths: int | None = None, mc_seed: int = 909) -> MetricsReport:
    """Metrics for a stored checkpoint, resolving the task's reference price."""
    cfg, task, params, opt, normalizer, meta = load_run_checkpoint(checkpoint_path)
    evaluation = evaluate_model(cfg, task, params, meta["kind"], normalizer,
                                n_paths=n_paths)
    oracle_price, oracle_se = None, 0.0
    if task.oracle_kind == "closed_form":
        oracle_price = task.oracle_price
    elif task.oracle_kind == "mc_reference":
        oracle_price, oracle_se = mc_reference_price(task, cfg.mc_ref_paths, seed=mc_seed)
    return compute_metrics(
        y0=evaluation["y0"], terminal_mismatch=evaluation["terminal_mismatch"],
        oracle_price=oracle_price, oracle_se=oracle_se,
        cvar_grid=cvar_grid or cfg.cvar_grid,
        z_errors=evaluation.get("z_errors"),
        gamma_errors=evaluation.get("gamma_errors"),
        hjb_values=evaluation.get("hjb_values"),
        nan_events=evaluation["flagged"], nan_total=evaluation["evals"],
        peak_mem_gb=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024**2,
        param_count=params.n_params,
    )


# ---------------------------------------------------------------------------
# Ablation driver
# ---------------------------------------------------------------------------

ABLATION_KNOBS = {
    "m": "sig_depth",
    "p": "width",
    "K": "window",
    "malliavin": "use_malliavin",
    "use_signatures": "use_signatures",
}

ABLATE_COLUMNS = ("setting", "value", "rpe_percent", "cvar_095_percent",
                  "time_per_epoch_s", "nan_rate_percent")


def run_ablate(cfg: TrainConfig, knob: str, values: list) -> list[dict]:
    """One-factor sweep in the benchmark-table column layout."""
    if knob not in ABLATION_KNOBS:
        raise KeyError(f"unknown ablation knob '{knob}'; have {sorted(ABLATION_KNOBS)}")
    field_name = ABLATION_KNOBS[knob]
    rows = []
    for value in values:
        updates = {field_name: value}
        if field_name == "window" and cfg.stride > value:
            updates["stride"] = max(1, value // 2)
        sub = cfg.replace(**updates)
        record = run_train(sub)
        metrics = record.metrics
        rows.append({
            "setting": knob, "value": value,
            "rpe_percent": metrics.rpe_percent,
            "cvar_095_percent": metrics.cvar_percent.get(0.95),
            "time_per_epoch_s": metrics.time_per_epoch_s,
            "nan_rate_percent": metrics.nan_rate_percent,
        })
    return rows


def write_ablate_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
