"""Hidden-state dynamics driven by log-signature controls, plus decoders.

The hidden state follows a depth-1 log-ODE step h' = h + F(h) dU, where the
control increment dU stacks the time step with the Lyndon coordinates of the
single-step time-augmented increment. Window start states combine a state
embedding with the cached prefix log-signature so that interior windows see
the path history before their left edge. A gated recurrent cell over the raw
time-augmented increments provides the matched discrete-time baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad, sigcore
from .ad import MlpParams, Tape, Var, lift_mlp, mlp_apply, mlp_init
from .sde import PathBatch


def control_dim(state_dim: int, control_depth: int) -> int:
    """Channels per control increment: time plus local Lyndon coordinates."""
    return 1 + sigcore.logsig_dim(state_dim + 1, control_depth)


def local_logsig_coords(increments: np.ndarray, dt: float, control_depth: int) -> np.ndarray:
    """Lyndon coordinates of one linear time-augmented segment per step.

    A single segment is primitive, so its log-signature is the level-1
    increment and every higher Lyndon coordinate vanishes; the group
    difference of consecutive cached prefix signatures gives the same vector.
    """
    d = increments.shape[-1]
    dim = sigcore.logsig_dim(d + 1, control_depth)
    out = np.zeros((*increments.shape[:-1], dim))
    out[..., 0] = dt
    out[..., 1 : d + 1] = increments
    return out


def build_control(batch: PathBatch, window_start: int, window_len: int,
                  control_depth: int = 2) -> np.ndarray:
    """Control increments dU over [window_start, window_start + window_len).

    Each step contributes [dt ; lambda(n)] where lambda(n) is the local
    log-signature coordinate vector of that step at ``control_depth``.
    """
    n_steps = batch.n_steps
    if window_start < 0 or window_start + window_len > n_steps:
        raise ValueError(
            f"window [{window_start}, {window_start + window_len}) outside grid of {n_steps} steps"
        )
    incs = np.diff(batch.X[:, window_start : window_start + window_len + 1], axis=1)
    lam = local_logsig_coords(incs, batch.dt, control_depth)
    head = np.full((*lam.shape[:-1], 1), batch.dt)
    return np.concatenate([head, lam], axis=-1)


def window_starts(n_steps: int, window_len: int, stride: int) -> list[int]:
    """Stride-spaced window offsets, always including the terminal window."""
    if window_len > n_steps:
        raise ValueError("window longer than grid")
    ks = list(range(0, n_steps - window_len + 1, max(stride, 1)))
    if ks[-1] != n_steps - window_len:
        ks.append(n_steps - window_len)
    return ks


class ControlNormalizer:
    """Per-channel scale normalisation of control increments.

    Scales are root-mean-square statistics accumulated over warm-up batches
    and frozen afterwards. Only the scale is touched (no centring): the time
    channel is constant on a uniform grid and centring would null it.
    """

    def __init__(self, n_channels: int, warmup: int = 10, eps: float = 1e-8):
        self.warmup = warmup
        self.eps = eps
        self.sumsq = np.zeros(n_channels)
        self.count = 0
        self.updates = 0
        self.scales = np.ones(n_channels)
        self.frozen = False

    def observe(self, controls: np.ndarray) -> None:
        if self.frozen:
            return
        flat = controls.reshape(-1, controls.shape[-1])
        self.sumsq += np.sum(flat * flat, axis=0)
        self.count += flat.shape[0]
        self.updates += 1
        self.scales = np.sqrt(self.sumsq / max(self.count, 1)) + self.eps
        if self.updates >= self.warmup:
            self.frozen = True

    def apply(self, controls: np.ndarray) -> np.ndarray:
        return controls / self.scales

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"scales": self.scales, "frozen": np.array([float(self.frozen)])}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.scales = arrays["scales"].copy()
        self.frozen = bool(arrays["frozen"][0])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class RdeState:
    """Hidden vector plus the lifted networks that evolve and decode it."""

    h: Var | np.ndarray
    f_net: MlpParams
    h_init: MlpParams
    combiner: MlpParams
    g_y: MlpParams
    g_z: MlpParams
    g_gamma: MlpParams


@dataclass
class SigRdeParams:
    """Raw parameter arrays for the signature-RDE backbone and heads."""

    width: int
    control_channels: int
    state_dim: int
    brownian_dim: int
    prefix_dim: int
    nets: dict[str, MlpParams] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return sum(net.n_params for net in self.nets.values())

    def flat_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for net_name, net in self.nets.items():
            for arr_name, arr in net.arrays():
                out.append((f"{net_name}/{arr_name}", arr))
        return out

    def set_flat(self, values: list[np.ndarray]) -> None:
        names = [name for name, _ in self.flat_arrays()]
        for name, val in zip(names, values):
            net_name, arr_name = name.split("/")
            self.nets[net_name].set_array(arr_name, val)

    def lift(self, tape: Tape) -> tuple[dict[str, MlpParams], list[Var]]:
        """Lift every array onto the tape; the Var list matches flat_arrays()."""
        collector: list[Var] = []
        lifted = {name: lift_mlp(tape, net, collector) for name, net in self.nets.items()}
        return lifted, collector


def init_sig_rde(state_dim: int, brownian_dim: int, width: int, control_depth: int,
                 prefix_dim: int, rng: np.random.Generator, activation: str = "tanh",
                 head_hidden: int | None = None, y_bias: float = 0.0,
                 z_bias: np.ndarray | None = None,
                 head_activation: str = "relu") -> SigRdeParams:
    """Initialise backbone and heads.

    The integrator nets keep the bounded default activation; the decoder
    heads default to relu, which represents kinked payoffs natively. Head
    biases admit warm starts (crude price for Y, a one-step weight estimate
    for Z), and the final value-head weights start at zero so the untrained
    Y sits exactly at its bias.
    """
    q = control_dim(state_dim, control_depth)
    hh = head_hidden or max(width // 4, 16)
    f_hidden = max(width // 2, 16)
    nets = {
        "h_init": mlp_init([state_dim, width], activation, rng=rng),
        "combiner": mlp_init([width + prefix_dim, width, width], activation, rng=rng),
        "f_net": mlp_init([width, f_hidden, width * q], activation, rng=rng),
        "g_y": mlp_init([width, hh, 1], head_activation, rng=rng, final_bias=y_bias),
        "g_z": mlp_init([width, hh, brownian_dim], head_activation, rng=rng),
        "g_gamma": mlp_init([width, hh, state_dim * state_dim], head_activation, rng=rng),
    }
    nets["g_y"].weights[-1][:] = 0.0
    if z_bias is not None:
        nets["g_z"].weights[-1][:] = 0.0
        nets["g_z"].biases[-1][:] = np.asarray(z_bias, dtype=float)
    return SigRdeParams(width, q, state_dim, brownian_dim, prefix_dim, nets)


# ---------------------------------------------------------------------------
# Integration and decoding
# ---------------------------------------------------------------------------


def start_state(lifted: dict[str, MlpParams], x: np.ndarray, prefix_coords: np.ndarray,
                tape: Tape) -> Var:
    """Window head state: state embedding combined with prefix log-signature."""
    emb = mlp_apply(lifted["h_init"], tape.leaf(x))
    joined = ad.concat([emb, tape.leaf(prefix_coords)], axis=-1)
    return mlp_apply(lifted["combiner"], joined)


def rde_step(f_net: MlpParams, h: Var, du: np.ndarray) -> Var:
    """Depth-1 log-ODE step: h + F(h) . dU."""
    batch, width = h.shape
    q = du.shape[-1]
    fh = ad.reshape(mlp_apply(f_net, h), (batch, width, q))
    return ad.add(h, ad.contract_q(fh, du))


def integrate_window(f_net: MlpParams, controls: np.ndarray, h_start: Var) -> list[Var]:
    """Unroll the recurrence over a window; gradients flow through all steps."""
    hs = [h_start]
    for n in range(controls.shape[-2]):
        hs.append(rde_step(f_net, hs[-1], controls[..., n, :]))
    return hs


def decode_heads(lifted: dict[str, MlpParams], h: Var, sqrt_factor: np.ndarray):
    """Decode (Y, Z, Gamma): value, scaled integrand, symmetrised curvature."""
    y = ad.reshape(mlp_apply(lifted["g_y"], h), (-1,))
    z_raw = mlp_apply(lifted["g_z"], h)
    m_w = z_raw.shape[-1]
    if sqrt_factor.shape[-1] != m_w:
        raise ValueError("sqrt factor incompatible with Z head width")
    z = ad.rowvec_matmul(z_raw, sqrt_factor)
    gamma_flat = mlp_apply(lifted["g_gamma"], h)
    d = int(round(np.sqrt(gamma_flat.shape[-1])))
    gamma_raw = ad.reshape(gamma_flat, (-1, d, d))
    gamma = ad.mul(ad.add(gamma_raw, ad.transpose_last2(gamma_raw)), 0.5)
    return y, z, gamma


# ---------------------------------------------------------------------------
# Discrete recurrent baseline
# ---------------------------------------------------------------------------


def init_gru(input_dim: int, width: int, rng: np.random.Generator) -> MlpParams:
    """Gated recurrent cell packed as one parameter block.

    Weight layout: w0/b0 = input->gates (input_dim x 3*width), w1/b1 =
    hidden->gates (width x 3*width). Gate order: update, reset, candidate.
    An input layernorm (lng0/lnb0) precedes the cell.
    """
    bound_x = np.sqrt(6.0 / (input_dim + 3 * width))
    bound_h = np.sqrt(6.0 / (width + 3 * width))
    return MlpParams(
        weights=[
            rng.uniform(-bound_x, bound_x, size=(input_dim, 3 * width)),
            rng.uniform(-bound_h, bound_h, size=(width, 3 * width)),
        ],
        biases=[np.zeros(3 * width), np.zeros(3 * width)],
        activation="tanh",
        ln_gains=[np.ones(input_dim)],
        ln_offsets=[np.zeros(input_dim)],
    )


def gru_step(cell: MlpParams, h: Var, x: np.ndarray) -> Var:
    width = h.shape[-1]
    tape = h.tape
    xn = ad.layernorm(tape.leaf(x), cell.ln_gains[0], cell.ln_offsets[0])
    gx = ad.add(ad.matmul(xn, cell.weights[0]), cell.biases[0])
    gh = ad.add(ad.matmul(h, cell.weights[1]), cell.biases[1])
    update = ad.sigmoid(ad.add(gx[:, :width], gh[:, :width]))
    reset = ad.sigmoid(ad.add(gx[:, width : 2 * width], gh[:, width : 2 * width]))
    cand = ad.tanh(ad.add(gx[:, 2 * width :], ad.mul(reset, gh[:, 2 * width :])))
    keep = ad.sub(1.0, update)
    return ad.add(ad.mul(keep, h), ad.mul(update, cand))


def integrate_window_gru(cell: MlpParams, inputs: np.ndarray, h_start: Var) -> list[Var]:
    hs = [h_start]
    for n in range(inputs.shape[-2]):
        hs.append(gru_step(cell, hs[-1], inputs[..., n, :]))
    return hs
