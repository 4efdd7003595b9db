"""Backbone tests: control construction, log-ODE stepping, window
integration, head decoding, and end-to-end gradient flow on a short window."""

import numpy as np
import pytest

from sigbsde import ad, rde
from sigbsde.ad import Tape, finite_difference_grad, mlp_init
from sigbsde.rde import (
    ControlNormalizer,
    build_control,
    control_dim,
    decode_heads,
    init_gru,
    init_sig_rde,
    integrate_window,
    integrate_window_gru,
    rde_step,
    window_starts,
)
from sigbsde.sde import black_scholes_basket, simulate_batch


@pytest.fixture(scope="module")
def batch():
    model = black_scholes_basket(1, s0=100.0, sigma=0.2)
    return simulate_batch(model, 8, 10, 1.0, seed=4, sig_depth=3)


def test_control_dim():
    # one time channel plus the local Lyndon coordinates of the augmented state
    assert control_dim(1, 1) == 1 + 2
    assert control_dim(1, 2) == 1 + 3
    assert control_dim(2, 2) == 1 + 6


def test_build_control_depth1_is_raw_increment(batch):
    ctrl = build_control(batch, 0, 10, control_depth=1)
    assert ctrl.shape == (8, 10, 3)
    incs = np.diff(batch.X, axis=1)
    assert np.allclose(ctrl[..., 0], batch.dt)
    assert np.allclose(ctrl[..., 1], batch.dt)
    assert np.allclose(ctrl[..., 2:], incs)


def test_build_control_higher_coords_vanish(batch):
    # a single linear segment is primitive: every Lyndon coordinate beyond
    # level 1 is zero, so only the time channel and raw increments survive
    ctrl = build_control(batch, 2, 5, control_depth=2)
    assert ctrl.shape == (8, 5, 1 + 3)
    assert np.allclose(ctrl[..., 3], 0.0)


def test_build_control_matches_group_difference(batch):
    # localized prefix difference: LogSig(S_n^{-1} x S_{n+1}) of the cached
    # prefix signatures equals the single-segment coordinates
    from sigbsde.sigcore import (
        chen_concat, lyndon_basis, project_lyndon, segment_signature,
        tensor_exp, tensor_log,
    )

    ctrl = build_control(batch, 0, 10, control_depth=2)
    path, n = 3, 6
    basis = lyndon_basis(2, 2)
    inc = np.concatenate([[batch.dt], batch.X[path, n + 1] - batch.X[path, n]])
    prefix = segment_signature(np.array([0.123, 4.56]), 2)  # arbitrary prefix
    extended = chen_concat(prefix, segment_signature(inc, 2))
    inv_levels = tensor_log(prefix)
    inv_levels.levels = [-l for l in inv_levels.levels]
    local = chen_concat(tensor_exp(inv_levels), extended)
    coords = project_lyndon(tensor_log(local), basis)
    assert np.allclose(coords, ctrl[path, n, 1:], atol=1e-12)


def test_build_control_constant_velocity_identical():
    from sigbsde.sde import MarketModel

    model = MarketModel(
        dim=1, brownian_dim=1, x0=np.array([100.0]),
        drift=lambda t, s: np.ones_like(s.state),
        diffusion=lambda t, s: np.zeros((s.state.shape[0], 1, 1)),
    )
    b = simulate_batch(model, 2, 6, 1.0, seed=0, sig_depth=2)
    ctrl = build_control(b, 0, 6, control_depth=2)
    assert np.allclose(ctrl - ctrl[:, :1], 0.0, atol=1e-12)


def test_build_control_window_bounds(batch):
    with pytest.raises(ValueError):
        build_control(batch, 8, 5)


def test_window_starts_includes_terminal():
    assert window_starts(50, 12, 6) == [0, 6, 12, 18, 24, 30, 36, 38]
    assert window_starts(24, 12, 6) == [0, 6, 12]
    assert window_starts(10, 10, 5) == [0]
    with pytest.raises(ValueError):
        window_starts(8, 10, 5)


def test_rde_step_zero_field_is_identity():
    tape = Tape()
    f_net = mlp_init([2, 2 * 3], rng=np.random.default_rng(0))
    f_net.weights[0][:] = 0.0
    lifted = ad.lift_mlp(tape, f_net)
    h = tape.leaf(np.array([[1.0, -2.0]]))
    h2 = rde_step(lifted, h, np.ones((1, 3)))
    assert np.allclose(h2.value, h.value)


def test_rde_step_constant_field():
    # p = q = 1 with F == 1: one step adds exactly dU
    tape = Tape()
    f_net = mlp_init([1, 1], rng=np.random.default_rng(0))
    f_net.weights[0][:] = 0.0
    f_net.biases[0][:] = 1.0
    lifted = ad.lift_mlp(tape, f_net)
    h = tape.leaf(np.array([[2.0]]))
    h2 = rde_step(lifted, h, np.array([[0.5]]))
    assert np.allclose(h2.value, [[2.5]])


def test_rde_step_linear_field_euler_order():
    # dh = w h du approximates exp growth; halving the step size should
    # shrink the one-step defect by about 4x (second-order local error)
    w = 0.7

    def one_step_defect(dt):
        tape = Tape()
        f_net = mlp_init([1, 1], rng=np.random.default_rng(0))
        f_net.weights[0][:] = w
        f_net.biases[0][:] = 0.0
        lifted = ad.lift_mlp(tape, f_net)
        h = tape.leaf(np.array([[1.0]]))
        h2 = rde_step(lifted, h, np.array([[dt]]))
        return abs(h2.value[0, 0] - np.exp(w * dt))

    ratio = one_step_defect(0.1) / one_step_defect(0.05)
    assert 3.0 < ratio < 5.0


def test_integrate_window_trivial_cases():
    tape = Tape()
    f_net = mlp_init([2, 2 * 3], rng=np.random.default_rng(1))
    lifted = ad.lift_mlp(tape, f_net)
    h0 = tape.leaf(np.zeros((4, 2)))
    hs = integrate_window(lifted, np.zeros((4, 0, 3)), h0)
    assert len(hs) == 1 and hs[0] is h0
    f_net.weights[0][:] = 0.0
    f_net.biases[0][:] = 0.0
    lifted0 = ad.lift_mlp(tape, f_net)
    hs = integrate_window(lifted0, np.random.default_rng(0).normal(size=(4, 5, 3)), h0)
    for h in hs[1:]:
        assert np.allclose(h.value, h0.value)


def test_integrate_window_composition():
    rng = np.random.default_rng(2)
    f_net = mlp_init([3, 9], rng=rng)
    controls = rng.normal(size=(2, 6, 3)) * 0.1
    tape = Tape()
    lifted = ad.lift_mlp(tape, f_net)
    h0 = tape.leaf(rng.normal(size=(2, 3)))
    full = integrate_window(lifted, controls, h0)
    first = integrate_window(lifted, controls[:, :3], h0)
    second = integrate_window(lifted, controls[:, 3:], first[-1])
    assert np.array_equal(full[-1].value, second[-1].value)


def test_decode_heads_shapes_and_scaling():
    rng = np.random.default_rng(3)
    params = init_sig_rde(2, 2, width=8, control_depth=1, prefix_dim=5, rng=rng)
    tape = Tape()
    lifted, _ = params.lift(tape)
    # force g_z output to [1, 0] rows: zero weights, bias (1, 0)
    for w in lifted["g_z"].weights:
        w.value[:] = 0.0
    lifted["g_z"].biases[-1].value[:] = np.array([1.0, 0.0])
    h = tape.leaf(rng.normal(size=(3, 8)))
    fac = np.stack([np.diag([2.0, 3.0])] * 3)
    y, z, gamma = decode_heads(lifted, h, fac)
    assert y.value.shape == (3,)
    assert np.allclose(z.value, [[2.0, 0.0]] * 3)
    assert gamma.value.shape == (3, 2, 2)


def test_decode_gamma_symmetry_exact():
    rng = np.random.default_rng(4)
    params = init_sig_rde(3, 3, width=8, control_depth=1, prefix_dim=5, rng=rng)
    tape = Tape()
    lifted, _ = params.lift(tape)
    h = tape.leaf(rng.normal(size=(6, 8)))
    fac = np.stack([np.eye(3)] * 6)
    _, _, gamma = decode_heads(lifted, h, fac)
    gv = gamma.value
    assert np.max(np.abs(gv - np.swapaxes(gv, -1, -2))) == 0.0


def test_decode_sym_idempotent():
    # symmetrising twice changes nothing: 0.5 (A + A^T) is a projection
    a = np.random.default_rng(5).normal(size=(2, 2))
    sym = 0.5 * (a + a.T)
    assert np.allclose(0.5 * (sym + sym.T), sym)


def test_gradient_flow_three_step_window():
    # end-to-end: d(loss)/d(h_start) through 3 RDE steps vs finite differences
    rng = np.random.default_rng(6)
    f_net = mlp_init([4, 8, 4 * 3], rng=rng)
    controls = rng.normal(size=(2, 3, 3)) * 0.2
    h0_val = rng.normal(size=(2, 4))

    def scalar_loss(arrays):
        tape = Tape(recording=False)
        lifted = ad.lift_mlp(tape, f_net)
        hs = integrate_window(lifted, controls, tape.leaf(arrays[0]))
        return float(ad.square(hs[-1]).sum().value)

    tape = Tape()
    lifted = ad.lift_mlp(tape, f_net)
    h0 = tape.leaf(h0_val)
    hs = integrate_window(lifted, controls, h0)
    out = ad.square(hs[-1]).sum()
    grads = tape.backward(out)
    got = grads[h0.index]
    want = finite_difference_grad(scalar_loss, [h0_val.copy()], eps=1e-6)[0]
    assert np.allclose(got, want, rtol=1e-5, atol=1e-8)


def test_hidden_state_boundedness_tanh_field():
    # one-step move is bounded by ||F(h)||_op * ||dU||; check numerically
    rng = np.random.default_rng(7)
    params = init_sig_rde(1, 1, width=6, control_depth=1, prefix_dim=2, rng=rng)
    tape = Tape()
    lifted, _ = params.lift(tape)
    h = tape.leaf(rng.normal(size=(5, 6)))
    du = rng.normal(size=(5, 3)) * 0.3
    h2 = rde_step(lifted["f_net"], h, du)
    fh = ad.mlp_apply(lifted["f_net"], h).value.reshape(5, 6, 3)
    for i in range(5):
        move = np.linalg.norm(h2.value[i] - h.value[i])
        bound = np.linalg.norm(fh[i], 2) * np.linalg.norm(du[i])
        assert move <= bound + 1e-12


def test_control_normalizer_scale_only_and_freeze():
    norm = ControlNormalizer(3, warmup=2)
    data = np.ones((4, 5, 3))
    data[..., 1] = 10.0
    norm.observe(data)
    out = norm.apply(data)
    assert np.allclose(out[..., 0], out[..., 1], atol=1e-6)  # rms-normalised
    norm.observe(data)
    assert norm.frozen
    scales_before = norm.scales.copy()
    norm.observe(data * 100)  # frozen: must not move
    assert np.array_equal(norm.scales, scales_before)


def test_gru_closed_update_gate_keeps_state():
    rng = np.random.default_rng(8)
    cell = init_gru(3, 4, rng)
    cell.biases[0][:4] = -25.0  # update gate forced shut
    cell.biases[1][:4] = -25.0
    tape = Tape()
    lifted = ad.lift_mlp(tape, cell)
    h0 = tape.leaf(rng.normal(size=(2, 4)))
    hs = integrate_window_gru(lifted, rng.normal(size=(2, 6, 3)), h0)
    assert np.allclose(hs[-1].value, h0.value, atol=1e-12)


def test_gru_gradients_match_fd():
    rng = np.random.default_rng(9)
    cell = init_gru(2, 3, rng)
    inputs = rng.normal(size=(2, 3, 2))
    arrays = [cell.weights[0], cell.weights[1], cell.biases[0], cell.biases[1]]

    def build(leaves):
        lifted = ad.MlpParams(
            weights=[leaves[0], leaves[1]], biases=[leaves[2], leaves[3]],
            activation="tanh",
            ln_gains=[leaves[0].tape.leaf(cell.ln_gains[0])],
            ln_offsets=[leaves[0].tape.leaf(cell.ln_offsets[0])],
        )
        h0 = leaves[0].tape.leaf(np.zeros((2, 3)))
        hs = integrate_window_gru(lifted, inputs, h0)
        return ad.square(hs[-1]).mean()

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = build(leaves)
    grads = tape.backward(out)

    def scalar_f(arrs):
        t = Tape(recording=False)
        return float(build([t.leaf(a) for a in arrs]).value)

    want = finite_difference_grad(scalar_f, [a.copy() for a in arrays], eps=1e-6)
    for leaf, w in zip(leaves, want):
        assert np.allclose(grads[leaf.index], w, rtol=2e-5, atol=1e-8)
