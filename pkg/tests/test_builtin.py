import numpy as np
import pytest

from condgauss import (
    Climate4dParams,
    L96Params,
    NoisePath,
    TriadParams,
    as_general,
    build_model,
    calibrate_linear_gaussian,
    climate4d_approximate,
    climate4d_perfect,
    l96_perfect,
    simulate,
    simulate_with_noise,
    triad_augmented,
    triad_bare_truncation,
    triad_perfect,
)
from condgauss.builtin import (
    Climate4dApproxParams,
    MODEL_NAMES,
    default_dt,
    default_l96_approx_params,
    l96_approximate,
)
from condgauss.rng import stream

ALPHA = np.pi / np.sqrt(2.0)


def test_triad_params_validation():
    assert TriadParams.regime_i().alpha == pytest.approx(ALPHA)
    assert TriadParams.regime_ii().sigma_x == 0.1
    with pytest.raises(ValueError):
        TriadParams(beta_x=-0.1)
    with pytest.raises(ValueError):
        TriadParams(beta_y=0.5)
    with pytest.raises(ValueError):
        TriadParams(sigma_x=0.0)
    TriadParams(alpha=0.0)  # degenerate linear case is allowed


def test_triad_drift_hand_substitution():
    model = triad_perfect(TriadParams.regime_i())
    d = model.drift(np.ones(3), 0.0)
    np.testing.assert_allclose(d, [0.1 + 2 * ALPHA, -0.5 + ALPHA, -1.0 - 3 * ALPHA])


def test_triad_alpha_zero_decouples():
    model = triad_perfect(TriadParams(alpha=0.0))
    u = np.array([1.3, -0.4, 2.0])
    np.testing.assert_allclose(model.drift(u, 0.0), [0.1 * 1.3, 0.5 * 0.4, -2.0])


def test_triad_energy_conservation():
    # quadratic drift part conserves u . B(u, u) identically
    p = TriadParams.regime_i()
    model = triad_perfect(p)
    lin = np.diag([p.beta_x, p.beta_y, p.beta_z])
    for u in stream(3, 0).standard_normal((1000, 3)) * 3.0:
        quad = model.drift(u, 0.0) - lin @ u
        assert abs(u @ quad) <= 1e-10 * max(1.0, np.abs(quad).max() * np.abs(u).max())


def test_triad_augmented_p_drift_at_zero_x():
    p = TriadParams.regime_i()
    aug = triad_augmented(p, y_bar=0.1, z_bar=0.2)
    gen = as_general(aug)
    state = np.array([0.0, 0.7, -0.3, 1.9, 0.4, 0.8])  # x=0, arbitrary (y,z,p,q,r)
    drift = gen.drift(state, 0.0)
    assert drift[3] == pytest.approx(p.sigma_y ** 2 + 2 * p.beta_y * 1.9)


def test_triad_augmented_zero_means_make_pqr_noiseless():
    aug = triad_augmented(TriadParams.regime_i(), y_bar=0.0, z_bar=0.0)
    b2 = aug.b2(np.zeros(1), 0.0)
    np.testing.assert_array_equal(b2[2:], 0.0)


def test_triad_augmented_matches_quadratic_dynamics_pathwise():
    # simulate the full model, form (y^2, yz, z^2) from the path, and compare
    # their increments with the augmented drift/noise driven by the same
    # increments; the residual is the Ito remainder, shrinking like dt in RMS
    p = TriadParams.regime_i()
    model = triad_perfect(p)

    def rms_residual(dt, steps):
        noise = NoisePath.generate(11, steps, 3, dt)
        path = simulate_with_noise(model, np.array([0.4, 0.3, -0.2]), noise)
        x, y, z = path.values[:, 0], path.values[:, 1], path.values[:, 2]
        q = y * z
        res = []
        for j in range(steps):
            dq_path = q[j + 1] - q[j]
            drift_q = ((p.beta_y + p.beta_z) * q[j] - p.alpha * x[j] ** 2 * z[j]
                       - 3 * p.alpha * x[j] * y[j] ** 2 + 2 * p.alpha * x[j] * z[j] ** 2)
            noise_q = p.sigma_y * z[j] * noise.increments[j, 1] \
                + p.sigma_z * y[j] * noise.increments[j, 2]
            res.append(dq_path - drift_q * dt - noise_q)
        return np.sqrt(np.mean(np.square(res)))

    r1 = rms_residual(2e-3, 4000)
    r2 = rms_residual(1e-3, 8000)
    assert r1 < 5e-2
    assert r2 < 0.75 * r1  # first-order shrink (sqrt(2) up to noise)


def test_bare_truncation_drops_only_the_yz_term():
    p = TriadParams.regime_i()
    bt = triad_bare_truncation(p)
    gen_bt = as_general(bt)
    gen_full = as_general(triad_augmented(p))  # shares (y, z) rows
    for u in stream(4, 0).standard_normal((50, 3)):
        state = u
        d_bt = gen_bt.drift(state, 0.0)
        assert d_bt[0] == pytest.approx(p.beta_x * state[0] + p.alpha * state[0] * state[1])
        # y and z equations match the full quadratic model
        full = triad_perfect(p).drift(state, 0.0)
        np.testing.assert_allclose(d_bt[1:], full[1:], atol=1e-12)
    d = gen_bt.drift(np.ones(3), 0.0)
    assert d[0] == pytest.approx(0.1 + ALPHA)


# -- two-layer lattice --------------------------------------------------------

def test_l96_params_and_c_profile():
    params = L96Params()
    assert params.I == 40 and params.J == 4
    assert params.c[1] == pytest.approx(2 + 0.7 * np.cos(4 * np.pi / 40))
    with pytest.raises(ValueError):
        L96Params(I=3)
    with pytest.raises(ValueError):
        L96Params(J=0)
    with pytest.raises(ValueError):
        L96Params(c=np.zeros(40))


def test_l96_cyclic_small_scale_indices():
    # the flattened small-scale variables form one ring that is contiguous
    # across sites: v_{i, J+1} = v_{i+1, 1} and v_{i, 0} = v_{i-1, J}.
    # Perturb the last ring slot v_{4,2} at a random state and check which
    # equations react.
    params = L96Params(I=4, J=2, sigma_u=1.0, sigma_v=1.0)
    model = l96_perfect(params)
    base = stream(12, 0).standard_normal(model.dim)
    d0 = model.drift(base, 0.0)
    bumped = base.copy()
    bumped[4 + 7] += 0.37
    d1 = model.drift(bumped, 0.0)
    changed = set(np.nonzero(np.abs(d1 - d0) > 1e-12)[0])
    # slot 7 appears in the advection stencils of ring slots 6, 5 and 0
    # (the wrap across sites), in its own damping, and in u_4's coupling sum
    assert changed == {4 + 5, 4 + 6, 4 + 7, 4 + 0, 3}


def test_l96_periodicity_shift_invariance():
    # homogeneous c: rotating sites by one permutes the drift identically
    params = L96Params(I=6, J=3, c=np.full(6, 2.0))
    model = l96_perfect(params)
    u = stream(5, 0).standard_normal(model.dim)
    us, vs = u[:6], u[6:].reshape(6, 3)
    shifted = np.concatenate([np.roll(us, 1), np.roll(vs, 1, axis=0).reshape(-1)])
    d = model.drift(u, 0.0)
    d_shift = model.drift(shifted, 0.0)
    np.testing.assert_allclose(d_shift[:6], np.roll(d[:6], 1), atol=1e-12)
    np.testing.assert_allclose(d_shift[6:].reshape(6, 3),
                               np.roll(d[6:].reshape(6, 3), 1, axis=0), atol=1e-12)


def test_l96_no_coupling_decouples_layers():
    params = L96Params(I=4, J=1, h=0.0)
    model = l96_perfect(params)
    u = stream(6, 0).standard_normal(model.dim)
    base = model.drift(u, 0.0)
    bumped = u.copy()
    bumped[4:] += 1.0
    assert np.abs(model.drift(bumped, 0.0)[:4] - base[:4]).max() < 1e-12


def test_l96_approximate_structure():
    params = L96Params(I=4, J=2)
    hatted = default_l96_approx_params(params)
    approx = l96_approximate(hatted)
    assert approx.n1 == 4 and approx.n2 == 8
    a1 = approx.a1(np.zeros(4), 0.0)
    np.testing.assert_array_equal(a1, np.diag(-hatted.d_hat.reshape(-1)))
    A1 = approx.A1(np.zeros(4), 0.0)
    assert A1[0, 0] == -hatted.a_hat[0] and A1[0, 2] == 0.0
    # hidden drift: v_hat + a_hat * u_i
    a0 = approx.a0(np.array([1.0, 0.0, 0.0, 0.0]), 0.0)
    assert a0[0] == pytest.approx(hatted.v_hat[0, 0] + hatted.a_hat[0])
    assert a0[2] == pytest.approx(hatted.v_hat[1, 0])


# -- four-mode climate model --------------------------------------------------

def test_climate4d_params_defaults_and_constraint():
    p = Climate4dParams()
    assert p.d1 == 1.0 and p.sigma2 == 2.0
    assert p.F1 == p.F2 == p.F3 == p.F4 == 0.0
    assert p.b123 + p.b213 + p.b312 == 0.0
    with pytest.raises(ValueError):
        Climate4dParams(b312=0.0)


def test_climate4d_y2_drift_hand_substitution():
    model = climate4d_perfect(Climate4dParams())
    gen = as_general(model)
    state = np.array([0.0, 1.0, 0.0, 1.0])  # x2 = 1, y2 = 1
    assert gen.drift(state, 0.0)[3] == pytest.approx(-0.5 - 0.5)


def test_climate4d_energy_conservation():
    p = Climate4dParams()
    model = climate4d_perfect(p)
    gen = as_general(model)
    lin = np.array([
        [-p.d1, -p.L12, p.L13, 0.0],
        [p.L12, -p.d2, 0.0, p.L24],
        [-p.L13, 0.0, -p.gamma1, 0.0],
        [0.0, -p.L24, 0.0, -p.gamma2],
    ])
    for u in stream(7, 0).standard_normal((1000, 4)) * 2.0:
        quad = gen.drift(u, 0.0) - lin @ u
        scale = max(1.0, np.abs(quad).max() * np.abs(u).max())
        assert abs(u @ quad) <= 1e-10 * scale


def test_climate4d_approximate_hidden_block_is_state_independent():
    p = Climate4dApproxParams(base=Climate4dParams(), gamma3_hat=0.8, gamma4_hat=0.6,
                              y1_hat=0.3, y2_hat=-0.1)
    model = climate4d_approximate(p)
    for x in stream(8, 0).standard_normal((20, 2)):
        np.testing.assert_array_equal(model.a1(x, 0.0), np.diag([-0.8, -0.6]))
    a0 = model.a0(np.zeros(2), 0.0)
    np.testing.assert_allclose(a0, [0.8 * 0.3, 0.6 * (-0.1)])


# -- calibration ---------------------------------------------------------------

def test_calibrate_linear_gaussian_direct():
    d, sig, v = calibrate_linear_gaussian(mean=0.0, variance=1.0, decorr_time=2.0)
    assert (d, sig, v) == (0.5, pytest.approx(np.sqrt(2 * 1.0 * 0.5)), 0.0)
    assert sig == pytest.approx(1.0)
    with pytest.raises(ValueError):
        calibrate_linear_gaussian(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        calibrate_linear_gaussian(0.0, -1.0, 1.0)


def test_calibrate_linear_gaussian_ou_roundtrip():
    # an OU process with rate 1 and noise 2 has variance sigma^2/2 = 2 and
    # decorrelation time 1; calibration must return sigma_hat = 2
    d, sig, v = calibrate_linear_gaussian(mean=0.0, variance=2.0, decorr_time=1.0)
    assert sig == pytest.approx(2.0)
    assert d == pytest.approx(1.0)


def test_calibrate_linear_gaussian_coupling_offset():
    params = L96Params(I=8)
    i = 2
    coupling = params.h * params.c[i] / params.J * 1.7  # u-bar = 1.7
    d, sig, v = calibrate_linear_gaussian(mean=0.4, variance=0.9,
                                          decorr_time=1.25, coupling=coupling)
    assert (v + coupling) / d == pytest.approx(0.4)


# -- registry -------------------------------------------------------------------

def test_registry_names_and_default_dt():
    assert MODEL_NAMES == ("climate4d", "climate4d-approx", "l96", "l96-approx",
                           "triad", "triad-aug", "triad-bt")
    assert default_dt("triad-aug") == 5e-4
    assert default_dt("l96") == 2e-3
    assert default_dt("climate4d-approx") == 5e-3


def test_build_model_with_overrides():
    model = build_model("triad-aug", {"sigma_x": 0.1, "y_bar": 0.2, "z_bar": 0.3})
    b1 = model.B1(np.zeros(1), 0.0)
    assert b1[0, 0] == 0.1
    gen = build_model("l96", {"I": 4, "J": 1})
    assert gen.dim == 8
    with pytest.raises(KeyError):
        build_model("nope")
    with pytest.raises(ValueError):
        build_model("triad", {"not_a_param": 1.0})
