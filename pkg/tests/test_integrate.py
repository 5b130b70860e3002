import numpy as np
import pytest

from condgauss import (
    BlowUpError,
    GeneralSdeModel,
    NoisePath,
    TriadParams,
    as_general,
    simulate,
    simulate_ensemble,
    simulate_with_noise,
    triad_augmented,
    triad_perfect,
)
from condgauss.series import TrajectorySeries


def decay_model(rate=1.0, noise=0.0):
    return GeneralSdeModel(
        dim=1,
        drift=lambda u, t: -rate * u,
        diffusion=lambda u, t: np.broadcast_to(np.array([[noise]]), u.shape[:-1] + (1, 1)),
        noise_dim=1,
    )


def test_deterministic_euler_decay():
    model = decay_model(noise=0.0)
    out = simulate(model, np.array([1.0]), dt=0.1, steps=10, seed=0)
    assert out.values[-1, 0] == pytest.approx(0.9 ** 10)


def test_pure_diffusion_variance_over_seeds():
    model = GeneralSdeModel(
        dim=1, drift=lambda u, t: np.zeros_like(u),
        diffusion=lambda u, t: np.broadcast_to(np.eye(1), u.shape[:-1] + (1, 1)),
        noise_dim=1,
    )
    dt, steps, n = 0.05, 10, 10000
    finals = np.empty(n)
    for seed in range(n):
        finals[seed] = simulate(model, np.zeros(1), dt, steps, seed=seed).values[-1, 0]
    target = steps * dt
    se = target * np.sqrt(2.0 / (n - 1))
    assert abs(finals.var(ddof=1) - target) < 3 * se
    assert abs(finals.mean()) < 3 * np.sqrt(target / n)


def test_simulate_determinism():
    model = triad_perfect(TriadParams.regime_i())
    a = simulate(model, np.zeros(3), 5e-4, 500, seed=42)
    b = simulate(model, np.zeros(3), 5e-4, 500, seed=42)
    np.testing.assert_array_equal(a.values, b.values)
    c = simulate(model, np.zeros(3), 5e-4, 500, seed=43)
    assert np.abs(a.values - c.values).max() > 0


def test_noise_path_regeneration_and_variance():
    a = NoisePath.generate(9, 20000, 3, 1e-2)
    b = NoisePath.generate(9, 20000, 3, 1e-2)
    np.testing.assert_array_equal(a.increments, b.increments)
    # per-entry variance dt within 5 standard errors
    var = a.increments.var()
    n = a.increments.size
    assert abs(var - 1e-2) < 5 * 1e-2 * np.sqrt(2.0 / n)


def test_simulate_with_noise_zero_path_is_deterministic():
    model = decay_model(noise=1.0)
    noise = NoisePath.zeros(10, 1, 0.1)
    out = simulate_with_noise(model, np.array([1.0]), noise)
    assert out.values[-1, 0] == pytest.approx(0.9 ** 10)


def test_simulate_with_noise_shape_mismatch():
    model = decay_model()
    with pytest.raises(ValueError):
        simulate_with_noise(model, np.array([1.0]), NoisePath.zeros(10, 2, 0.1))


def test_fixed_path_reuse_across_models():
    # perfect triad and its augmentation driven by one realization: the
    # x-components agree until the augmented q-state drifts away from y*z
    params = TriadParams.regime_i()
    perfect = triad_perfect(params)
    aug = as_general(triad_augmented(params, y_bar=0.0, z_bar=0.0))
    noise = NoisePath.generate(21, 2000, 3, 5e-4)
    path_p = simulate_with_noise(perfect, np.array([0.3, 0.2, -0.1]), noise)
    u0_aug = np.array([0.3, 0.2, -0.1, 0.2 ** 2, 0.2 * -0.1, 0.1 ** 2])
    path_a = simulate_with_noise(aug, u0_aug, noise)
    # first step identical (q == y z at t=0), later steps diverge
    np.testing.assert_allclose(path_a.values[1, :3], path_p.values[1], atol=1e-12)
    assert np.abs(path_a.values[-1, 0] - path_p.values[-1, 0]) > 0


def test_blow_up_error_names_step():
    model = GeneralSdeModel(
        dim=1, drift=lambda u, t: u ** 3,
        diffusion=lambda u, t: np.zeros(u.shape[:-1] + (1, 1)), noise_dim=1)
    with pytest.raises(BlowUpError) as err:
        simulate(model, np.array([5.0]), dt=1.0, steps=100, seed=0)
    assert 0 < err.value.step <= 100


def test_series_finiteness_guard():
    with pytest.raises(ValueError):
        TrajectorySeries(0.1, 0.0, np.array([[0.0], [np.nan]]))


def test_ou_weak_convergence_of_stationary_variance():
    # du = -u dt + dW: discrete stationary variance exceeds 1/2 by O(dt)
    model = GeneralSdeModel(
        dim=1, drift=lambda u, t: -u,
        diffusion=lambda u, t: np.broadcast_to(np.eye(1), u.shape[:-1] + (1, 1)),
        noise_dim=1,
    )
    ests = {}
    for dt, steps in ((1e-2, 8000), (5e-3, 16000)):
        burn = steps // 4
        paths = simulate_ensemble(model, np.zeros((20000, 1)), dt, steps, seed=31,
                                  record=range(burn, steps + 1, 50))
        ests[dt] = paths[:, :, 0].var()
    # both biased high, error shrinking with dt (within MC noise)
    assert ests[1e-2] > 0.5 and ests[5e-3] > 0.5 - 5e-4
    assert ests[1e-2] - 0.5 > (ests[5e-3] - 0.5) - 4e-4


def test_simulate_ensemble_record_subset():
    model = decay_model()
    out = simulate_ensemble(model, np.ones((3, 1)), 0.1, 10, seed=0, record=[0, 5, 10])
    assert out.shape == (3, 3, 1)
    assert out[1, 0, 0] == pytest.approx(0.9 ** 5)
    assert out[2, 0, 0] == pytest.approx(0.9 ** 10)


def test_series_csv_npz_roundtrip(tmp_path):
    model = triad_perfect(TriadParams.regime_i())
    series = simulate(model, np.zeros(3), 5e-4, 50, seed=1, labels=["x", "y", "z"])
    series.to_csv(tmp_path / "s.csv")
    back = TrajectorySeries.from_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.values, series.values)
    assert back.labels == ["x", "y", "z"]
    series.to_npz(tmp_path / "s.npz")
    back2 = TrajectorySeries.from_npz(tmp_path / "s.npz")
    np.testing.assert_array_equal(back2.values, series.values)
    assert back2.seed == 1 and back2.dt == 5e-4
