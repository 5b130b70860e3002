"""Ensemble Kalman-Bucy filter for the three-mode quadratic system.

The comparison baseline for the closed-form sweeps: each ensemble member
carries its own hidden pair (y_i, z_i) and an independent Brownian triple;
the gains are recomputed every step from ensemble sample covariances
between the hidden members and the observed-equation drift.  No inflation
or localization is applied; the point of the baseline is the unmodified
method's behavior, including its divergence under weak observation noise.
"""

from __future__ import annotations

import numpy as np

from .builtin import TriadParams
from .inference import GaussianPath
from .rng import stream
from .series import TrajectorySeries

__all__ = ["enkbf_run", "EnkbfError"]


class EnkbfError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


def enkbf_run(params: TriadParams, x_obs: TrajectorySeries, n_members: int,
              seed: int, init=(0.0, 0.0), keep_members: bool = False):
    """Run the ensemble filter along one observed x realization.

    Returns ``(path, members)`` where ``path`` is a GaussianPath holding the
    ensemble mean and sample covariance of (y, z) at every step, and
    ``members`` is the (J+1, N, 2) member array when ``keep_members`` is
    set, else None.

    The observed time derivative is the forward difference of the data
    (matching the closed-form filter); the innovation term of each member
    includes its own observation-noise perturbation sigma_x dW_x / dt.
    Degenerate innovation spread (sample variance below 1e-14) aborts with
    the step index.
    """
    if n_members < 2:
        raise ValueError("need at least 2 ensemble members for sample covariances")
    if x_obs.dim != 1:
        raise ValueError("x_obs must be the scalar observed component")
    p = params
    dt = x_obs.dt
    x = x_obs.values[:, 0]
    n_steps = len(x) - 1
    gen = stream(seed, 0)

    y = np.full(n_members, float(init[0]))
    z = np.full(n_members, float(init[1]))
    means = np.empty((n_steps + 1, 2))
    covs = np.empty((n_steps + 1, 2, 2))
    members = np.empty((n_steps + 1, n_members, 2)) if keep_members else None

    def record(j):
        means[j, 0], means[j, 1] = y.mean(), z.mean()
        dy = y - means[j, 0]
        dz = z - means[j, 1]
        covs[j, 0, 0] = dy @ dy / (n_members - 1)
        covs[j, 1, 1] = dz @ dz / (n_members - 1)
        covs[j, 0, 1] = covs[j, 1, 0] = dy @ dz / (n_members - 1)
        if keep_members:
            members[j, :, 0], members[j, :, 1] = y, z

    record(0)
    inv_var = 1.0 / (p.sigma_x ** 2 * (n_members - 1))
    sqdt = np.sqrt(dt)
    for j in range(n_steps):
        xj = x[j]
        dx_dt = (x[j + 1] - xj) / dt
        dw = gen.standard_normal((n_members, 3)) * sqdt
        g = p.beta_x * xj + p.alpha * xj * y + p.alpha * y * z
        g_dev = g - g.mean()
        gain_y = inv_var * ((y - y.mean()) @ g_dev)
        gain_z = inv_var * ((z - z.mean()) @ g_dev)
        innov = (g - dx_dt) * dt + p.sigma_x * dw[:, 0]
        if np.var(g + p.sigma_x * dw[:, 0] / dt) < 1e-14:
            raise EnkbfError("ensemble collapse: innovation spread vanished", j)
        f1 = p.beta_y * y - p.alpha * xj ** 2 + 2.0 * p.alpha * xj * z
        f2 = p.beta_z * z - 3.0 * p.alpha * xj * y
        y = y + f1 * dt + p.sigma_y * dw[:, 1] - gain_y * innov
        z = z + f2 * dt + p.sigma_z * dw[:, 2] - gain_z * innov
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise EnkbfError("ensemble member diverged to non-finite values", j + 1)
        record(j + 1)

    path = GaussianPath(dt, x_obs.t0, means, covs, kind="filter")
    return path, members


def gain_pair(params: TriadParams, x_value: float, y: np.ndarray, z: np.ndarray):
    """Sample-covariance gains between hidden members and the observed drift.

    Exposed for direct verification against the summation formula.
    """
    p = params
    n = len(y)
    g = p.beta_x * x_value + p.alpha * x_value * y + p.alpha * y * z
    gm = g.mean()
    n1 = np.sum((y - y.mean()) * (g - gm)) / (p.sigma_x ** 2 * (n - 1))
    n2 = np.sum((z - z.mean()) * (g - gm)) / (p.sigma_x ** 2 * (n - 1))
    return n1, n2
