"""Gaussian-mixture density estimation for partially observed systems.

The joint law of (observed X, hidden Y) is approximated by a uniform
mixture whose component l couples a Gaussian kernel centered at an
observed sample X_l with the closed-form conditional Gaussian of Y given
that realization's history.  Because every component is a normalized
Gaussian product, the mixture integrates to one analytically, and its
moments and gradients are available in closed form.

Mixtures over a single long trajectory (components at strided times after
a burn-in) estimate the equilibrium density; mixtures over many short
realizations estimate transient densities.

Bandwidths come from the diffusion-equation fixed-point selector, with
the Gaussian-reference rule as a recorded fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import csv

import numpy as np
from scipy import fft as sp_fft
from scipy import optimize

from .inference import cg_filter
from .models import CgnsModel
from .series import TrajectorySeries

__all__ = [
    "select_bandwidth", "BandwidthResult", "ConditionalMixture", "GridDensity",
    "build_joint_mixture", "build_equilibrium_mixture", "eval_density",
    "eval_gradient", "mixture_moments",
]

LOG_UNDERFLOW = -745.0  # exp() underflows to zero below this


@dataclass(frozen=True)
class BandwidthResult:
    value: float
    used_fallback: bool


def _gaussian_reference_bandwidth(samples: np.ndarray) -> float:
    return 1.06 * samples.std() * len(samples) ** (-0.2)


def _fixed_point(t, n, k_sq, a_sq):
    # t - xi gamma^[7](t) from the diffusion-based selector
    ell = 7
    f = 2.0 * np.pi ** (2 * ell) * np.sum(k_sq ** ell * a_sq * np.exp(-k_sq * np.pi ** 2 * t))
    for s in range(ell - 1, 1, -1):
        odd_prod = np.prod(np.arange(1.0, 2 * s, 2))
        k0 = odd_prod / np.sqrt(2.0 * np.pi)
        const = (1.0 + 0.5 ** (s + 0.5)) / 3.0
        time = (2.0 * const * k0 / (n * f)) ** (2.0 / (3.0 + 2.0 * s))
        f = 2.0 * np.pi ** (2 * s) * np.sum(k_sq ** s * a_sq * np.exp(-k_sq * np.pi ** 2 * time))
    return t - (2.0 * n * np.sqrt(np.pi) * f) ** (-0.4)


def select_bandwidth(samples, return_info: bool = False):
    """Kernel bandwidth via the diffusion-equation fixed point.

    Falls back to the Gaussian-reference rule 1.06 sigma n^{-1/5} when the
    fixed-point solve does not bracket a root; the fallback is flagged in
    the returned info when ``return_info`` is set.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if len(samples) < 50:
        raise ValueError("need at least 50 samples for bandwidth selection")
    if samples.std() == 0.0:
        raise ValueError("degenerate samples: zero variance")

    n_grid = 2 ** 12
    lo, hi = samples.min(), samples.max()
    span = hi - lo
    lo -= span / 10.0
    hi += span / 10.0
    span = hi - lo
    counts, _ = np.histogram(samples, bins=n_grid, range=(lo, hi))
    n_unique = len(np.unique(samples))
    rel = counts / len(samples)
    a = sp_fft.dct(rel, type=2)
    k_sq = np.arange(1, n_grid, dtype=float) ** 2
    a_sq = (a[1:] / 2.0) ** 2

    t_star = None
    try:
        upper = 0.01
        for _ in range(8):
            f_lo = _fixed_point(1e-12, n_unique, k_sq, a_sq)
            f_hi = _fixed_point(upper, n_unique, k_sq, a_sq)
            if np.isfinite(f_lo) and np.isfinite(f_hi) and f_lo * f_hi < 0:
                t_star = optimize.brentq(_fixed_point, 1e-12, upper,
                                         args=(n_unique, k_sq, a_sq))
                break
            upper *= 4.0
    except (ValueError, RuntimeError):
        t_star = None
    if t_star is None or t_star <= 0:
        h = _gaussian_reference_bandwidth(samples)
        fallback = True
    else:
        h = np.sqrt(t_star) * span
        fallback = False
    if return_info:
        return BandwidthResult(value=float(h), used_fallback=fallback)
    return float(h)


# ---------------------------------------------------------------------------
# Conditional mixtures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionalMixture:
    """Uniform mixture of (X-kernel) x (conditional Y Gaussian) products.

    ``bandwidth`` holds per-dimension kernel standard deviations for the
    observed block; the hidden block of component l is Gaussian with
    (y_means[l], y_covs[l]).  A hidden dimension of zero degenerates to a
    plain kernel density on X.
    """

    x_centers: np.ndarray      # (L, n1)
    y_means: np.ndarray        # (L, n2)
    y_covs: np.ndarray         # (L, n2, n2)
    bandwidth: np.ndarray      # (n1,) kernel standard deviations
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x_centers, dtype=float))
        ym = np.asarray(self.y_means, dtype=float).reshape(x.shape[0], -1)
        n2 = ym.shape[1]
        yc = np.asarray(self.y_covs, dtype=float).reshape(x.shape[0], n2, n2)
        bw = np.atleast_1d(np.asarray(self.bandwidth, dtype=float))
        if bw.shape != (x.shape[1],):
            raise ValueError("bandwidth must hold one entry per observed dimension")
        if np.any(bw <= 0):
            raise ValueError("bandwidths must be positive")
        object.__setattr__(self, "x_centers", x)
        object.__setattr__(self, "y_means", ym)
        object.__setattr__(self, "y_covs", yc)
        object.__setattr__(self, "bandwidth", bw)
        # per-component Gaussian factors, precomputed for evaluation
        chols, logdets = [], []
        for cov in yc:
            if n2 == 0:
                chols.append(np.zeros((0, 0)))
                logdets.append(0.0)
                continue
            w, v = np.linalg.eigh(0.5 * (cov + cov.T))
            w = np.clip(w, 1e-300, None)
            chols.append(v * (1.0 / np.sqrt(w)))  # rows of whitener^T
            logdets.append(float(np.sum(np.log(w))))
        object.__setattr__(self, "_y_whiteners", np.asarray(chols))
        object.__setattr__(self, "_y_logdets", np.asarray(logdets))

    @property
    def n_components(self) -> int:
        return self.x_centers.shape[0]

    @property
    def n1(self) -> int:
        return self.x_centers.shape[1]

    @property
    def n2(self) -> int:
        return self.y_means.shape[1]

    @property
    def dim(self) -> int:
        return self.n1 + self.n2

    # -- evaluation --------------------------------------------------------

    def _component_log_densities(self, points: np.ndarray) -> np.ndarray:
        """(n_points, L) log densities of each Gaussian product component."""
        pts = np.atleast_2d(points)
        if pts.shape[1] != self.dim:
            raise ValueError(f"points must have dimension {self.dim}")
        px, py = pts[:, : self.n1], pts[:, self.n1:]
        dx = (px[:, None, :] - self.x_centers[None, :, :]) / self.bandwidth
        log_x = -0.5 * np.sum(dx * dx, axis=2) \
            - 0.5 * self.n1 * np.log(2 * np.pi) - np.log(self.bandwidth).sum()
        if self.n2 == 0:
            return log_x
        dy = py[:, None, :] - self.y_means[None, :, :]
        white = np.einsum("plj,ljk->plk", dy, self._y_whiteners)
        log_y = -0.5 * np.sum(white * white, axis=2) \
            - 0.5 * self.n2 * np.log(2 * np.pi) - 0.5 * self._y_logdets[None, :]
        return log_x + log_y

    def density(self, points) -> np.ndarray:
        """Mixture density at the given points (underflow returns zero)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty(len(pts))
        for j0 in range(0, len(pts), 1024):
            chunk = pts[j0:j0 + 1024]
            logs = self._component_log_densities(chunk)
            m = logs.max(axis=1, keepdims=True)
            safe = np.where(np.isfinite(m), m, 0.0)
            out[j0:j0 + len(chunk)] = np.exp(safe[:, 0]) * np.mean(
                np.exp(logs - safe), axis=1)
        if np.ndim(points) == 1:
            return out[0]
        return out

    def density_and_gradient(self, points):
        """Mixture density and its gradient, both analytic.

        Underflowed points return density 0 and gradient 0.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        dens = np.empty(len(pts))
        grad = np.empty((len(pts), self.dim))
        inv_h2 = 1.0 / self.bandwidth ** 2
        for j0 in range(0, len(pts), 512):
            chunk = pts[j0:j0 + 512]
            logs = self._component_log_densities(chunk)
            m = logs.max(axis=1, keepdims=True)
            safe = np.where(np.isfinite(m), m, 0.0)
            weights = np.exp(logs - safe)  # (p, L)
            px, py = chunk[:, : self.n1], chunk[:, self.n1:]
            gx = -(px[:, None, :] - self.x_centers[None, :, :]) * inv_h2
            parts = [np.einsum("pl,pli->pi", weights, gx)]
            if self.n2:
                dy = py[:, None, :] - self.y_means[None, :, :]
                white = np.einsum("plj,ljk->plk", dy, self._y_whiteners)
                gy = -np.einsum("plk,ljk->plj", white, self._y_whiteners)
                parts.append(np.einsum("pl,pli->pi", weights, gy))
            sl = slice(j0, j0 + len(chunk))
            dens[sl] = np.exp(safe[:, 0]) * weights.mean(axis=1)
            grad[sl] = np.exp(safe[:, 0])[:, None] * np.concatenate(parts, axis=1) \
                / self.n_components
        if np.ndim(points) == 1:
            return dens[0], grad[0]
        return dens, grad

    def marginal_density(self, dims, points) -> np.ndarray:
        """Density of the marginal over the listed coordinates.

        Within a component the observed kernel and the hidden Gaussian are
        independent, so any marginal is again a Gaussian mixture.
        """
        dims = list(dims)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != len(dims):
            raise ValueError("points must match the requested dimensions")
        means = np.empty((self.n_components, len(dims)))
        covs = np.zeros((self.n_components, len(dims), len(dims)))
        for a, da in enumerate(dims):
            if da < self.n1:
                means[:, a] = self.x_centers[:, da]
            else:
                means[:, a] = self.y_means[:, da - self.n1]
            for b, db in enumerate(dims):
                if da < self.n1 and db < self.n1:
                    covs[:, a, b] = (self.bandwidth[da] ** 2) * (da == db)
                elif da >= self.n1 and db >= self.n1:
                    covs[:, a, b] = self.y_covs[:, da - self.n1, db - self.n1]
        out = np.zeros(len(pts))
        for l in range(self.n_components):
            w, v = np.linalg.eigh(covs[l])
            w = np.clip(w, 1e-300, None)
            white = (pts - means[l]) @ (v / np.sqrt(w))
            log_pdf = -0.5 * np.sum(white * white, axis=1) \
                - 0.5 * len(dims) * np.log(2 * np.pi) - 0.5 * np.log(w).sum()
            out += np.exp(log_pdf)
        return out / self.n_components

    def moments(self, coord: int, order: int) -> float:
        return mixture_moments(self, order, coord)

    def mean_vector(self) -> np.ndarray:
        return np.concatenate([self.x_centers.mean(axis=0), self.y_means.mean(axis=0)])

    def covariance_matrix(self) -> np.ndarray:
        """Full covariance of the mixture (kernel variance included)."""
        mu = self.mean_vector()
        centers = np.concatenate([self.x_centers, self.y_means], axis=1)
        dc = centers - mu
        cov = dc.T @ dc / self.n_components
        cov[: self.n1, : self.n1] += np.diag(self.bandwidth ** 2)
        cov[self.n1:, self.n1:] += self.y_covs.mean(axis=0)
        return cov

    # -- persistence ---------------------------------------------------------

    def to_npz(self, path) -> None:
        np.savez_compressed(path, x_centers=self.x_centers, y_means=self.y_means,
                            y_covs=self.y_covs, bandwidth=self.bandwidth)

    @classmethod
    def from_npz(cls, path) -> "ConditionalMixture":
        with np.load(path) as data:
            return cls(x_centers=data["x_centers"], y_means=data["y_means"],
                       y_covs=data["y_covs"], bandwidth=data["bandwidth"])


def eval_density(mixture: ConditionalMixture, point):
    return mixture.density(point)


def eval_gradient(mixture: ConditionalMixture, point):
    return mixture.density_and_gradient(point)[1]


def mixture_moments(mixture: ConditionalMixture, order: int, coord: int) -> float:
    """Centered moment of one coordinate of the mixture, analytically.

    Component marginals along a coordinate are Gaussian; their central
    moments about the mixture mean combine through the mixture law.
    """
    if order not in (1, 2, 3, 4):
        raise ValueError("order must be 1, 2, 3 or 4")
    if coord < mixture.n1:
        m = mixture.x_centers[:, coord]
        v = np.full(mixture.n_components, mixture.bandwidth[coord] ** 2)
    else:
        m = mixture.y_means[:, coord - mixture.n1]
        v = mixture.y_covs[:, coord - mixture.n1, coord - mixture.n1]
    mbar = m.mean()
    d = m - mbar
    if order == 1:
        return 0.0
    if order == 2:
        return float(np.mean(v + d ** 2))
    if order == 3:
        return float(np.mean(d ** 3 + 3 * d * v))
    return float(np.mean(d ** 4 + 6 * d ** 2 * v + 3 * v ** 2))


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _bandwidths_for_centers(centers: np.ndarray):
    values, fallbacks = [], []
    for k in range(centers.shape[1]):
        res = select_bandwidth(centers[:, k], return_info=True)
        values.append(res.value)
        fallbacks.append(res.used_fallback)
    return np.asarray(values), fallbacks


def build_joint_mixture(model: CgnsModel, x_obs_list, t: float) -> ConditionalMixture:
    """Transient joint density at time t from many observed realizations.

    Component l is centered at realization l's observed value at t and
    carries the forward conditional Gaussian of the hidden block given
    that realization's history up to t.
    """
    if not x_obs_list:
        raise ValueError("need at least one observed realization")
    centers, means, covs = [], [], []
    for series in x_obs_list:
        j = series.index_at(t)
        path = cg_filter(model, series.window(series.t0, t))
        centers.append(series.values[j])
        means.append(path.means[-1])
        covs.append(path.covariances[-1])
    centers = np.asarray(centers)
    bw, fallbacks = _bandwidths_for_centers(centers)
    return ConditionalMixture(
        x_centers=centers, y_means=np.asarray(means), y_covs=np.asarray(covs),
        bandwidth=bw, info={"kind": "joint", "t": t, "bandwidth_fallback": fallbacks})


def build_equilibrium_mixture(model: CgnsModel, x_obs: TrajectorySeries,
                              burn_in: float, stride: int | None = None,
                              filter_path=None, min_components: int = 100) -> ConditionalMixture:
    """Equilibrium density from one long observed trajectory.

    One forward sweep conditions the hidden block; components sit at
    strided times after the burn-in.  The default stride is the observed
    series' decorrelation time over dt, so neighboring components are
    roughly independent.
    """
    if filter_path is None:
        filter_path = cg_filter(model, x_obs)
    j0 = x_obs.index_at(x_obs.t0 + burn_in) if burn_in > 0 else 0
    if stride is None:
        stride = _default_stride(x_obs, j0)
    if stride < 1:
        raise ValueError("stride must be at least 1")
    idx = np.arange(j0, len(x_obs.values), stride)
    if len(idx) < min_components:
        raise ValueError(
            f"only {len(idx)} components after burn-in; need {min_components} "
            "(shorten the stride or the burn-in, or lengthen the series)")
    centers = x_obs.values[idx]
    bw, fallbacks = _bandwidths_for_centers(centers)
    return ConditionalMixture(
        x_centers=centers,
        y_means=filter_path.means[idx],
        y_covs=filter_path.covariances[idx],
        bandwidth=bw,
        info={"kind": "equilibrium", "burn_in": burn_in, "stride": int(stride),
              "bandwidth_fallback": fallbacks},
    )


def _default_stride(x_obs: TrajectorySeries, j0: int) -> int:
    from .metrics import decorrelation_time
    taus = []
    for k in range(x_obs.dim):
        try:
            taus.append(decorrelation_time(x_obs.values[j0:, k], x_obs.dt))
        except ValueError:
            continue
    tau = max(taus) if taus else x_obs.dt
    return max(1, int(round(tau / x_obs.dt)))


# ---------------------------------------------------------------------------
# Grid densities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridDensity:
    """Density values tabulated on a uniform tensor grid."""

    axes: tuple
    values: np.ndarray

    def __post_init__(self):
        axes = tuple(np.asarray(ax, dtype=float) for ax in self.axes)
        values = np.asarray(self.values, dtype=float)
        if values.shape != tuple(len(ax) for ax in axes):
            raise ValueError("values shape must match the grid axes")
        if np.any(values < 0):
            raise ValueError("density values must be nonnegative")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", values)

    def cell_volume(self) -> float:
        return float(np.prod([ax[1] - ax[0] for ax in self.axes]))

    def riemann_mass(self) -> float:
        return float(self.values.sum() * self.cell_volume())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"axis{di}" for di in range(len(self.axes))] + ["density"])
            mesh = np.meshgrid(*self.axes, indexing="ij")
            flat = [m.reshape(-1) for m in mesh]
            for row in zip(*flat, self.values.reshape(-1)):
                writer.writerow([repr(float(v)) for v in row])


def mixture_on_grid(mixture: ConditionalMixture, dims, axes) -> GridDensity:
    """Tabulate a marginal of the mixture on a uniform grid."""
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    vals = mixture.marginal_density(dims, pts).reshape(mesh[0].shape)
    return GridDensity(axes=tuple(axes), values=vals)
