"""Diagnostics: autocorrelation, skill scores, mode counting and the
ensemble-forecast harness.

Forecast skill follows the usual verification conventions: the RMSE of
the ensemble mean is normalized by the truth's standard deviation (so the
climatology forecast scores exactly one), and the correlation is Pearson's
over launch points at a fixed lead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import csv

import numpy as np

from .inference import GaussianPath
from .integrate import simulate_ensemble
from .models import GeneralSdeModel
from .rng import stream
from .series import TrajectorySeries

__all__ = [
    "acf", "decorrelation_time", "normalized_rmse", "corr_coeff",
    "count_modes", "kde_1d", "ForecastConfig", "ForecastSkill", "ensemble_forecast",
]


def acf(series, max_lag: int) -> np.ndarray:
    """Biased-normalized autocorrelation, acf[0] = 1."""
    x = np.asarray(series, dtype=float).ravel()
    if len(x) <= max_lag:
        raise ValueError("series must be longer than max_lag")
    x = x - x.mean()
    denom = x @ x
    if denom == 0.0:
        raise ValueError("constant series has no autocorrelation")
    out = np.empty(max_lag + 1)
    for k in range(max_lag + 1):
        out[k] = (x[: len(x) - k] @ x[k:]) / denom
    return out


def decorrelation_time(series, dt: float, max_lag: int | None = None) -> float:
    """Integral of the autocorrelation up to its first nonpositive value."""
    x = np.asarray(series, dtype=float).ravel()
    if max_lag is None:
        max_lag = min(len(x) - 2, 20000)
    rho = acf(x, max_lag)
    cut = np.nonzero(rho <= 0)[0]
    stop = cut[0] if len(cut) else len(rho)
    # trapezoid from lag 0, acf(0) = 1
    return dt * (np.sum(rho[:stop]) - 0.5)


def normalized_rmse(forecast, truth) -> float:
    """RMSE divided by the truth's standard deviation."""
    f = np.asarray(forecast, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if f.shape != t.shape:
        raise ValueError("forecast and truth must align")
    sd = t.std()
    if sd == 0.0:
        raise ValueError("zero-variance truth cannot normalize the error")
    return float(np.sqrt(np.mean((f - t) ** 2)) / sd)


def corr_coeff(forecast, truth) -> float:
    f = np.asarray(forecast, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if f.shape != t.shape:
        raise ValueError("forecast and truth must align")
    if t.std() == 0.0:
        raise ValueError("zero-variance truth has no correlation")
    if f.std() == 0.0:
        return 0.0
    return float(np.corrcoef(f, t)[0, 1])


def kde_1d(samples, grid=None, bandwidth: float | None = None):
    """Gaussian kernel density on a uniform grid; returns (grid, densities)."""
    from .mixture import select_bandwidth
    x = np.asarray(samples, dtype=float).ravel()
    h = select_bandwidth(x) if bandwidth is None else float(bandwidth)
    if grid is None:
        lo, hi = x.min() - 4 * h, x.max() + 4 * h
        grid = np.linspace(lo, hi, 512)
    z = (grid[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (len(x) * h * np.sqrt(2 * np.pi))
    return grid, dens


def count_modes(samples, rel_threshold: float = 0.1) -> int:
    """Number of strict local maxima of the smoothed density above
    ``rel_threshold`` times its global maximum."""
    x = np.asarray(samples, dtype=float).ravel()
    if len(x) < 1000:
        raise ValueError("need at least 1000 samples for mode counting")
    _, dens = kde_1d(x)
    floor = rel_threshold * dens.max()
    interior = dens[1:-1]
    is_peak = (interior > dens[:-2]) & (interior > dens[2:]) & (interior >= floor)
    return int(np.count_nonzero(is_peak))


# ---------------------------------------------------------------------------
# Ensemble forecasts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForecastConfig:
    """Launch schedule and initialization policy for ensemble forecasts.

    ``ic_source`` is either "perfect" (initialize every component at the
    truth) or "filter" (observed components at the truth, hidden components
    drawn from the supplied Gaussian path).  ``observed_dims`` lists which
    state components of the forecast model are the observed block.
    """

    forecast_model: GeneralSdeModel
    launch_gap: float
    lead_max: float
    n_members: int
    ic_source: str = "filter"
    observed_dims: tuple = (0,)
    report_lead: float = 0.4

    def __post_init__(self):
        if self.n_members < 1:
            raise ValueError("need at least one ensemble member")
        if self.ic_source not in ("perfect", "filter"):
            raise ValueError("ic_source must be 'perfect' or 'filter'")
        if self.lead_max <= 0 or self.launch_gap <= 0:
            raise ValueError("launch_gap and lead_max must be positive")


@dataclass(frozen=True)
class ForecastSkill:
    """Per-lead skill curves plus the lead-time series at the report lead."""

    leads: np.ndarray
    rmse: np.ndarray          # (n_leads, dim), normalized
    corr: np.ndarray          # (n_leads, dim)
    launch_times: np.ndarray
    report_lead: float
    report_mean: np.ndarray   # (n_launches, dim) ensemble mean at report lead
    report_band: np.ndarray   # (2, n_launches, dim) 5/95 percentiles
    report_truth: np.ndarray  # (n_launches, dim)
    skipped_launches: int = 0

    def lead_index(self, lead: float) -> int:
        return int(np.argmin(np.abs(self.leads - lead)))

    def to_csv(self, path) -> None:
        dim = self.rmse.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lead"] + [f"rmse_{k}" for k in range(dim)]
                            + [f"corr_{k}" for k in range(dim)])
            for i, lead in enumerate(self.leads):
                writer.writerow([repr(float(lead))]
                                + [repr(float(v)) for v in self.rmse[i]]
                                + [repr(float(v)) for v in self.corr[i]])


def ensemble_forecast(cfg: ForecastConfig, truth: TrajectorySeries,
                      da_path: GaussianPath | None = None, seed: int = 0,
                      t_start: float | None = None, t_end: float | None = None,
                      lead_stride: int = 1) -> ForecastSkill:
    """Launch ensembles along the truth and score the ensemble mean.

    At each launch the observed components start at the truth; hidden
    components are drawn from the Gaussian path (filter output or any
    mean/covariance series aligned with the truth).  Launches whose
    covariance fails its Cholesky factorization are skipped and counted.
    """
    dt = truth.dt
    dim = truth.dim
    if cfg.ic_source == "filter":
        if da_path is None:
            raise ValueError("ic_source='filter' requires da_path")
        if abs(da_path.dt - dt) > 1e-12:
            raise ValueError("da_path and truth must share dt")
    gap = max(1, int(round(cfg.launch_gap / dt)))
    lead_steps = int(round(cfg.lead_max / dt))
    j_lo = 0 if t_start is None else truth.index_at(t_start)
    j_hi = len(truth.values) - 1 - lead_steps if t_end is None \
        else truth.index_at(t_end) - lead_steps
    launch_idx = np.arange(j_lo, j_hi + 1, gap)
    if len(launch_idx) == 0:
        raise ValueError("no launch points inside the truth support")

    hidden_dims = [k for k in range(dim) if k not in cfg.observed_dims]
    gen = stream(seed, 9001)
    ics = np.repeat(truth.values[launch_idx][:, None, :], cfg.n_members, axis=1)
    skipped = np.zeros(len(launch_idx), dtype=bool)
    if cfg.ic_source == "filter" and hidden_dims:
        for i, j in enumerate(launch_idx):
            cov = da_path.covariances[j]
            try:
                root = np.linalg.cholesky(
                    cov + 1e-12 * max(np.trace(cov), 1e-300) * np.eye(len(cov)))
            except np.linalg.LinAlgError:
                skipped[i] = True
                continue
            draws = gen.standard_normal((cfg.n_members, len(cov))) @ root.T
            ics[i, :, hidden_dims] = (da_path.means[j] + draws).T
    keep = ~skipped
    launch_idx = launch_idx[keep]
    ics = ics[keep]

    record = list(range(0, lead_steps + 1, lead_stride))
    leads = np.asarray(record) * dt
    report_li = int(np.argmin(np.abs(leads - cfg.report_lead)))
    n_launch = len(launch_idx)
    ens_mean = np.empty((len(record), n_launch, dim))
    band = np.empty((2, n_launch, dim))
    # chunk over launches to bound the member-path memory
    chunk = max(1, 2 ** 20 // max(1, len(record) * cfg.n_members * dim))
    for ci, c0 in enumerate(range(0, n_launch, chunk)):
        c1 = min(c0 + chunk, n_launch)
        paths = simulate_ensemble(cfg.forecast_model, ics[c0:c1].reshape(-1, dim),
                                  dt, lead_steps, seed=seed, stream_ids=(77, ci),
                                  record=record)
        paths = paths.reshape(len(record), c1 - c0, cfg.n_members, dim)
        ens_mean[:, c0:c1] = paths.mean(axis=2)
        band[:, c0:c1] = np.percentile(paths[report_li], [5.0, 95.0], axis=1)

    rmse = np.empty((len(record), dim))
    corr = np.empty((len(record), dim))
    for li, k_steps in enumerate(record):
        truth_at = truth.values[launch_idx + k_steps]
        for v in range(dim):
            rmse[li, v] = normalized_rmse(ens_mean[li, :, v], truth_at[:, v])
            corr[li, v] = corr_coeff(ens_mean[li, :, v], truth_at[:, v])

    return ForecastSkill(
        leads=leads, rmse=rmse, corr=corr,
        launch_times=truth.t0 + launch_idx * dt,
        report_lead=float(leads[report_li]),
        report_mean=ens_mean[report_li],
        report_band=band,
        report_truth=truth.values[launch_idx + record[report_li]],
        skipped_launches=int(skipped.sum()),
    )
