"""Closed-form conditional statistics for two-block models.

Given one realization of the observed block, the hidden block of a
:class:`~condgauss.models.CgnsModel` stays Gaussian, and its mean and
covariance obey explicit ODEs driven by the observed increments:

* forward sweep (filter): conditions on the past only;
* backward sweep (smoother): conditions on the whole window, starting
  from the filter estimate at the final time;
* backward sampling: draws hidden trajectories consistent with both the
  smoother marginals and the temporal correlations.

All sweeps share one array core that runs an arbitrary number of
independent blocks in batch.  Observed-derivative terms use the forward
difference of the data, matching the Euler discretization that generated
it.  After every step the covariance is symmetrized, and negative
eigenvalues beyond a relative tolerance are clipped (long sweeps
accumulate asymmetry).
"""

from __future__ import annotations

from dataclasses import dataclass

import csv

import numpy as np

from .models import CgnsModel
from .rng import stream
from .series import TrajectorySeries

__all__ = [
    "GaussianPath", "InferenceError", "BlockLayout",
    "cg_filter", "cg_smoother", "cg_smoother_with_cross", "cg_sample",
    "lag_one_cross_moments",
    "cg_filter_blocked", "cg_smoother_blocked", "layout_for_l96",
]

# Covariance hygiene: clip negative eigenvalues below -PSD_CLIP_TOL*trace;
# abort if they fall below -PSD_ERROR_TOL*trace (the sweep has broken down,
# clipping would only hide it).
PSD_CLIP_TOL = 1e-8
PSD_ERROR_TOL = 1e-3
RIDGE_SCALE = 1e-10
DEFAULT_CHUNK = 8192


_EYES: dict = {}


def _eye_cache(n: int) -> np.ndarray:
    if n not in _EYES:
        _EYES[n] = np.eye(n)
    return _EYES[n]


class InferenceError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class GaussianPath:
    """Time-indexed Gaussian marginals of the hidden block.

    ``kind`` records which sweep produced it ("filter" or "smoother").
    Covariances are symmetric positive semidefinite up to the hygiene
    tolerances above.
    """

    dt: float
    t0: float
    means: np.ndarray        # (J+1, n2)
    covariances: np.ndarray  # (J+1, n2, n2)
    kind: str

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covariances, dtype=float)
        if means.ndim != 2 or covs.shape != means.shape + (means.shape[1],):
            raise ValueError("means must be (J+1, n2) and covariances (J+1, n2, n2)")
        if self.kind not in ("filter", "smoother"):
            raise ValueError("kind must be 'filter' or 'smoother'")
        asym = np.abs(covs - np.swapaxes(covs, -1, -2)).max(initial=0.0)
        scale = max(np.abs(covs).max(initial=0.0), 1.0)
        if asym > 1e-10 * scale:
            raise ValueError(f"covariances are asymmetric beyond tolerance ({asym:.3e})")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def n2(self) -> int:
        return self.means.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def index_at(self, t: float) -> int:
        j = int(round((t - self.t0) / self.dt))
        if j < 0 or j >= len(self) or abs(self.t0 + j * self.dt - t) > 0.5 * self.dt:
            raise ValueError(f"time {t} is outside the path grid")
        return j

    def min_eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.covariances)[:, 0]

    def to_csv(self, path, store_cov: str = "full") -> None:
        n2 = self.n2
        if store_cov == "full":
            cov_cols = [(i, j) for i in range(n2) for j in range(i, n2)]
            cov_names = [f"cov_{i}_{j}" for i, j in cov_cols]
        elif store_cov == "diag":
            cov_cols = [(i, i) for i in range(n2)]
            cov_names = [f"var_{i}" for i in range(n2)]
        else:
            raise ValueError("store_cov must be 'full' or 'diag'")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"mean_{i}" for i in range(n2)] + cov_names)
            for k, t in enumerate(self.times):
                row = [repr(float(t))]
                row += [repr(float(v)) for v in self.means[k]]
                row += [repr(float(self.covariances[k][i, j])) for i, j in cov_cols]
                writer.writerow(row)

    def to_npz(self, path) -> None:
        np.savez_compressed(path, dt=self.dt, t0=self.t0, means=self.means,
                            covariances=self.covariances, kind=self.kind)

    @classmethod
    def from_npz(cls, path) -> "GaussianPath":
        with np.load(path) as data:
            return cls(dt=float(data["dt"]), t0=float(data["t0"]), means=data["means"],
                       covariances=data["covariances"], kind=str(data["kind"]))


# ---------------------------------------------------------------------------
# Coefficient providers
# ---------------------------------------------------------------------------

def _model_provider(model: CgnsModel, x: np.ndarray, t0: float, dt: float):
    """Evaluate model coefficients on observed slices, with a batch axis of 1."""

    def provider(j0: int, j1: int) -> dict:
        xs = x[j0:j1]
        ts = t0 + dt * np.arange(j0, j1)
        b1 = model.B1(xs, ts)
        b2 = model.b2(xs, ts)
        return {
            "A0": model.A0(xs, ts)[:, None],
            "A1": model.A1(xs, ts)[:, None],
            "BBt": np.einsum("...ik,...jk->...ij", b1, b1)[:, None],
            "a0": model.a0(xs, ts)[:, None],
            "a1": model.a1(xs, ts)[:, None],
            "bbT": np.einsum("...ik,...jk->...ij", b2, b2)[:, None],
        }

    return provider


def _blocked_provider(model: CgnsModel, layout: "BlockLayout", x: np.ndarray,
                      t0: float, dt: float):
    """Slice full-model coefficients into stacked per-block arrays.

    Requires homogeneous block shapes (hold for the built-in lattices);
    heterogeneous layouts fall back to per-block runs at the call sites.
    """
    blocks = layout.blocks

    def provider(j0: int, j1: int) -> dict:
        xs = x[j0:j1]
        ts = t0 + dt * np.arange(j0, j1)
        A0 = model.A0(xs, ts)
        A1 = model.A1(xs, ts)
        b1 = model.B1(xs, ts)
        BBt = np.einsum("...ik,...jk->...ij", b1, b1)
        a0 = model.a0(xs, ts)
        a1 = model.a1(xs, ts)
        b2 = model.b2(xs, ts)
        bbT = np.einsum("...ik,...jk->...ij", b2, b2)
        out = {k: [] for k in ("A0", "A1", "BBt", "a0", "a1", "bbT")}
        for xi, yi in blocks:
            xi, yi = list(xi), list(yi)
            out["A0"].append(A0[:, xi])
            out["A1"].append(A1[np.ix_(range(len(xs)), xi, yi)])
            out["BBt"].append(BBt[np.ix_(range(len(xs)), xi, xi)])
            out["a0"].append(a0[:, yi])
            out["a1"].append(a1[np.ix_(range(len(xs)), yi, yi)])
            out["bbT"].append(bbT[np.ix_(range(len(xs)), yi, yi)])
        return {k: np.stack(v, axis=1) for k, v in out.items()}

    return provider


def arrays_provider(arrs: dict, n_steps: int):
    """Provider over precomputed coefficient arrays.

    Each entry is either a per-step array of shape (J, B, ...) or a
    constant of shape (B, ...) that is broadcast across the chunk.
    """
    per_step = {k: (np.asarray(v).shape[0] == n_steps and np.asarray(v).ndim >= _MIN_NDIM[k] + 1)
                for k, v in arrs.items()}

    def provider(j0: int, j1: int) -> dict:
        out = {}
        for k, v in arrs.items():
            v = np.asarray(v, dtype=float)
            if per_step[k]:
                out[k] = v[j0:j1]
            else:
                out[k] = np.broadcast_to(v, (j1 - j0,) + v.shape)
        return out

    return provider


_MIN_NDIM = {"A0": 2, "A1": 3, "BBt": 3, "a0": 2, "a1": 3, "bbT": 3}


# ---------------------------------------------------------------------------
# Covariance hygiene
# ---------------------------------------------------------------------------

def _pinv_solve(P, FR):
    """Pseudo-inverse fallback applied item-wise (rare, degenerate steps)."""
    flat_p = P.reshape((-1,) + P.shape[-2:])
    flat_fr = FR.reshape((-1,) + FR.shape[-2:])
    out = np.empty_like(flat_fr)
    for k in range(flat_p.shape[0]):
        try:
            out[k] = np.linalg.solve(flat_p[k], flat_fr[k])
        except np.linalg.LinAlgError:
            out[k] = np.linalg.pinv(flat_p[k], hermitian=True) @ flat_fr[k]
    return out.reshape(FR.shape)


def _batched_trace(R: np.ndarray) -> np.ndarray:
    n = R.shape[-1]
    return R.reshape(R.shape[:-2] + (n * n,))[..., :: n + 1].sum(axis=-1)


def _psd_fix(R: np.ndarray, step: int, eye: np.ndarray) -> np.ndarray:
    """Symmetrize; clip small negative eigenvalues, abort on large ones."""
    n = R.shape[-1]
    R = 0.5 * (R + R.transpose(0, 2, 1))
    scale = np.maximum(_batched_trace(R), 1e-300)
    if n == 1:
        if np.all(R[:, 0, 0] >= -PSD_CLIP_TOL * scale):
            return R
    elif n == 2:
        # exact smallest eigenvalue of a symmetric 2x2, vectorized
        tr = R[:, 0, 0] + R[:, 1, 1]
        gap = np.sqrt((R[:, 0, 0] - R[:, 1, 1]) ** 2 + 4.0 * R[:, 0, 1] ** 2)
        if np.all(0.5 * (tr - gap) >= -PSD_CLIP_TOL * scale):
            return R
    else:
        jitter = (PSD_CLIP_TOL * scale)[:, None, None] * eye
        try:
            np.linalg.cholesky(R + jitter)
            return R
        except np.linalg.LinAlgError:
            pass
    w, v = np.linalg.eigh(R)
    if np.any(w[..., 0] < -PSD_ERROR_TOL * scale):
        raise InferenceError("covariance lost positive semidefiniteness beyond tolerance", step)
    w = np.clip(w, 0.0, None)
    R = np.einsum("...ij,...j,...kj->...ik", v, w, v)
    return 0.5 * (R + R.transpose(0, 2, 1))


def _psd_sqrt_batched(R: np.ndarray) -> np.ndarray:
    """Batched PSD square root via eigenvalue clipping."""
    w, v = np.linalg.eigh(R)
    return v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def _psd_sqrt(R: np.ndarray) -> np.ndarray:
    """Matrix square root of a PSD matrix, tolerant of zero eigenvalues."""
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(R)
        return v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def _pred_clip_delta(R: np.ndarray, Ppred: np.ndarray, fast_ok: bool = False) -> np.ndarray:
    """Negative-semidefinite update min(R, Ppred) - Ppred in the whitened basis.

    Clips the eigenvalues of Ppred^{-1/2} R Ppred^{-1/2} at one, so the
    returned delta satisfies -Ppred <= delta <= 0.
    """
    delta = R - Ppred
    delta = 0.5 * (delta + np.swapaxes(delta, -1, -2))
    if fast_ok:
        # fast path, taken only under a modest gain where roundoff in the
        # factorization cannot be amplified into visible corruption
        try:
            np.linalg.cholesky(-delta)
            return delta
        except np.linalg.LinAlgError:
            pass
    w, v = np.linalg.eigh(Ppred)
    w = np.clip(w, 0.0, None)
    sq = np.sqrt(w)
    cutoff = 1e-14 * np.max(sq, axis=-1, keepdims=True)
    inv_sq = np.where(sq > cutoff, 1.0 / np.where(sq > 0, sq, 1.0), 0.0)
    p_half = np.einsum("...ij,...j,...kj->...ik", v, sq, v)
    p_ihalf = np.einsum("...ij,...j,...kj->...ik", v, inv_sq, v)
    white = p_ihalf @ R @ p_ihalf
    white = 0.5 * (white + np.swapaxes(white, -1, -2))
    ww, wv = np.linalg.eigh(white)
    # lower clip guards against negative dirt in R blown up by the whitening
    ww = np.clip(ww, 0.0, 1.0) - 1.0
    inner = np.einsum("...ij,...j,...kj->...ik", wv, ww, wv)
    delta = p_half @ inner @ p_half
    return 0.5 * (delta + np.swapaxes(delta, -1, -2))


def _backward_gain(Rf, a1, bbT, dt):
    """Backward one-step transition K_j of the conditional hidden chain.

    Written in the prediction-normalized form
    ``K = R_f F^T (F R_f F^T + Q)^{-1}`` with F = I + dt a1 and Q = dt b2b2^T,
    which expands to ``I - dt (a1 + b2b2^T R_f^{-1})`` up to O(dt^2) terms
    but never inverts R_f, so it stays bounded through the degenerate
    early window of a zero-initialized filter (K -> 0 as R_f -> 0, the
    correct no-information limit).  A relative ridge plus pseudo-inverse
    guards the prediction covariance itself.
    """
    n2 = Rf.shape[-1]
    eye = _eye_cache(n2)
    F = eye + dt * a1
    FR = F @ Rf
    Ft = np.swapaxes(F, -1, -2)
    Ppred = FR @ Ft + dt * bbT
    Ppred = 0.5 * (Ppred + np.swapaxes(Ppred, -1, -2))
    lam = RIDGE_SCALE * _batched_trace(Ppred) / n2
    reg = Ppred + lam[..., None, None] * eye
    try:
        Kt = np.linalg.solve(reg, FR)
    except np.linalg.LinAlgError:
        Kt = _pinv_solve(Ppred, FR)
    return np.swapaxes(Kt, -1, -2), Ppred


# ---------------------------------------------------------------------------
# Core sweeps (batched over independent blocks)
# ---------------------------------------------------------------------------

def _filter_core(provider, dx, dt, mu0, R0, chunk=DEFAULT_CHUNK):
    n_steps, n_blocks, _ = dx.shape
    n2 = mu0.shape[-1]
    means = np.empty((n_steps + 1, n_blocks, n2))
    covs = np.empty((n_steps + 1, n_blocks, n2, n2))
    mu, R = mu0.copy(), R0.copy()
    means[0], covs[0] = mu, R
    eye = _eye_cache(n2)
    for j0 in range(0, n_steps, chunk):
        j1 = min(j0 + chunk, n_steps)
        cf = provider(j0, j1)
        A0c, A1c, BBtc = cf["A0"], cf["A1"], cf["BBt"]
        a0c, a1c, bbTc = cf["a0"], cf["a1"], cf["bbT"]
        scalar_obs = BBtc.shape[-1] == 1
        for i in range(j1 - j0):
            j = j0 + i
            A1j = A1c[i]
            A1R = A1j @ R
            if scalar_obs:
                bb = BBtc[i]
                if np.any(bb == 0.0):
                    raise InferenceError("singular observed-noise covariance B1*B1^T", j)
                K = (A1R / bb).transpose(0, 2, 1)
            else:
                try:
                    K = np.linalg.solve(BBtc[i], A1R).transpose(0, 2, 1)
                except np.linalg.LinAlgError:
                    raise InferenceError("singular observed-noise covariance B1*B1^T", j) from None
            mu_col = mu[:, :, None]
            innov = dx[j] - dt * (A0c[i] + (A1j @ mu_col)[:, :, 0])
            mu = mu + dt * (a0c[i] + (a1c[i] @ mu_col)[:, :, 0]) \
                + (K @ innov[:, :, None])[:, :, 0]
            a1R = a1c[i] @ R
            R = R + dt * (a1R + a1R.transpose(0, 2, 1) + bbTc[i] - K @ A1R)
            R = _psd_fix(R, j + 1, eye)
            if not np.all(np.isfinite(mu)):
                raise InferenceError("non-finite filter mean", j + 1)
            means[j + 1], covs[j + 1] = mu, R
    return means, covs


def _smoother_core(provider, filt_means, filt_covs, dt, chunk=DEFAULT_CHUNK,
                   want_cross=False):
    n_steps = filt_means.shape[0] - 1
    n_blocks, n2 = filt_means.shape[1], filt_means.shape[2]
    means = np.empty_like(filt_means)
    covs = np.empty_like(filt_covs)
    cross = np.empty((n_steps, n_blocks, n2, n2)) if want_cross else None
    mu, R = filt_means[n_steps].copy(), filt_covs[n_steps].copy()
    means[n_steps], covs[n_steps] = mu, R
    eye = _eye_cache(n2)
    for j1 in range(n_steps, 0, -chunk):
        j0 = max(j1 - chunk, 0)
        cf = provider(j0, j1)
        a0c, a1c, bbTc = cf["a0"], cf["a1"], cf["bbT"]
        # gains depend on filter output only: compute the whole chunk at once
        K_c, Ppred_c = _backward_gain(filt_covs[j0:j1], a1c, bbTc, dt)
        Kt_c = K_c.transpose(0, 1, 3, 2)
        fm_c = filt_means[j0:j1]
        pred_c = fm_c + dt * (a0c + (a1c @ fm_c[:, :, :, None])[:, :, :, 0])
        k_small = np.abs(K_c).max(axis=(1, 2, 3)) <= 2.0
        for j in range(j1 - 1, j0 - 1, -1):
            i = j - j0
            K = K_c[i]
            if want_cross:
                cross[j] = R @ Kt_c[i]
            # mean pulled toward the filter estimate plus the transported
            # future-information correction
            mu = fm_c[i] + (K @ (mu - pred_c[i])[:, :, None])[:, :, 0]
            # conditioning on the future can only shrink covariance relative
            # to the one-step prediction (R_s^{j+1} <= P_pred); enforcing it in
            # the P_pred-whitened basis removes the O(dt^2) discretization
            # residual that would otherwise amplify exponentially backward in
            # noise-deficient directions, and keeps R_s PSD by construction
            delta = _pred_clip_delta(R, Ppred_c[i], fast_ok=k_small[i])
            R = filt_covs[j] + K @ delta @ Kt_c[i]
            R = _psd_fix(R, j, eye)
            if not np.all(np.isfinite(mu)):
                raise InferenceError("non-finite smoother mean", j)
            means[j], covs[j] = mu, R
    return means, covs, cross


def _sample_core(provider, filt_means, filt_covs, smooth_means, smooth_covs,
                 dt, n_samples, seed, chunk=DEFAULT_CHUNK):
    n_steps = filt_means.shape[0] - 1
    n2 = filt_means.shape[2]
    if filt_means.shape[1] != 1:
        raise ValueError("sampling runs on a single block")
    gens = [stream(seed, s) for s in range(n_samples)]
    paths = np.empty((n_samples, n_steps + 1, n2))
    # terminal draw from the filter law at T (== smoother law there)
    root_T = _psd_sqrt(filt_covs[n_steps, 0])
    eps = np.stack([g.standard_normal(n2) for g in gens])
    e = eps @ root_T.T
    paths[:, n_steps] = smooth_means[n_steps, 0] + e
    for j1 in range(n_steps, 0, -chunk):
        j0 = max(j1 - chunk, 0)
        cf = provider(j0, j1)
        noise = np.empty((n_samples, j1 - j0, n2))
        for s, g in enumerate(gens):
            noise[s] = g.standard_normal((j1 - j0, n2))
        K_c, _ = _backward_gain(filt_covs[j0:j1], cf["a1"], cf["bbT"], dt)
        K_c = K_c[:, 0]
        # residual covariance of Y^j given Y^{j+1} and the data; PSD up to
        # roundoff, clipped inside the square root
        q_c = smooth_covs[j0:j1, 0] - K_c @ smooth_covs[j0 + 1:j1 + 1, 0] @ K_c.transpose(0, 2, 1)
        root_c = _psd_sqrt_batched(0.5 * (q_c + q_c.transpose(0, 2, 1)))
        for j in range(j1 - 1, j0 - 1, -1):
            i = j - j0
            e = e @ K_c[i].T + noise[:, i] @ root_c[i].T
            paths[:, j] = smooth_means[j, 0] + e
    return paths


def _discrete_sweeps_core(provider, dx, dt, mu0, R0, chunk=DEFAULT_CHUNK,
                          want_cross=True):
    """Exact conditional moments of the Euler-discretized model.

    Treats the observed increment as a linear readout of the hidden state,
    dX_j = dt (A0 + A1 Y^j) + noise, runs the predict/update filter with
    Joseph-form covariance updates, then the fixed-interval backward sweep
    anchored on the updated moments.  Parameter estimation uses these
    moments: they are consistent with the discretized-model likelihood the
    maximization step optimizes, which the continuous-form sweeps match
    only to O(dt^2) per step.

    Returns (smoother means, smoother covs, cross) with the same shapes and
    conventions as the continuous sweeps.
    """
    n_steps, n_blocks, _ = dx.shape
    n2 = mu0.shape[-1]
    eye = _eye_cache(n2)
    m_upd = np.empty((n_steps + 1, n_blocks, n2))
    P_upd = np.empty((n_steps + 1, n_blocks, n2, n2))
    mu, P = mu0.copy(), R0.copy()
    # forward pass: store updated moments; the prediction to J seeds the sweep
    for j0 in range(0, n_steps, chunk):
        j1 = min(j0 + chunk, n_steps)
        cf = provider(j0, j1)
        A0c, A1c, BBtc = cf["A0"], cf["A1"], cf["BBt"]
        a0c, a1c, bbTc = cf["a0"], cf["a1"], cf["bbT"]
        scalar_obs = BBtc.shape[-1] == 1
        for j in range(j0, j1):
            i = j - j0
            H = dt * A1c[i]
            Ht = H.transpose(0, 2, 1)
            PHt = P @ Ht
            S = H @ PHt + dt * BBtc[i]
            innov = dx[j] - dt * A0c[i] - (H @ mu[:, :, None])[:, :, 0]
            if scalar_obs:
                if np.any(S == 0.0):
                    raise InferenceError("singular innovation covariance", j)
                K = PHt / S
            else:
                try:
                    K = np.linalg.solve(S, PHt.transpose(0, 2, 1)).transpose(0, 2, 1)
                except np.linalg.LinAlgError:
                    raise InferenceError("singular innovation covariance", j) from None
            mu = mu + (K @ innov[:, :, None])[:, :, 0]
            IKH = eye - K @ H
            P = IKH @ P @ IKH.transpose(0, 2, 1) \
                + dt * (K @ BBtc[i] @ K.transpose(0, 2, 1))
            P = 0.5 * (P + P.transpose(0, 2, 1))
            m_upd[j], P_upd[j] = mu, P
            # predict to j+1
            F = eye + dt * a1c[i]
            mu = (F @ mu[:, :, None])[:, :, 0] + dt * a0c[i]
            P = F @ P @ F.transpose(0, 2, 1) + dt * bbTc[i]
            P = 0.5 * (P + P.transpose(0, 2, 1))
            if not np.all(np.isfinite(mu)):
                raise InferenceError("non-finite filter mean", j + 1)
    m_upd[n_steps], P_upd[n_steps] = mu, P

    means = np.empty_like(m_upd)
    covs = np.empty_like(P_upd)
    cross = np.empty((n_steps, n_blocks, n2, n2)) if want_cross else None
    ms, Ps = mu.copy(), P.copy()
    means[n_steps], covs[n_steps] = ms, Ps
    for j1 in range(n_steps, 0, -chunk):
        j0 = max(j1 - chunk, 0)
        cf = provider(j0, j1)
        a0c, a1c, bbTc = cf["a0"], cf["a1"], cf["bbT"]
        K_c, Ppred_c = _backward_gain(P_upd[j0:j1], a1c, bbTc, dt)
        Kt_c = K_c.transpose(0, 1, 3, 2)
        pred_c = m_upd[j0:j1] + dt * (a0c + (a1c @ m_upd[j0:j1][:, :, :, None])[:, :, :, 0])
        k_small = np.abs(K_c).max(axis=(1, 2, 3)) <= 2.0
        for j in range(j1 - 1, j0 - 1, -1):
            i = j - j0
            if want_cross:
                cross[j] = Ps @ Kt_c[i]
            ms = m_upd[j] + (K_c[i] @ (ms - pred_c[i])[:, :, None])[:, :, 0]
            # exact identity gives R_s <= P_pred here; the clip only absorbs
            # roundoff so noise-deficient models cannot amplify it backward
            delta = _pred_clip_delta(Ps, Ppred_c[i], fast_ok=k_small[i])
            Ps = P_upd[j] + K_c[i] @ delta @ Kt_c[i]
            Ps = _psd_fix(Ps, j, eye)
            if not np.all(np.isfinite(ms)):
                raise InferenceError("non-finite smoother mean", j)
            means[j], covs[j] = ms, Ps
    return means, covs, cross


# ---------------------------------------------------------------------------
# Public single-block API
# ---------------------------------------------------------------------------

def _check_obs(model: CgnsModel, x_obs: TrajectorySeries):
    if x_obs.dim != model.n1:
        raise ValueError(f"observed series dimension {x_obs.dim} != n1 = {model.n1}")


def _init_moments(model: CgnsModel, mu0, r0):
    mu0 = np.zeros(model.n2) if mu0 is None else np.asarray(mu0, dtype=float)
    r0 = np.zeros((model.n2, model.n2)) if r0 is None else np.asarray(r0, dtype=float)
    if mu0.shape != (model.n2,) or r0.shape != (model.n2, model.n2):
        raise ValueError("initial moments have the wrong shape")
    if np.abs(r0 - r0.T).max(initial=0.0) > 1e-12 * max(np.abs(r0).max(initial=0.0), 1.0):
        raise ValueError("initial covariance must be symmetric")
    return mu0, r0


def cg_filter(model: CgnsModel, x_obs: TrajectorySeries, mu0=None, r0=None,
              chunk: int = DEFAULT_CHUNK) -> GaussianPath:
    """Forward conditional-moment sweep given the observed series.

    Initial moments default to zero.  The observed time derivative is the
    forward difference of the data.
    """
    _check_obs(model, x_obs)
    mu0, r0 = _init_moments(model, mu0, r0)
    x = x_obs.values
    dx = (x[1:] - x[:-1])[:, None, :]
    provider = _model_provider(model, x, x_obs.t0, x_obs.dt)
    means, covs = _filter_core(provider, dx, x_obs.dt, mu0[None], r0[None], chunk=chunk)
    return GaussianPath(x_obs.dt, x_obs.t0, means[:, 0], covs[:, 0], kind="filter")


def cg_smoother(model: CgnsModel, x_obs: TrajectorySeries,
                filter_path: GaussianPath, chunk: int = DEFAULT_CHUNK) -> GaussianPath:
    """Backward sweep from the filter estimate at the final time."""
    path, _ = cg_smoother_with_cross(model, x_obs, filter_path, want_cross=False, chunk=chunk)
    return path


def cg_smoother_with_cross(model: CgnsModel, x_obs: TrajectorySeries,
                           filter_path: GaussianPath, want_cross: bool = True,
                           chunk: int = DEFAULT_CHUNK):
    """Backward sweep returning also the one-step cross-covariances.

    The cross matrix at step j is Cov(Y^{j+1}, Y^j) given all observations,
    equal to R_s^{j+1} K_j^T with the backward one-step transition K_j,
    which expands to I - dt (a1 + b2 b2^T R_f^{-1}) evaluated at step j
    (see :func:`_backward_gain` for the stabilized form actually used).
    """
    _check_obs(model, x_obs)
    if filter_path.kind != "filter":
        raise ValueError("filter_path must come from the forward sweep")
    if len(filter_path) != len(x_obs.values):
        raise ValueError("filter path and observations have different lengths")
    x = x_obs.values
    provider = _model_provider(model, x, x_obs.t0, x_obs.dt)
    means, covs, cross = _smoother_core(
        provider, filter_path.means[:, None], filter_path.covariances[:, None],
        x_obs.dt, chunk=chunk, want_cross=want_cross)
    path = GaussianPath(x_obs.dt, x_obs.t0, means[:, 0], covs[:, 0], kind="smoother")
    return path, (None if cross is None else cross[:, 0])


def lag_one_cross_moments(model: CgnsModel, x_obs: TrajectorySeries,
                          smoother_path: GaussianPath, filter_path: GaussianPath,
                          chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Cov(Y^{j+1}, Y^j) along the smoother path, shape (J, n2, n2)."""
    _check_obs(model, x_obs)
    if len(smoother_path) != len(x_obs.values) or len(filter_path) != len(x_obs.values):
        raise ValueError("paths and observations have different lengths")
    x = x_obs.values
    n_steps = len(x) - 1
    n2 = model.n2
    provider = _model_provider(model, x, x_obs.t0, x_obs.dt)
    out = np.empty((n_steps, n2, n2))
    for j0 in range(0, n_steps, chunk):
        j1 = min(j0 + chunk, n_steps)
        cf = provider(j0, j1)
        K_c, _ = _backward_gain(filter_path.covariances[j0:j1, None], cf["a1"],
                                cf["bbT"], x_obs.dt)
        out[j0:j1] = smoother_path.covariances[j0 + 1:j1 + 1] @ K_c[:, 0].transpose(0, 2, 1)
    return out


def cg_sample(model: CgnsModel, x_obs: TrajectorySeries, smoother_path: GaussianPath,
              filter_path: GaussianPath, n_samples: int, seed: int,
              chunk: int = DEFAULT_CHUNK) -> list:
    """Draw hidden trajectories consistent with the smoother statistics.

    Each sample integrates the backward sampling equation from an
    independent terminal draw Y(T) ~ N(mu_f(T), R_f(T)), with noise keyed
    by (seed, sample index).
    """
    _check_obs(model, x_obs)
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if len(smoother_path) != len(x_obs.values) or len(filter_path) != len(x_obs.values):
        raise ValueError("paths and observations have different lengths")
    x = x_obs.values
    provider = _model_provider(model, x, x_obs.t0, x_obs.dt)
    paths = _sample_core(provider, filter_path.means[:, None],
                         filter_path.covariances[:, None],
                         smoother_path.means[:, None],
                         smoother_path.covariances[:, None],
                         x_obs.dt, n_samples, seed, chunk=chunk)
    labels = list(model.labels[model.n1:]) if model.labels else None
    return [TrajectorySeries(x_obs.dt, x_obs.t0, paths[s], seed=seed, labels=labels)
            for s in range(n_samples)]


# ---------------------------------------------------------------------------
# Block decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockLayout:
    """Partition of observed and hidden indices into decoupled blocks."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple((tuple(x), tuple(y)) for x, y in self.blocks)
        all_x = [i for x, _ in blocks for i in x]
        all_y = [i for _, y in blocks for i in y]
        if len(set(all_x)) != len(all_x) or len(set(all_y)) != len(all_y):
            raise ValueError("blocks must be disjoint")
        object.__setattr__(self, "blocks", blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def covers(self, n1: int, n2: int) -> bool:
        all_x = sorted(i for x, _ in self.blocks for i in x)
        all_y = sorted(i for _, y in self.blocks for i in y)
        return all_x == list(range(n1)) and all_y == list(range(n2))

    def homogeneous(self) -> bool:
        sizes = {(len(x), len(y)) for x, y in self.blocks}
        return len(sizes) == 1


def layout_for_l96(n_sites: int, n_levels: int) -> BlockLayout:
    """One block per site: (u_i; v_{i,1..J})."""
    return BlockLayout(tuple(
        ((s,), tuple(range(s * n_levels, (s + 1) * n_levels)))
        for s in range(n_sites)))


def validate_layout(model: CgnsModel, layout: BlockLayout, n_probes: int = 20,
                    seed: int = 0, scale: float = 1.0, atol: float = 1e-10) -> None:
    """Check by probing that the model coupling respects the layout.

    Raises ValueError when cross-block entries of a1/b2b2^T/B1B1^T/A1 are
    nonzero, or when block-i coefficients react to observed components
    outside block i.
    """
    if not layout.covers(model.n1, model.n2):
        raise ValueError("layout does not cover all model components")
    gen = stream(seed, 771)
    probes = scale * gen.standard_normal((n_probes, model.n1))
    ts = np.zeros(n_probes)
    A1 = model.A1(probes, ts)
    a1 = model.a1(probes, ts)
    b1 = model.B1(probes, ts)
    b2 = model.b2(probes, ts)
    BBt = np.einsum("...ik,...jk->...ij", b1, b1)
    bbT = np.einsum("...ik,...jk->...ij", b2, b2)
    n_b = layout.n_blocks
    for i in range(n_b):
        xi, yi = layout.blocks[i]
        for k in range(n_b):
            if k == i:
                continue
            xk, yk = layout.blocks[k]
            if np.abs(a1[np.ix_(range(n_probes), yi, yk)]).max(initial=0.0) > atol:
                raise ValueError(f"a1 couples hidden blocks {i} and {k}")
            if np.abs(bbT[np.ix_(range(n_probes), yi, yk)]).max(initial=0.0) > atol:
                raise ValueError(f"hidden noise couples blocks {i} and {k}")
            if np.abs(BBt[np.ix_(range(n_probes), xi, xk)]).max(initial=0.0) > atol:
                raise ValueError(f"observed noise couples blocks {i} and {k}")
            if np.abs(A1[np.ix_(range(n_probes), xk, yi)]).max(initial=0.0) > atol:
                raise ValueError(f"A1 feeds hidden block {i} into observed block {k}")
    # coefficients of block i must not react to observed components outside it
    base = probes[0]
    for i in range(n_b):
        xi, yi = layout.blocks[i]
        outside = [c for c in range(model.n1) if c not in xi]
        if not outside:
            continue
        perturbed = np.tile(base, (n_probes, 1))
        perturbed[:, outside] = scale * gen.standard_normal((n_probes, len(outside)))
        tp = np.zeros(n_probes)
        for name, fn, rows, cols in (
            ("A1", model.A1, xi, yi),
            ("a1", model.a1, yi, yi),
        ):
            ref = fn(base[None], np.zeros(1))[0][np.ix_(rows, cols)]
            got = fn(perturbed, tp)[np.ix_(range(n_probes), rows, cols)]
            if np.abs(got - ref).max(initial=0.0) > atol * max(1.0, np.abs(ref).max(initial=0.0)):
                raise ValueError(f"{name} of block {i} depends on observed components outside it")
        b2_ref = model.b2(base[None], np.zeros(1))[0][list(yi)]
        b2_got = model.b2(perturbed, tp)[:, list(yi)]
        if np.abs(b2_got - b2_ref).max(initial=0.0) > atol * max(1.0, np.abs(b2_ref).max(initial=0.0)):
            raise ValueError(f"b2 of block {i} depends on observed components outside it")


def _assemble_blocked(layout: BlockLayout, means_b, covs_b, dt, t0, kind, n2):
    n_rows = means_b[0].shape[0]
    means = np.zeros((n_rows, n2))
    covs = np.zeros((n_rows, n2, n2))
    for blk, (_, yi) in enumerate(layout.blocks):
        yi = list(yi)
        means[:, yi] = means_b[blk]
        covs[np.ix_(range(n_rows), yi, yi)] = covs_b[blk]
    return GaussianPath(dt, t0, means, covs, kind=kind)


def cg_filter_blocked(model: CgnsModel, layout: BlockLayout, x_obs: TrajectorySeries,
                      mu0=None, r0=None, chunk: int = DEFAULT_CHUNK,
                      validate: bool = True) -> GaussianPath:
    """Per-block forward sweeps assembled into one block-diagonal path."""
    _check_obs(model, x_obs)
    if validate:
        validate_layout(model, layout)
    mu0, r0 = _init_moments(model, mu0, r0)
    x = x_obs.values
    if not layout.homogeneous():
        parts = [_filter_one_block(model, layout, b, x_obs, mu0, r0, chunk) for b in range(layout.n_blocks)]
        return _assemble_blocked(layout, [p[0] for p in parts], [p[1] for p in parts],
                                 x_obs.dt, x_obs.t0, "filter", model.n2)
    provider = _blocked_provider(model, layout, x, x_obs.t0, x_obs.dt)
    dx_full = x[1:] - x[:-1]
    dx = np.stack([dx_full[:, list(xi)] for xi, _ in layout.blocks], axis=1)
    mu0_b = np.stack([mu0[list(yi)] for _, yi in layout.blocks])
    r0_b = np.stack([r0[np.ix_(list(yi), list(yi))] for _, yi in layout.blocks])
    means, covs = _filter_core(provider, dx, x_obs.dt, mu0_b, r0_b, chunk=chunk)
    return _assemble_blocked(layout, [means[:, b] for b in range(layout.n_blocks)],
                             [covs[:, b] for b in range(layout.n_blocks)],
                             x_obs.dt, x_obs.t0, "filter", model.n2)


def _filter_one_block(model, layout, b, x_obs, mu0, r0, chunk):
    sub = BlockLayout((layout.blocks[b],))
    provider = _blocked_provider(model, sub, x_obs.values, x_obs.t0, x_obs.dt)
    xi, yi = layout.blocks[b]
    dx = (x_obs.values[1:, list(xi)] - x_obs.values[:-1, list(xi)])[:, None, :]
    means, covs = _filter_core(provider, dx, x_obs.dt, mu0[list(yi)][None],
                               r0[np.ix_(list(yi), list(yi))][None], chunk=chunk)
    return means[:, 0], covs[:, 0]


def cg_smoother_blocked(model: CgnsModel, layout: BlockLayout, x_obs: TrajectorySeries,
                        filter_path: GaussianPath, chunk: int = DEFAULT_CHUNK,
                        validate: bool = True) -> GaussianPath:
    """Per-block backward sweeps assembled into one block-diagonal path."""
    _check_obs(model, x_obs)
    if validate:
        validate_layout(model, layout)
    if filter_path.kind != "filter":
        raise ValueError("filter_path must come from the forward sweep")
    x = x_obs.values
    fm = np.stack([filter_path.means[:, list(yi)] for _, yi in layout.blocks], axis=1)
    fc = np.stack([filter_path.covariances[np.ix_(range(len(x)), list(yi), list(yi))]
                   for _, yi in layout.blocks], axis=1) if layout.homogeneous() else None
    if fc is None:
        parts = []
        for b, (xi, yi) in enumerate(layout.blocks):
            sub = BlockLayout((layout.blocks[b],))
            provider = _blocked_provider(model, sub, x, x_obs.t0, x_obs.dt)
            yi = list(yi)
            means, covs, _ = _smoother_core(
                provider, filter_path.means[:, yi][:, None],
                filter_path.covariances[np.ix_(range(len(x)), yi, yi)][:, None],
                x_obs.dt, chunk=chunk)
            parts.append((means[:, 0], covs[:, 0]))
        return _assemble_blocked(layout, [p[0] for p in parts], [p[1] for p in parts],
                                 x_obs.dt, x_obs.t0, "smoother", model.n2)
    provider = _blocked_provider(model, layout, x, x_obs.t0, x_obs.dt)
    means, covs, _ = _smoother_core(provider, fm, fc, x_obs.dt, chunk=chunk)
    return _assemble_blocked(layout, [means[:, b] for b in range(layout.n_blocks)],
                             [covs[:, b] for b in range(layout.n_blocks)],
                             x_obs.dt, x_obs.t0, "smoother", model.n2)
