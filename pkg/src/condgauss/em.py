"""Parameter estimation by expectation maximization.

The hidden block is never observed, so the estimation loop alternates
between a conditional-moment sweep (the expectation step, exact thanks to
the conditionally Gaussian structure of the surrogate model) and a
closed-form maximization over drift parameters and diagonal noise.

The maximization works on the discretized-drift decomposition
``u^{j+1} = M^j xi + S^j + R^{1/2} eps^j`` of a
:class:`~condgauss.models.LinearParamFamily`.  Expectations of the hidden
variables inside the normal equations expand through joint Gaussian
moments of (Y^j, Y^{j+1}); families quadratic in the hidden block (the
original nonlinear systems) bring in third and fourth moments, evaluated
with the Gaussian moment formulas on the smoother output.

A mean-state-only ablation (collapsing the hidden law to its mean) is
available to demonstrate the bias it induces; it is not meant for use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import (
    BlockLayout,
    GaussianPath,
    _blocked_provider,
    _discrete_sweeps_core,
    _model_provider,
)
from .models import CgnsModel, LinearParamFamily
from .series import TrajectorySeries

__all__ = [
    "EStepMoments", "EmState", "MStepResult", "MStepError", "EmError",
    "e_step", "m_step", "m_step_constrained", "em_fit", "final_m_step",
    "gaussian_product_moment",
]


class MStepError(RuntimeError):
    def __init__(self, message, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction


class EmError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# Gaussian moments
# ---------------------------------------------------------------------------

def gaussian_product_moment(mu, cov, indices) -> np.ndarray:
    """E[prod_k Z_{indices[k]}] for Z ~ N(mu, cov), up to degree four.

    ``mu`` may be (n,) or (J, n) and ``cov`` (n, n) or (J, n, n); the
    result is scalar or (J,).  Degree three and four use the moment
    expansion in means and covariances (exact for Gaussians, the closure
    approximation when applied to non-Gaussian conditionals).
    """
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    idx = tuple(int(i) for i in indices)

    def m(a):
        return mu[..., a]

    def c(a, b):
        return cov[..., a, b]

    if len(idx) == 0:
        return np.ones(mu.shape[:-1])
    if len(idx) == 1:
        return m(idx[0])
    if len(idx) == 2:
        a, b = idx
        return m(a) * m(b) + c(a, b)
    if len(idx) == 3:
        a, b, d = idx
        return (m(a) * m(b) * m(d) + m(a) * c(b, d) + m(b) * c(a, d)
                + m(d) * c(a, b))
    if len(idx) == 4:
        a, b, d, e = idx
        return (c(a, b) * c(d, e) + c(a, d) * c(b, e) + c(a, e) * c(b, d)
                + m(a) * m(b) * c(d, e) + m(a) * m(d) * c(b, e)
                + m(a) * m(e) * c(b, d) + m(b) * m(d) * c(a, e)
                + m(b) * m(e) * c(a, d) + m(d) * m(e) * c(a, b)
                + m(a) * m(b) * m(d) * m(e))
    raise ValueError("moments beyond degree four are not supported")


# ---------------------------------------------------------------------------
# Expectation-step output
# ---------------------------------------------------------------------------

@dataclass
class EStepMoments:
    """Smoother means/covariances plus one-step cross-covariances.

    Covariances may be stored dense, (J+1, n2, n2) and (J, n2, n2), or
    block-diagonally as stacked per-block arrays with a layout; cross-block
    entries then read as zero.
    """

    dt: float
    means: np.ndarray                      # (J+1, n2)
    covs: np.ndarray | None = None         # dense storage
    cross: np.ndarray | None = None        # dense storage, Cov(Y^{j+1}, Y^j)
    block_covs: np.ndarray | None = None   # (J+1, B, nb, nb)
    block_cross: np.ndarray | None = None  # (J, B, nb, nb)
    block_index: dict = field(default_factory=dict)  # hidden index -> (block, pos)

    @property
    def n_steps(self) -> int:
        return self.means.shape[0] - 1

    @property
    def n2(self) -> int:
        return self.means.shape[1]

    def mean_col(self, comp: int) -> np.ndarray:
        return self.means[:, comp]

    def cov_entry(self, a: int, b: int) -> np.ndarray:
        if self.covs is not None:
            return self.covs[:, a, b]
        ba, ia = self.block_index[a]
        bb, ib = self.block_index[b]
        if ba != bb:
            return np.zeros(self.means.shape[0])
        return self.block_covs[:, ba, ia, ib]

    def cross_entry(self, a: int, b: int) -> np.ndarray:
        """Cov(Y^{j+1}_a, Y^j_b), length J."""
        if self.cross is not None:
            return self.cross[:, a, b]
        ba, ia = self.block_index[a]
        bb, ib = self.block_index[b]
        if ba != bb:
            return np.zeros(self.n_steps)
        return self.block_cross[:, ba, ia, ib]

    def marginalize(self, indices) -> "EStepMoments":
        """Restrict to a subset of hidden components (same ordering)."""
        idx = list(indices)
        means = self.means[:, idx]
        covs = np.empty((self.means.shape[0], len(idx), len(idx)))
        cross = np.empty((self.n_steps, len(idx), len(idx)))
        for a, ga in enumerate(idx):
            for b, gb in enumerate(idx):
                covs[:, a, b] = self.cov_entry(ga, gb)
                cross[:, a, b] = self.cross_entry(ga, gb)
        return EStepMoments(dt=self.dt, means=means, covs=covs, cross=cross)

    def mean_only_copy(self) -> "EStepMoments":
        """Ablation: keep the smoother mean, zero all second-moment spread."""
        zero_c = np.zeros((self.means.shape[0], self.n2, self.n2))
        zero_x = np.zeros((self.n_steps, self.n2, self.n2))
        return EStepMoments(dt=self.dt, means=self.means.copy(), covs=zero_c, cross=zero_x)

    def smoother_path(self, t0: float = 0.0) -> GaussianPath:
        if self.covs is None:
            covs = np.zeros((self.means.shape[0], self.n2, self.n2))
            for a in range(self.n2):
                for b in range(self.n2):
                    covs[:, a, b] = self.cov_entry(a, b)
        else:
            covs = self.covs
        return GaussianPath(self.dt, t0, self.means, covs, kind="smoother")


def e_step(model: CgnsModel, x_obs: TrajectorySeries, layout: BlockLayout | None = None,
           mu0=None, r0=None, mean_only: bool = False) -> EStepMoments:
    """Conditional moments of the hidden block given the observed series.

    Runs the exact discrete-model sweeps (predict/update filter plus
    fixed-interval backward pass and one-step cross-covariances) in one
    pass; with a layout, all blocks run batched.  The discrete recursions
    share the continuum limit of the continuous-form sweeps but are
    consistent with the discretized-model likelihood that the
    maximization step optimizes; estimation needs that consistency.
    """
    x = x_obs.values
    dt = x_obs.dt
    n_steps = len(x) - 1
    if layout is None:
        mu0v = np.zeros(model.n2) if mu0 is None else np.asarray(mu0, dtype=float)
        r0v = np.zeros((model.n2, model.n2)) if r0 is None else np.asarray(r0, dtype=float)
        provider = _model_provider(model, x, x_obs.t0, dt)
        dx = (x[1:] - x[:-1])[:, None, :]
        sm, sc, cross = _discrete_sweeps_core(provider, dx, dt, mu0v[None], r0v[None])
        moments = EStepMoments(dt=dt, means=sm[:, 0], covs=sc[:, 0], cross=cross[:, 0])
    else:
        if not layout.homogeneous():
            raise ValueError("batched expectation step needs homogeneous blocks")
        provider = _blocked_provider(model, layout, x, x_obs.t0, dt)
        dx_full = x[1:] - x[:-1]
        dx = np.stack([dx_full[:, list(xi)] for xi, _ in layout.blocks], axis=1)
        nb = len(layout.blocks[0][1])
        mu0v = np.zeros((layout.n_blocks, nb)) if mu0 is None else np.asarray(mu0)
        r0v = np.zeros((layout.n_blocks, nb, nb)) if r0 is None else np.asarray(r0)
        sm, sc, cross = _discrete_sweeps_core(provider, dx, dt, mu0v, r0v)
        means = np.zeros((n_steps + 1, model.n2))
        block_index = {}
        for b, (_, yi) in enumerate(layout.blocks):
            means[:, list(yi)] = sm[:, b]
            for pos, g in enumerate(yi):
                block_index[g] = (b, pos)
        moments = EStepMoments(dt=dt, means=means, block_covs=sc, block_cross=cross,
                               block_index=block_index)
    return moments.mean_only_copy() if mean_only else moments


# ---------------------------------------------------------------------------
# Maximization step
# ---------------------------------------------------------------------------

class _MomentTable:
    """Vectorized expectations of products of timed hidden monomials.

    A timed monomial is a tuple of (offset, component) with offset 0 for
    Y^j and 1 for Y^{j+1}; expectations are taken under the joint Gaussian
    of the pair and returned as arrays over j in [j1, J-1].
    """

    def __init__(self, moments: EStepMoments, j1: int):
        self.moments = moments
        self.j1 = j1
        self.n_steps = moments.n_steps
        self._mean_cache = {}
        self._cov_cache = {}

    def mean(self, off: int, comp: int) -> np.ndarray:
        key = (off, comp)
        if key not in self._mean_cache:
            col = self.moments.mean_col(comp)
            self._mean_cache[key] = col[self.j1 + off: self.n_steps + off]
        return self._mean_cache[key]

    def cov(self, k1, k2) -> np.ndarray:
        key = (k1, k2) if k1 <= k2 else (k2, k1)
        if key not in self._cov_cache:
            (o1, c1), (o2, c2) = key
            if o1 == o2:
                col = self.moments.cov_entry(c1, c2)
                arr = col[self.j1 + o1: self.n_steps + o1]
            else:
                # key ordering guarantees o1 = 0, o2 = 1: Cov(Y^j_c1, Y^{j+1}_c2)
                arr = self.moments.cross_entry(c2, c1)[self.j1: self.n_steps]
            self._cov_cache[key] = arr
        return self._cov_cache[key]

    def expect(self, monos: tuple) -> np.ndarray:
        n = len(monos)
        if n == 0:
            return 1.0
        if n == 1:
            return self.mean(*monos[0])
        if n == 2:
            a, b = monos
            return self.mean(*a) * self.mean(*b) + self.cov(a, b)
        if n == 3:
            a, b, d = monos
            return (self.mean(*a) * self.mean(*b) * self.mean(*d)
                    + self.mean(*a) * self.cov(b, d)
                    + self.mean(*b) * self.cov(a, d)
                    + self.mean(*d) * self.cov(a, b))
        if n == 4:
            a, b, d, e = monos
            ma, mb, md, me = (self.mean(*k) for k in (a, b, d, e))
            return (self.cov(a, b) * self.cov(d, e) + self.cov(a, d) * self.cov(b, e)
                    + self.cov(a, e) * self.cov(b, d)
                    + ma * mb * self.cov(d, e) + ma * md * self.cov(b, e)
                    + ma * me * self.cov(b, d) + mb * md * self.cov(a, e)
                    + mb * me * self.cov(a, d) + md * me * self.cov(a, b)
                    + ma * mb * md * me)
        raise ValueError("monomial products beyond degree four are not supported")


def _compile_rows(family: LinearParamFamily, x_values: np.ndarray, times: np.ndarray):
    """Evaluate term coefficients over the series and group terms by row.

    Returns per-row lists of (param, coeff array over steps, timed monomial)
    for M, and the residual-target terms for u^{j+1} - S^j.
    """
    n1 = family.n1
    n_steps = len(x_values) - 1
    xs = x_values[:-1]
    ts = times[:-1]
    m_terms = [[] for _ in range(family.n_rows)]
    s_terms = [[] for _ in range(family.n_rows)]
    for term in family.terms:
        coeff = np.asarray(term.coeff(xs, ts), dtype=float)
        if coeff.shape != (n_steps,):
            coeff = np.broadcast_to(coeff, (n_steps,))
        mono = tuple((0, m) for m in term.monomial)
        if term.param is None:
            s_terms[term.row].append((coeff, mono))
        else:
            m_terms[term.row].append((term.param, coeff, mono))
    targets = []
    for r in range(family.n_rows):
        terms = []
        if r < n1:
            base = x_values[1:, r] - x_values[:-1, r]
            for coeff, mono in s_terms[r]:
                if mono:
                    terms.append((-coeff, mono))
                else:
                    base = base - coeff
            terms.append((base, ()))
        else:
            comp = r - n1
            terms.append((np.ones(n_steps), ((1, comp),)))
            terms.append((-np.ones(n_steps), ((0, comp),)))
            for coeff, mono in s_terms[r]:
                terms.append((-coeff, mono))
        targets.append(terms)
    return m_terms, targets


def _row_statistics(family: LinearParamFamily, x_obs: TrajectorySeries,
                    moments: EStepMoments, j1: int):
    """Per-row quadratic forms of the maximization objective.

    T2[r] = sum_j E[M_r M_r^T], T1[r] = sum_j E[M_r (u^{j+1} - S)_r],
    T0[r] = sum_j E[(u^{j+1} - S)_r^2], summed over j in [j1, J-1].
    """
    n_steps = moments.n_steps
    if not (0 <= j1 < n_steps):
        raise ValueError("burn-in leaves no usable steps")
    table = _MomentTable(moments, j1)
    m_terms, targets = _compile_rows(family, x_obs.values, x_obs.times)
    n_p = family.n_params
    sl = slice(j1, n_steps)
    T2 = np.zeros((family.n_rows, n_p, n_p))
    T1 = np.zeros((family.n_rows, n_p))
    T0 = np.zeros(family.n_rows)
    for r in range(family.n_rows):
        for p, cf1, mono1 in m_terms[r]:
            for q, cf2, mono2 in m_terms[r]:
                if q < p:
                    continue
                val = float(np.sum(cf1[sl] * cf2[sl] * table.expect(mono1 + mono2)))
                T2[r, p, q] += val
                if q != p:
                    T2[r, q, p] += val
            for cft, monot in targets[r]:
                cft_s = cft[sl] if isinstance(cft, np.ndarray) else cft
                T1[r, p] += float(np.sum(cf1[sl] * cft_s * table.expect(mono1 + monot)))
        for cf1, mono1 in targets[r]:
            c1 = cf1[sl] if isinstance(cf1, np.ndarray) else cf1
            for cf2, mono2 in targets[r]:
                c2 = cf2[sl] if isinstance(cf2, np.ndarray) else cf2
                T0[r] += float(np.sum(c1 * c2 * table.expect(mono1 + mono2)))
    return T0, T1, T2


@dataclass(frozen=True)
class MStepResult:
    xi: np.ndarray
    r_diag: np.ndarray
    cost: float
    inner_iterations: int
    lagrange: np.ndarray | None = None


def _solve_xi(D, c, constraint):
    try:
        if constraint is None:
            return np.linalg.solve(D, c), None
        H, g = constraint
        Dinv_c = np.linalg.solve(D, c)
        Dinv_Ht = np.linalg.solve(D, H.T)
        gram = H @ Dinv_Ht
        lam = np.linalg.solve(gram, H @ Dinv_c - g)
        return Dinv_c - Dinv_Ht @ lam, lam
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (D + D.T))
        raise MStepError(
            "singular normal equations: parameter combination not identifiable "
            f"on this data (null direction {np.round(v[:, 0], 4)})",
            null_direction=v[:, 0]) from None


def _check_conditioning(D):
    w = np.linalg.eigvalsh(0.5 * (D + D.T))
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        v = np.linalg.eigh(0.5 * (D + D.T))[1][:, 0]
        raise MStepError(
            "singular normal equations: parameter combination not identifiable "
            f"on this data (null direction {np.round(v, 4)})", null_direction=v)


R_FLOOR = 1e-30


def _diffusion_groups(family: LinearParamFamily):
    """Rows sharing a diffusion name share one noise amplitude."""
    names = list(family.diffusion_names) or [f"row{r}" for r in range(family.n_rows)]
    seen = {}
    for r, name in enumerate(names):
        seen.setdefault(name, []).append(r)
    return [np.asarray(rows) for rows in seen.values()]


def _cost_from_stats(T0, T1, T2, xi, r_diag, n_used):
    quad = T0 - 2.0 * T1 @ xi + np.einsum("rpq,p,q->r", T2, xi, xi)
    return float(0.5 * np.sum(quad / r_diag) + 0.5 * n_used * np.sum(np.log(r_diag)))


def m_step(family: LinearParamFamily, x_obs: TrajectorySeries, moments: EStepMoments,
           j1: int | None = None, r_init=None, constraint=None,
           tol: float = 1e-8, max_inner: int = 100) -> MStepResult:
    """Closed-form maximization: alternate xi = D^{-1} c and the noise update.

    ``j1`` drops the burn-in steps (default 5% of the series).  ``r_init``
    seeds the alternation with the previous iteration's noise diagonal.
    The optional linear restriction H xi = g (from the family or passed
    explicitly) is enforced through its Lagrange multiplier and holds
    exactly in the returned parameters.
    """
    n_steps = moments.n_steps
    if j1 is None:
        j1 = max(0, int(0.05 * n_steps))
    T0, T1, T2 = _row_statistics(family, x_obs, moments, j1)
    n_used = n_steps - j1
    constraint = constraint if constraint is not None else family.constraint
    groups = _diffusion_groups(family)
    r_diag = np.ones(family.n_rows) if r_init is None else np.asarray(r_init, dtype=float).copy()
    xi = np.zeros(family.n_params)
    lam = None
    n_inner = 0
    for n_inner in range(1, max_inner + 1):
        w = 1.0 / r_diag
        D = np.einsum("r,rpq->pq", w, T2)
        c = np.einsum("r,rp->p", w, T1)
        _check_conditioning(D)
        xi_new, lam = _solve_xi(D, c, constraint)
        quad = T0 - 2.0 * T1 @ xi_new + np.einsum("rpq,p,q->r", T2, xi_new, xi_new)
        r_new = np.empty(family.n_rows)
        for rows in groups:
            r_new[rows] = max(quad[rows].sum() / (n_used * len(rows)), R_FLOOR)
        change = max(
            np.abs(xi_new - xi).max() / max(np.abs(xi_new).max(), 1e-12),
            np.abs(r_new - r_diag).max() / max(np.abs(r_new).max(), 1e-12),
        )
        xi, r_diag = xi_new, r_new
        if change < tol:
            break
    cost = _cost_from_stats(T0, T1, T2, xi, r_diag, n_used)
    if not np.isfinite(cost):
        raise MStepError("non-finite maximization objective")
    return MStepResult(xi=xi, r_diag=r_diag, cost=cost, inner_iterations=n_inner,
                       lagrange=lam)


def m_step_constrained(family: LinearParamFamily, x_obs: TrajectorySeries,
                       moments: EStepMoments, constraint, **kwargs) -> MStepResult:
    """Maximization under the linear restriction H xi = g."""
    H = np.atleast_2d(np.asarray(constraint[0], dtype=float))
    g = np.atleast_1d(np.asarray(constraint[1], dtype=float))
    if np.linalg.matrix_rank(H) < H.shape[0]:
        raise MStepError("constraint matrix must have full row rank")
    return m_step(family, x_obs, moments, constraint=(H, g), **kwargs)


def final_m_step(original_family: LinearParamFamily, x_obs: TrajectorySeries,
                 moments: EStepMoments, j1: int | None = None, **kwargs) -> MStepResult:
    """Maximization against the original (at most quadratic) model.

    Uses the converged surrogate's conditional moments; third and fourth
    hidden moments expand via the Gaussian closure.  ``moments`` must hold
    exactly the original family's hidden components (marginalize first if
    the surrogate carries auxiliary states).
    """
    if original_family.max_degree() > 2:
        raise MStepError("original drift must be at most quadratic in the hidden block")
    if moments.n2 != original_family.n2:
        raise ValueError(
            f"moments carry {moments.n2} hidden components, family expects "
            f"{original_family.n2}; marginalize the surrogate moments first")
    return m_step(original_family, x_obs, moments, j1=j1, **kwargs)


# ---------------------------------------------------------------------------
# The full estimation loop
# ---------------------------------------------------------------------------

@dataclass
class EmState:
    """Parameter trajectory of an estimation run.

    ``trace`` rows hold the drift parameters followed by the per-row noise
    amplitudes sigma = sqrt(R_rr / dt); ``costs[k]`` is the maximization
    objective after iteration k (nan at k=0).
    """

    xi: np.ndarray
    sigmas: np.ndarray
    trace: np.ndarray
    costs: np.ndarray
    param_names: list
    diffusion_names: list

    @property
    def iterations(self) -> int:
        return self.trace.shape[0] - 1

    def to_csv(self, path) -> None:
        import csv as _csv
        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["iter"] + list(self.param_names)
                            + [f"sigma_{n}" for n in self.diffusion_names] + ["cost"])
            for k in range(self.trace.shape[0]):
                writer.writerow([k] + [repr(float(v)) for v in self.trace[k]]
                                + [repr(float(self.costs[k]))])


def em_fit(family: LinearParamFamily, x_obs: TrajectorySeries, xi0, sigmas0,
           n_iterations: int, layout: BlockLayout | None = None,
           constraint=None, j1: int | None = None, mean_only: bool = False,
           callback=None) -> EmState:
    """Alternate expectation and maximization for ``n_iterations`` cycles.

    The family must provide ``make_model(xi, sigmas)``; noise amplitudes
    feed back into the next expectation step through the model and into
    the maximization through its alternation seed.
    """
    if family.make_model is None:
        raise ValueError("family cannot build its surrogate model (make_model is None)")
    xi = np.asarray(xi0, dtype=float).copy()
    sigmas = np.asarray(sigmas0, dtype=float).copy()
    if np.any(sigmas <= 0):
        raise ValueError("initial noise amplitudes must be positive")
    dt = x_obs.dt
    names = list(family.param_names)
    trace = np.empty((n_iterations + 1, len(xi) + len(sigmas)))
    costs = np.full(n_iterations + 1, np.nan)
    trace[0] = np.concatenate([xi, sigmas])
    for k in range(1, n_iterations + 1):
        model = family.make_model(xi, sigmas)
        moments = e_step(model, x_obs, layout=layout, mean_only=mean_only)
        try:
            res = m_step(family, x_obs, moments, j1=j1,
                         r_init=sigmas ** 2 * dt, constraint=constraint)
        except MStepError as err:
            raise EmError(str(err), iteration=k) from err
        if not np.isfinite(res.cost) or not np.all(np.isfinite(res.xi)):
            raise EmError("estimation diverged to non-finite parameters", iteration=k)
        xi = res.xi
        sigmas = np.sqrt(res.r_diag / dt)
        trace[k] = np.concatenate([xi, sigmas])
        costs[k] = res.cost
        if callback is not None:
            callback(k, xi, sigmas, res.cost)
    return EmState(xi=xi, sigmas=sigmas, trace=trace, costs=costs,
                   param_names=names,
                   diffusion_names=list(family.diffusion_names) or
                   [f"row{r}" for r in range(family.n_rows)])
