"""Core model abstractions.

Three model representations are shared by the whole package:

* :class:`GeneralSdeModel` -- an arbitrary drift/diffusion pair, the form
  the integrator consumes.
* :class:`CgnsModel` -- a two-block system whose hidden block is linear in
  itself given the observed block, so its conditional law stays Gaussian.
  Coefficient callbacks receive the observed block only, which enforces
  the structure by construction.
* :class:`LinearParamFamily` -- a discretized drift written as
  ``u^{j+1} = M^j xi + S^j + noise`` for parameter estimation.

State ordering is fixed everywhere as [observed block; hidden block].

Coefficient callbacks must broadcast: given ``x`` with shape (..., n1)
they return (..., out_shape).  Use :func:`const_coeff` for constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .series import TrajectorySeries

__all__ = [
    "GeneralSdeModel",
    "CgnsModel",
    "DriftTerm",
    "LinearParamFamily",
    "const_coeff",
    "split_observed",
    "as_general",
    "validate_cgns",
]

# Condition-number cap beyond which B1*B1^T counts as singular: past this
# the gain division in the conditional-moment equations is numerically
# meaningless.
SINGULARITY_CAP = 1e12


def const_coeff(value) -> Callable:
    """Wrap a constant array as a broadcasting coefficient callback."""
    value = np.asarray(value, dtype=float)

    def coeff(x, t):
        x = np.asarray(x)
        return np.broadcast_to(value, x.shape[:-1] + value.shape)

    return coeff


@dataclass(frozen=True)
class GeneralSdeModel:
    """General SDE du = drift(u, t) dt + diffusion(u, t) dW.

    ``drift(u, t) -> (..., dim)`` and ``diffusion(u, t) -> (..., dim, noise_dim)``
    must be total over the state space and broadcast over leading axes.
    """

    dim: int
    drift: Callable
    diffusion: Callable
    noise_dim: int

    def __post_init__(self):
        if self.dim <= 0 or self.noise_dim < 0:
            raise ValueError("dim must be positive and noise_dim nonnegative")


@dataclass(frozen=True)
class CgnsModel:
    """Two-block system with a conditionally Gaussian hidden block.

    Observed block X (dim n1) and hidden block Y (dim n2) evolve as::

        dX/dt = A0(X,t) + A1(X,t) Y + B1(X,t) dW1
        dY/dt = a0(X,t) + a1(X,t) Y + b2(X,t) dW2

    with W1, W2 independent.  All six callbacks see X only.
    """

    n1: int
    n2: int
    A0: Callable  # (X, t) -> (..., n1)
    A1: Callable  # (X, t) -> (..., n1, n2)
    a0: Callable  # (X, t) -> (..., n2)
    a1: Callable  # (X, t) -> (..., n2, n2)
    B1: Callable  # (X, t) -> (..., n1, k1)
    b2: Callable  # (X, t) -> (..., n2, k2)
    labels: tuple = ()

    @property
    def dim(self) -> int:
        return self.n1 + self.n2

    def split_state(self, u):
        u = np.asarray(u, dtype=float)
        return u[..., : self.n1], u[..., self.n1:]

    def noise_dims(self):
        x = np.zeros(self.n1)
        return self.B1(x, 0.0).shape[-1], self.b2(x, 0.0).shape[-1]


def split_observed(model: CgnsModel, series: TrajectorySeries):
    """Split a full-state series into its observed and hidden parts.

    The series must hold the observed block first, then the hidden block.
    """
    if series.dim != model.dim:
        raise ValueError(
            f"series dimension {series.dim} != model dimension {model.dim}")
    x = TrajectorySeries(series.dt, series.t0, series.values[:, : model.n1],
                         seed=series.seed, labels=series.labels[: model.n1])
    y = TrajectorySeries(series.dt, series.t0, series.values[:, model.n1:],
                         seed=series.seed, labels=series.labels[model.n1:])
    return x, y


def as_general(model: CgnsModel) -> GeneralSdeModel:
    """View a two-block model as a general SDE so the integrator can run it.

    Drift stacks [A0 + A1 Y; a0 + a1 Y]; diffusion is block diagonal in
    [B1; b2] with independent noise columns.
    """
    n1, n2 = model.n1, model.n2
    k1, k2 = model.noise_dims()

    def drift(u, t):
        x, y = u[..., :n1], u[..., n1:]
        dx = model.A0(x, t) + np.einsum("...ij,...j->...i", model.A1(x, t), y)
        dy = model.a0(x, t) + np.einsum("...ij,...j->...i", model.a1(x, t), y)
        return np.concatenate([dx, dy], axis=-1)

    def diffusion(u, t):
        x = u[..., :n1]
        b_top = model.B1(x, t)
        b_bot = model.b2(x, t)
        out = np.zeros(u.shape[:-1] + (n1 + n2, k1 + k2))
        out[..., :n1, :k1] = b_top
        out[..., n1:, k1:] = b_bot
        return out

    return GeneralSdeModel(dim=n1 + n2, drift=drift, diffusion=diffusion,
                           noise_dim=k1 + k2)


def validate_cgns(model: CgnsModel, probe_states, cond_cap: float = SINGULARITY_CAP) -> dict:
    """Probe B1*B1^T for near-singularity at the given observed states.

    Returns a report dict; never raises.  A probe is flagged when the
    condition number of B1*B1^T exceeds ``cond_cap``.
    """
    probes = [np.asarray(p, dtype=float) for p in probe_states]
    if not probes:
        raise ValueError("probe_states must be nonempty")
    flagged = []
    conds = []
    for i, x in enumerate(probes):
        b1 = np.atleast_2d(model.B1(x, 0.0))
        bbt = b1 @ b1.T
        cond = np.linalg.cond(bbt)
        conds.append(cond)
        if not np.isfinite(cond) or cond > cond_cap:
            flagged.append(i)
    return {
        "n_probes": len(probes),
        "flagged": flagged,
        "max_condition": float(np.max(conds)),
        "cond_cap": cond_cap,
        "ok": not flagged,
    }


# ---------------------------------------------------------------------------
# Linear-in-parameter drift families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftTerm:
    """One additive term of the discretized drift M^j xi + S^j.

    The term contributes ``coeff(X^j, t_j) * prod(Y^j[m] for m in monomial)``
    to state row ``row``; it multiplies parameter ``param`` (a column of
    M^j) or belongs to S^j when ``param`` is None.  ``coeff`` is evaluated
    on the whole observed series at once: coeff(X (J, n1), t (J,)) -> (J,).
    Monomials are limited to degree two in the hidden variables, which
    keeps all estimation expectations within fourth Gaussian moments.
    """

    row: int
    param: int | None
    coeff: Callable
    monomial: tuple = ()

    def __post_init__(self):
        if len(self.monomial) > 2:
            raise ValueError("drift terms may be at most quadratic in the hidden block")


def _const_step_coeff(c: float) -> Callable:
    def coeff(x, t):
        return np.full(np.shape(x)[0], float(c))
    return coeff


@dataclass(frozen=True)
class LinearParamFamily:
    """Drift decomposition ``u^{j+1} = M^j xi + S^j + R^{1/2} eps^j``.

    Parameters enter linearly through ``terms``; each diagonal entry of
    the (diagonal, constant) noise covariance R equals one diffusion
    parameter squared times dt.

    Attributes
    ----------
    n1, n2 : int
        Observed / hidden dimensions of the underlying state.
    param_names : list of str
        Ordered drift parameter names (the vector xi).
    terms : list of DriftTerm
        Every additive piece of M^j (param is an index) and S^j (param None).
        The identity carry-over ``u^j`` rows are implicit and always added.
    dt : float
        Discretization step the family was built for.
    diffusion_names : list of str
        One name per state row; R[r, r] = sigma_r**2 * dt.  Rows sharing a
        name share a single noise amplitude during estimation.
    constraint : (H, g) or None
        Optional linear restriction H xi = g on the drift parameters.
    make_model : callable or None
        theta -> CgnsModel for families that are themselves conditionally
        Gaussian (needed to run the conditional-moment sweeps during EM).
    """

    n1: int
    n2: int
    param_names: list
    terms: list
    dt: float
    diffusion_names: list = field(default_factory=list)
    constraint: tuple | None = None
    make_model: Callable | None = None

    def __post_init__(self):
        n_rows = self.n1 + self.n2
        for term in self.terms:
            if not (0 <= term.row < n_rows):
                raise ValueError(f"term row {term.row} out of range")
            if term.param is not None and not (0 <= term.param < len(self.param_names)):
                raise ValueError(f"term parameter index {term.param} out of range")
            for m in term.monomial:
                if not (0 <= m < self.n2):
                    raise ValueError(f"monomial index {m} out of hidden-block range")
        if self.diffusion_names and len(self.diffusion_names) != n_rows:
            raise ValueError("diffusion_names must have one entry per state row")
        if self.constraint is not None:
            h, g = self.constraint
            h = np.atleast_2d(np.asarray(h, dtype=float))
            g = np.atleast_1d(np.asarray(g, dtype=float))
            if h.shape != (len(g), len(self.param_names)):
                raise ValueError("constraint shape mismatch with parameter vector")
            object.__setattr__(self, "constraint", (h, g))

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def n_rows(self) -> int:
        return self.n1 + self.n2

    def max_degree(self) -> int:
        return max((len(t.monomial) for t in self.terms), default=0)

    # -- numeric evaluation at a concrete state ------------------------------

    def build_M(self, u, t) -> np.ndarray:
        """M^j at a single state: (n_rows, n_params)."""
        u = np.asarray(u, dtype=float)
        x, y = u[: self.n1], u[self.n1:]
        out = np.zeros((self.n_rows, self.n_params))
        for term in self.terms:
            if term.param is None:
                continue
            c = float(term.coeff(x[None, :], np.asarray([t]))[0])
            out[term.row, term.param] += c * float(np.prod([y[m] for m in term.monomial]))
        return out

    def build_S(self, u, t) -> np.ndarray:
        """S^j at a single state: (n_rows,), including the u^j carry-over."""
        u = np.asarray(u, dtype=float)
        x, y = u[: self.n1], u[self.n1:]
        out = u.copy()
        for term in self.terms:
            if term.param is not None:
                continue
            c = float(term.coeff(x[None, :], np.asarray([t]))[0])
            out[term.row] += c * float(np.prod([y[m] for m in term.monomial]))
        return out

    def predict(self, u, t, xi) -> np.ndarray:
        return self.build_M(u, t) @ np.asarray(xi, dtype=float) + self.build_S(u, t)
