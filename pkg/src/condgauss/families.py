"""Linear-in-parameter drift families for the built-in systems.

Each builder returns a :class:`~condgauss.models.LinearParamFamily` whose
terms decompose the Euler-discretized drift as M^j xi + S^j.  Families for
conditionally Gaussian surrogates also carry ``make_model`` so the
estimation loop can rebuild the model at every iterate; families for the
original nonlinear systems (quadratic in the hidden block) are used in the
final maximization only.
"""

from __future__ import annotations

import numpy as np

from .builtin import L96ApproxParams, L96Params, TriadParams, l96_approximate
from .inference import BlockLayout, layout_for_l96
from .models import CgnsModel, DriftTerm, GeneralSdeModel, LinearParamFamily, const_coeff

__all__ = [
    "linear_cgns_family", "triad_perfect_family", "l96_approx_family",
    "l96_perfect_family", "l96_from_identified", "triad_from_identified",
]


def _const(value):
    def coeff(xs, ts, _v=float(value)):
        return np.full(len(xs), _v)
    return coeff


def _x_column(col, scale):
    def coeff(xs, ts, _c=int(col), _s=float(scale)):
        return _s * xs[:, _c]
    return coeff


def _x_column_sq(col, scale):
    def coeff(xs, ts, _c=int(col), _s=float(scale)):
        return _s * xs[:, _c] ** 2
    return coeff


# ---------------------------------------------------------------------------
# Generic constant-coefficient conditionally Gaussian family
# ---------------------------------------------------------------------------

def linear_cgns_family(n1: int, n2: int, dt: float) -> LinearParamFamily:
    """Every constant drift entry is a parameter; diagonal noise.

    Parameter order: A0 (n1), A1 row-major (n1*n2), a0 (n2),
    a1 row-major (n2*n2).
    """
    names = ([f"A0_{i}" for i in range(n1)]
             + [f"A1_{i}{j}" for i in range(n1) for j in range(n2)]
             + [f"a0_{i}" for i in range(n2)]
             + [f"a1_{i}{j}" for i in range(n2) for j in range(n2)])
    terms = []
    p = 0
    for i in range(n1):
        terms.append(DriftTerm(row=i, param=p, coeff=_const(dt)))
        p += 1
    for i in range(n1):
        for j in range(n2):
            terms.append(DriftTerm(row=i, param=p, coeff=_const(dt), monomial=(j,)))
            p += 1
    for i in range(n2):
        terms.append(DriftTerm(row=n1 + i, param=p, coeff=_const(dt)))
        p += 1
    for i in range(n2):
        for j in range(n2):
            terms.append(DriftTerm(row=n1 + i, param=p, coeff=_const(dt), monomial=(j,)))
            p += 1

    def make_model(xi, sigmas):
        xi = np.asarray(xi, dtype=float)
        k = 0
        A0 = xi[k:k + n1]; k += n1
        A1 = xi[k:k + n1 * n2].reshape(n1, n2); k += n1 * n2
        a0 = xi[k:k + n2]; k += n2
        a1 = xi[k:k + n2 * n2].reshape(n2, n2)
        return CgnsModel(
            n1=n1, n2=n2,
            A0=const_coeff(A0), A1=const_coeff(A1), a0=const_coeff(a0),
            a1=const_coeff(a1), B1=const_coeff(np.diag(sigmas[:n1])),
            b2=const_coeff(np.diag(sigmas[n1:])),
        )

    return LinearParamFamily(
        n1=n1, n2=n2, param_names=names, terms=terms, dt=dt,
        diffusion_names=[f"x{i}" for i in range(n1)] + [f"y{i}" for i in range(n2)],
        make_model=make_model,
    )


def pack_linear_cgns(A0, A1, a0, a1) -> np.ndarray:
    return np.concatenate([np.ravel(A0), np.ravel(A1), np.ravel(a0), np.ravel(a1)])


def coupled_oscillator_family(dt: float, damping: float = 1.0) -> LinearParamFamily:
    """Scalar observed channel driving a rotating 2-dim hidden block.

    The hidden dampings are known structure (they sit in S); the free
    drift parameters are the observed-channel constants (A0, A1_1, A1_2),
    the hidden forcings (a0_1, a0_2) and the rotation couplings
    (c12, c21).  A window of moderate length identifies every one of them
    well, which a free damping rate would not allow.
    """
    names = ["A0", "A1_1", "A1_2", "a0_1", "a0_2", "c12", "c21"]
    terms = [
        DriftTerm(row=0, param=0, coeff=_const(dt)),
        DriftTerm(row=0, param=1, coeff=_const(dt), monomial=(0,)),
        DriftTerm(row=0, param=2, coeff=_const(dt), monomial=(1,)),
        DriftTerm(row=1, param=3, coeff=_const(dt)),
        DriftTerm(row=2, param=4, coeff=_const(dt)),
        DriftTerm(row=1, param=5, coeff=_const(dt), monomial=(1,)),   # c12 y2 in y1
        DriftTerm(row=2, param=6, coeff=_const(dt), monomial=(0,)),   # c21 y1 in y2
        DriftTerm(row=1, param=None, coeff=_const(-damping * dt), monomial=(0,)),
        DriftTerm(row=2, param=None, coeff=_const(-damping * dt), monomial=(1,)),
    ]

    def make_model(xi, sigmas):
        xi = np.asarray(xi, dtype=float)
        a1 = np.array([[-damping, xi[5]], [xi[6], -damping]])
        return CgnsModel(
            n1=1, n2=2,
            A0=const_coeff(xi[0:1]), A1=const_coeff(xi[1:3][None, :]),
            a0=const_coeff(xi[3:5]), a1=const_coeff(a1),
            B1=const_coeff(np.diag(sigmas[:1])), b2=const_coeff(np.diag(sigmas[1:])),
        )

    return LinearParamFamily(
        n1=1, n2=2, param_names=names, terms=terms, dt=dt,
        diffusion_names=["x", "y1", "y2"], make_model=make_model,
    )


# ---------------------------------------------------------------------------
# Three-mode quadratic system (original model; final maximization)
# ---------------------------------------------------------------------------

def triad_perfect_family(dt: float) -> LinearParamFamily:
    """Parameters (beta_x, beta_y, beta_z, alpha) of the full triad drift.

    Hidden block (y, z); the nonlinearity strength alpha multiplies terms
    in all three equations, including the quadratic y z product in the
    observed one.
    """
    terms = [
        DriftTerm(row=0, param=0, coeff=_x_column(0, dt)),                      # beta_x x
        DriftTerm(row=0, param=3, coeff=_x_column(0, dt), monomial=(0,)),       # alpha x y
        DriftTerm(row=0, param=3, coeff=_const(dt), monomial=(0, 1)),           # alpha y z
        DriftTerm(row=1, param=1, coeff=_const(dt), monomial=(0,)),             # beta_y y
        DriftTerm(row=1, param=3, coeff=_x_column_sq(0, -dt)),                  # -alpha x^2
        DriftTerm(row=1, param=3, coeff=_x_column(0, 2 * dt), monomial=(1,)),   # 2 alpha x z
        DriftTerm(row=2, param=2, coeff=_const(dt), monomial=(1,)),             # beta_z z
        DriftTerm(row=2, param=3, coeff=_x_column(0, -3 * dt), monomial=(0,)),  # -3 alpha x y
    ]
    return LinearParamFamily(
        n1=1, n2=2, param_names=["beta_x", "beta_y", "beta_z", "alpha"],
        terms=terms, dt=dt, diffusion_names=["x", "y", "z"],
    )


def triad_from_identified(xi, sigmas) -> GeneralSdeModel:
    """Full triad drift from estimated coefficients, without sign validation."""
    bx, by, bz, al = (float(v) for v in xi)
    sx, sy, sz = (float(v) for v in sigmas)

    def drift(u, t):
        x, y, z = u[..., 0], u[..., 1], u[..., 2]
        return np.stack([
            bx * x + al * x * y + al * y * z,
            by * y - al * x ** 2 + 2 * al * x * z,
            bz * z - 3 * al * x * y,
        ], axis=-1)

    return GeneralSdeModel(dim=3, drift=drift,
                           diffusion=const_coeff(np.diag([sx, sy, sz])), noise_dim=3)


# ---------------------------------------------------------------------------
# Two-layer lattice families
# ---------------------------------------------------------------------------

def _l96_u_base_coeff(site, dt):
    def coeff(xs, ts, _s=int(site), _dt=float(dt)):
        um1 = np.roll(xs, 1, axis=1)[:, _s]
        um2 = np.roll(xs, 2, axis=1)[:, _s]
        up1 = np.roll(xs, -1, axis=1)[:, _s]
        return _dt * (-um1 * (um2 - up1) - xs[:, _s])
    return coeff


def l96_approx_family(n_sites: int, n_levels: int, dt: float) -> LinearParamFamily:
    """Stochastically parameterized lattice, all hatted constants free.

    Parameter order: f_hat (I), a_hat (I, coupling tied across both
    layers), d_hat (I*J), v_hat (I*J).  Use :func:`l96_layout` for the
    per-site decomposition of the expectation step.
    """
    nI, nJ = n_sites, n_levels
    names = ([f"f_hat_{i+1}" for i in range(nI)]
             + [f"a_hat_{i+1}" for i in range(nI)]
             + [f"d_hat_{i+1}_{l+1}" for i in range(nI) for l in range(nJ)]
             + [f"v_hat_{i+1}_{l+1}" for i in range(nI) for l in range(nJ)])
    p_f = 0
    p_a = nI
    p_d = 2 * nI
    p_v = 2 * nI + nI * nJ
    terms = []
    for s in range(nI):
        terms.append(DriftTerm(row=s, param=None, coeff=_l96_u_base_coeff(s, dt)))
        terms.append(DriftTerm(row=s, param=p_f + s, coeff=_const(dt)))
        for l in range(nJ):
            flat = s * nJ + l
            terms.append(DriftTerm(row=s, param=p_a + s, coeff=_const(-dt),
                                   monomial=(flat,)))
            row = nI + flat
            terms.append(DriftTerm(row=row, param=p_a + s, coeff=_x_column(s, dt)))
            terms.append(DriftTerm(row=row, param=p_d + flat, coeff=_const(-dt),
                                   monomial=(flat,)))
            terms.append(DriftTerm(row=row, param=p_v + flat, coeff=_const(dt)))

    def make_model(xi, sigmas):
        xi = np.asarray(xi, dtype=float)
        params = L96ApproxParams(
            f_hat=xi[p_f:p_f + nI],
            a_hat=xi[p_a:p_a + nI],
            sigma_u_hat=np.asarray(sigmas[:nI], dtype=float),
            d_hat=xi[p_d:p_d + nI * nJ].reshape(nI, nJ),
            v_hat=xi[p_v:p_v + nI * nJ].reshape(nI, nJ),
            sigma_v_hat=np.asarray(sigmas[nI:], dtype=float).reshape(nI, nJ),
        )
        return l96_approximate(params)

    return LinearParamFamily(
        n1=nI, n2=nI * nJ, param_names=names, terms=terms, dt=dt,
        diffusion_names=[f"u{i+1}" for i in range(nI)]
        + [f"v{i+1}_{l+1}" for i in range(nI) for l in range(nJ)],
        make_model=make_model,
    )


def l96_layout(n_sites: int, n_levels: int) -> BlockLayout:
    return layout_for_l96(n_sites, n_levels)


def l96_perfect_family(n_sites: int, n_levels: int, dt: float) -> LinearParamFamily:
    """Original lattice drift: parameters f, h c_i / J, b c_i and c_i.

    The small-scale advection is quadratic in the hidden ring, so the
    maximization consumes third and fourth conditional moments.  The
    large-scale advection and damping carry no parameters and sit in S.
    Noise amplitudes are tied into one large-scale and one small-scale
    group.
    """
    nI, nJ = n_sites, n_levels
    ring = nI * nJ
    names = (["f"] + [f"hc_over_J_{i+1}" for i in range(nI)]
             + [f"bc_{i+1}" for i in range(nI)] + [f"c_{i+1}" for i in range(nI)])
    p_g = 1
    p_bc = 1 + nI
    p_c = 1 + 2 * nI
    terms = []
    for s in range(nI):
        terms.append(DriftTerm(row=s, param=None, coeff=_l96_u_base_coeff(s, dt)))
        terms.append(DriftTerm(row=s, param=0, coeff=_const(dt)))
        for l in range(nJ):
            flat = s * nJ + l
            terms.append(DriftTerm(row=s, param=p_g + s, coeff=_const(-dt),
                                   monomial=(flat,)))
            row = nI + flat
            # -b c_s v_{k+1} (v_{k+2} - v_{k-1}) on the flattened ring
            terms.append(DriftTerm(row=row, param=p_bc + s, coeff=_const(-dt),
                                   monomial=((flat + 1) % ring, (flat + 2) % ring)))
            terms.append(DriftTerm(row=row, param=p_bc + s, coeff=_const(dt),
                                   monomial=((flat + 1) % ring, (flat - 1) % ring)))
            terms.append(DriftTerm(row=row, param=p_c + s, coeff=_const(-dt),
                                   monomial=(flat,)))
            terms.append(DriftTerm(row=row, param=p_g + s, coeff=_x_column(s, dt)))
    return LinearParamFamily(
        n1=nI, n2=ring, param_names=names, terms=terms, dt=dt,
        diffusion_names=["u"] * nI + ["v"] * ring,
    )


def l96_from_identified(xi, sigma_u: float, sigma_v: float, n_sites: int,
                        n_levels: int) -> GeneralSdeModel:
    """Original-form lattice with estimated composite coefficients."""
    nI, nJ = n_sites, n_levels
    xi = np.asarray(xi, dtype=float)
    f = xi[0]
    g = xi[1:1 + nI]
    bc = xi[1 + nI:1 + 2 * nI]
    c = xi[1 + 2 * nI:1 + 3 * nI]
    g_rep = np.repeat(g, nJ)
    bc_rep = np.repeat(bc, nJ)
    c_rep = np.repeat(c, nJ)
    sig = np.concatenate([np.full(nI, sigma_u), np.full(nI * nJ, sigma_v)])

    def drift(u, t):
        us = u[..., :nI]
        vf = u[..., nI:]
        v_by_site = vf.reshape(vf.shape[:-1] + (nI, nJ))
        um1 = np.roll(us, 1, axis=-1)
        um2 = np.roll(us, 2, axis=-1)
        up1 = np.roll(us, -1, axis=-1)
        du = -um1 * (um2 - up1) - us + f - g * v_by_site.sum(axis=-1)
        vp1 = np.roll(vf, -1, axis=-1)
        vp2 = np.roll(vf, -2, axis=-1)
        vm1 = np.roll(vf, 1, axis=-1)
        dv = -bc_rep * vp1 * (vp2 - vm1) - c_rep * vf + g_rep * np.repeat(us, nJ, axis=-1)
        return np.concatenate([du, dv], axis=-1)

    return GeneralSdeModel(dim=nI + nI * nJ, drift=drift,
                           diffusion=const_coeff(np.diag(sig)), noise_dim=nI + nI * nJ)
