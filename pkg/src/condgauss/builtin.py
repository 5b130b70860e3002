"""The concrete stochastic test systems, pre-parameterized.

Three families are provided, each with a fully nonlinear version and a
conditionally Gaussian counterpart:

* a three-mode truncation of a stochastic Burgers-type flow with
  energy-conserving quadratic terms ("triad"), its quadratic-monomial
  augmentation and its bare truncation;
* the two-layer inhomogeneous Lorenz 96 lattice and a stochastically
  parameterized approximation whose small-scale equations are linear;
* a four-mode stochastic climate model and its linear-Gaussian-hidden
  approximation.

Models are addressable by registry name; parameter overrides come in as
flat key/value mappings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .models import CgnsModel, GeneralSdeModel, const_coeff

__all__ = [
    "TriadParams", "L96Params", "L96ApproxParams", "Climate4dParams", "Climate4dApproxParams",
    "triad_perfect", "triad_augmented", "triad_bare_truncation",
    "l96_perfect", "l96_approximate", "climate4d_perfect", "climate4d_approximate",
    "calibrate_linear_gaussian", "build_model", "default_dt", "MODEL_NAMES",
]

# Default integration steps mirroring the published setups.
DEFAULT_DT = {"triad": 5e-4, "l96": 2e-3, "climate4d": 5e-3}


def default_dt(name: str) -> float:
    return DEFAULT_DT[name.split("-")[0]]


# ---------------------------------------------------------------------------
# Triad system
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriadParams:
    """Coefficients of the three-mode quadratic system.

    beta_x must be positive (linear instability) while beta_y, beta_z are
    negative damping rates; alpha sets the nonlinearity strength.
    """

    beta_x: float = 0.1
    beta_y: float = -0.5
    beta_z: float = -1.0
    alpha: float = np.pi / np.sqrt(2.0)
    sigma_x: float = 1.0
    sigma_y: float = 1.0
    sigma_z: float = 2.0

    def __post_init__(self):
        if not (self.beta_x > 0 and self.beta_y < 0 and self.beta_z < 0):
            raise ValueError("require beta_x > 0, beta_y < 0, beta_z < 0")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if min(self.sigma_x, self.sigma_y, self.sigma_z) <= 0:
            raise ValueError("noise amplitudes must be positive")

    @classmethod
    def regime_i(cls) -> "TriadParams":
        return cls(sigma_x=1.0)

    @classmethod
    def regime_ii(cls) -> "TriadParams":
        return cls(sigma_x=0.1)


def triad_perfect(params: TriadParams) -> GeneralSdeModel:
    """Full three-dimensional system with energy-conserving quadratic terms."""
    p = params

    def drift(u, t):
        x, y, z = u[..., 0], u[..., 1], u[..., 2]
        dx = p.beta_x * x + p.alpha * x * y + p.alpha * y * z
        dy = p.beta_y * y - p.alpha * x ** 2 + 2.0 * p.alpha * x * z
        dz = p.beta_z * z - 3.0 * p.alpha * x * y
        return np.stack([dx, dy, dz], axis=-1)

    sig = np.diag([p.sigma_x, p.sigma_y, p.sigma_z])
    diffusion = const_coeff(sig)
    return GeneralSdeModel(dim=3, drift=drift, diffusion=lambda u, t: diffusion(u, t), noise_dim=3)


def triad_augmented(params: TriadParams, y_bar: float = 0.0, z_bar: float = 0.0) -> CgnsModel:
    """Conditionally Gaussian augmentation adjoining p=y^2, q=yz, r=z^2.

    The product yz in the observed equation becomes the state q, and the
    state-dependent noise rows of (p, q, r) use the training-window means
    y_bar, z_bar in place of y, z.
    """
    p = params
    a, by, bz = p.alpha, p.beta_y, p.beta_z

    def A0(x, t):
        return p.beta_x * x

    def A1(x, t):
        xs = x[..., 0]
        out = np.zeros(xs.shape + (1, 5))
        out[..., 0, 0] = a * xs
        out[..., 0, 3] = a
        return out

    def a0(x, t):
        xs = x[..., 0]
        out = np.zeros(xs.shape + (5,))
        out[..., 0] = -a * xs ** 2
        out[..., 2] = p.sigma_y ** 2
        out[..., 4] = p.sigma_z ** 2
        return out

    def a1(x, t):
        xs = x[..., 0]
        out = np.zeros(xs.shape + (5, 5))
        out[..., 0, 0] = by
        out[..., 0, 1] = 2.0 * a * xs
        out[..., 1, 0] = -3.0 * a * xs
        out[..., 1, 1] = bz
        out[..., 2, 0] = -2.0 * a * xs ** 2
        out[..., 2, 2] = 2.0 * by
        out[..., 2, 3] = 4.0 * a * xs
        out[..., 3, 1] = -a * xs ** 2
        out[..., 3, 2] = -3.0 * a * xs
        out[..., 3, 3] = by + bz
        out[..., 3, 4] = 2.0 * a * xs
        out[..., 4, 3] = -6.0 * a * xs
        out[..., 4, 4] = 2.0 * bz
        return out

    b2_mat = np.array([
        [p.sigma_y, 0.0],
        [0.0, p.sigma_z],
        [2.0 * p.sigma_y * y_bar, 0.0],
        [p.sigma_y * z_bar, p.sigma_z * y_bar],
        [0.0, 2.0 * p.sigma_z * z_bar],
    ])
    return CgnsModel(
        n1=1, n2=5, A0=A0, A1=A1, a0=a0, a1=a1,
        B1=const_coeff(np.array([[p.sigma_x]])), b2=const_coeff(b2_mat),
        labels=("x", "y", "z", "p", "q", "r"),
    )


def triad_bare_truncation(params: TriadParams) -> CgnsModel:
    """Conditionally Gaussian model obtained by deleting the yz product."""
    p = params
    a = p.alpha

    def A0(x, t):
        return p.beta_x * x

    def A1(x, t):
        xs = x[..., 0]
        out = np.zeros(xs.shape + (1, 2))
        out[..., 0, 0] = a * xs
        return out

    def a0(x, t):
        xs = x[..., 0]
        out = np.zeros(xs.shape + (2,))
        out[..., 0] = -a * xs ** 2
        return out

    def a1(x, t):
        xs = x[..., 0]
        out = np.zeros(xs.shape + (2, 2))
        out[..., 0, 0] = p.beta_y
        out[..., 0, 1] = 2.0 * a * xs
        out[..., 1, 0] = -3.0 * a * xs
        out[..., 1, 1] = p.beta_z
        return out

    return CgnsModel(
        n1=1, n2=2, A0=A0, A1=A1, a0=a0, a1=a1,
        B1=const_coeff(np.array([[p.sigma_x]])),
        b2=const_coeff(np.diag([p.sigma_y, p.sigma_z])),
        labels=("x", "y", "z"),
    )


# ---------------------------------------------------------------------------
# Two-layer Lorenz 96
# ---------------------------------------------------------------------------

def _l96_c_profile(n_sites: int) -> np.ndarray:
    i = np.arange(1, n_sites + 1)
    return 2.0 + 0.7 * np.cos(2.0 * np.pi * i / n_sites)


@dataclass(frozen=True)
class L96Params:
    """Two-layer lattice parameters; c varies across sites (inhomogeneous)."""

    I: int = 40
    J: int = 4
    h: float = 2.0
    b: float = 2.0
    f: float = 4.0
    c: np.ndarray = None
    sigma_u: float = 0.2
    sigma_v: float = 1.0

    def __post_init__(self):
        if self.I < 4:
            raise ValueError("need at least 4 large-scale sites for the advection stencil")
        if self.J < 1:
            raise ValueError("J must be at least 1")
        c = _l96_c_profile(self.I) if self.c is None else np.asarray(self.c, dtype=float)
        if c.shape != (self.I,):
            raise ValueError("c must have one entry per site")
        if np.any(c <= 0):
            raise ValueError("c entries must be positive")
        object.__setattr__(self, "c", c)

    @classmethod
    def desk(cls) -> "L96Params":
        return cls(I=8)

    @property
    def dim(self) -> int:
        return self.I + self.I * self.J


def _l96_u_advection(u):
    # u_{i-1}(u_{i-2} - u_{i+1}) with periodic sites, vectorized over batches
    um1 = np.roll(u, 1, axis=-1)
    um2 = np.roll(u, 2, axis=-1)
    up1 = np.roll(u, -1, axis=-1)
    return um1 * (um2 - up1)


def l96_perfect(params: L96Params) -> GeneralSdeModel:
    """Two-layer lattice; the small-scale index wraps into the next site."""
    p = params
    nI, nJ = p.I, p.J
    c_rep = np.repeat(p.c, nJ)
    hc_over_j = p.h * p.c / nJ
    sig = np.concatenate([np.full(nI, p.sigma_u), np.full(nI * nJ, p.sigma_v)])

    def drift(u, t):
        us = u[..., :nI]
        vf = u[..., nI:]
        v_by_site = vf.reshape(vf.shape[:-1] + (nI, nJ))
        du = -_l96_u_advection(us) - us + p.f - hc_over_j * v_by_site.sum(axis=-1)
        # the per-site small-scale rings concatenate into one big ring
        vp1 = np.roll(vf, -1, axis=-1)
        vp2 = np.roll(vf, -2, axis=-1)
        vm1 = np.roll(vf, 1, axis=-1)
        dv = -p.b * c_rep * vp1 * (vp2 - vm1) - c_rep * vf + np.repeat(
            p.h * p.c / nJ * 1.0, nJ) * np.repeat(us, nJ, axis=-1)
        return np.concatenate([du, dv], axis=-1)

    diffusion = const_coeff(np.diag(sig))
    return GeneralSdeModel(dim=p.dim, drift=drift, diffusion=diffusion, noise_dim=p.dim)


@dataclass(frozen=True)
class L96ApproxParams:
    """Hatted parameters of the stochastically parameterized lattice.

    The coupling amplitudes in the large- and small-scale equations are
    tied (a_hat doubles as c_hat) for dynamical consistency.
    """

    f_hat: np.ndarray     # (I,)
    a_hat: np.ndarray     # (I,)
    sigma_u_hat: np.ndarray  # (I,)
    d_hat: np.ndarray     # (I, J)
    v_hat: np.ndarray     # (I, J)
    sigma_v_hat: np.ndarray  # (I, J)

    def __post_init__(self):
        for name in ("f_hat", "a_hat", "sigma_u_hat", "d_hat", "v_hat", "sigma_v_hat"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        nI = self.f_hat.shape[0]
        if self.d_hat.ndim != 2 or self.d_hat.shape[0] != nI:
            raise ValueError("d_hat must be (I, J)")

    @property
    def I(self) -> int:
        return self.f_hat.shape[0]

    @property
    def J(self) -> int:
        return self.d_hat.shape[1]


def l96_approximate(params: L96ApproxParams) -> CgnsModel:
    """Lattice whose small-scale equations are linear given the large scale."""
    p = params
    nI, nJ = p.I, p.J
    a1_mat = np.diag(-p.d_hat.reshape(-1))
    b2_mat = np.diag(p.sigma_v_hat.reshape(-1))
    A1_mat = np.zeros((nI, nI * nJ))
    for s in range(nI):
        A1_mat[s, s * nJ:(s + 1) * nJ] = -p.a_hat[s]

    def A0(x, t):
        return -_l96_u_advection(x) - x + p.f_hat

    def a0(x, t):
        return p.v_hat.reshape(-1) + np.repeat(p.a_hat, nJ) * np.repeat(x, nJ, axis=-1)

    return CgnsModel(
        n1=nI, n2=nI * nJ, A0=A0, A1=const_coeff(A1_mat), a0=a0,
        a1=const_coeff(a1_mat), B1=const_coeff(np.diag(p.sigma_u_hat)),
        b2=const_coeff(b2_mat),
        labels=tuple([f"u{i+1}" for i in range(nI)]
                     + [f"v{i+1}_{j+1}" for i in range(nI) for j in range(nJ)]),
    )


# ---------------------------------------------------------------------------
# Four-mode stochastic climate model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Climate4dParams:
    """Coefficients of the four-mode climate model.

    The quadratic coupling coefficients must satisfy
    b123 + b213 + b312 = 0 (energy conservation).
    """

    d1: float = 1.0
    d2: float = 0.4
    gamma1: float = 0.5
    gamma2: float = 0.5
    L12: float = 1.0
    L13: float = 0.5
    L24: float = 0.5
    a1: float = 2.0
    a2: float = 1.0
    b123: float = 1.5
    b213: float = 1.5
    b312: float = -3.0
    sigma1: float = 0.5
    sigma2: float = 2.0
    sigma3: float = 0.5
    sigma4: float = 1.0
    F1: float = 0.0
    F2: float = 0.0
    F3: float = 0.0
    F4: float = 0.0

    def __post_init__(self):
        if abs(self.b123 + self.b213 + self.b312) > 1e-12:
            raise ValueError("b123 + b213 + b312 must vanish (energy conservation)")


def _climate4d_observed_block(p):
    """Shared observed-block coefficients (identical in both model versions)."""

    def A0(x, t):
        x1, x2 = x[..., 0], x[..., 1]
        rot = p.L12 + p.a1 * x1 + p.a2 * x2
        d1 = -x2 * rot - p.d1 * x1 + p.F1
        d2 = x1 * rot - p.d2 * x2 + p.F2
        return np.stack([d1, d2], axis=-1)

    def A1(x, t):
        x1, x2 = x[..., 0], x[..., 1]
        out = np.zeros(x1.shape + (2, 2))
        out[..., 0, 0] = p.L13 + p.b123 * x2
        out[..., 1, 0] = p.b213 * x1
        out[..., 1, 1] = p.L24
        return out

    B1 = const_coeff(np.diag([p.sigma1, p.sigma2]))
    return A0, A1, B1


def climate4d_perfect(params: Climate4dParams) -> CgnsModel:
    """Four-mode model; already conditionally Gaussian in (x1, x2 | y1, y2)."""
    p = params
    A0, A1, B1 = _climate4d_observed_block(p)

    def a0(x, t):
        x1, x2 = x[..., 0], x[..., 1]
        g1 = -p.L13 * x1 + p.b312 * x1 * x2 + p.F3
        g2 = -p.L24 * x2 + p.F4
        return np.stack([g1, g2], axis=-1)

    return CgnsModel(
        n1=2, n2=2, A0=A0, A1=A1, a0=a0,
        a1=const_coeff(np.diag([-params.gamma1, -params.gamma2])),
        B1=B1, b2=const_coeff(np.diag([params.sigma3, params.sigma4])),
        labels=("x1", "x2", "y1", "y2"),
    )


@dataclass(frozen=True)
class Climate4dApproxParams:
    """Linear-Gaussian replacement of the hidden block; observed block reused."""

    base: Climate4dParams
    gamma3_hat: float = 0.5
    gamma4_hat: float = 0.5
    y1_hat: float = 0.0
    y2_hat: float = 0.0
    sigma3_hat: float = 0.5
    sigma4_hat: float = 1.0

    def __post_init__(self):
        if self.gamma3_hat <= 0 or self.gamma4_hat <= 0:
            raise ValueError("hatted damping rates must be positive")


def climate4d_approximate(params: Climate4dApproxParams) -> CgnsModel:
    p = params
    A0, A1, B1 = _climate4d_observed_block(p.base)
    a0_vec = np.array([p.gamma3_hat * p.y1_hat, p.gamma4_hat * p.y2_hat])
    return CgnsModel(
        n1=2, n2=2, A0=A0, A1=A1, a0=const_coeff(a0_vec),
        a1=const_coeff(np.diag([-p.gamma3_hat, -p.gamma4_hat])),
        B1=B1, b2=const_coeff(np.diag([p.sigma3_hat, p.sigma4_hat])),
        labels=("x1", "x2", "y1", "y2"),
    )


# ---------------------------------------------------------------------------
# Calibration of linear-Gaussian surrogates from equilibrium statistics
# ---------------------------------------------------------------------------

def calibrate_linear_gaussian(mean: float, variance: float, decorr_time: float,
                              coupling: float = 0.0):
    """Match an Ornstein-Uhlenbeck surrogate to (mean, variance, decorrelation time).

    For the surrogate d v = (-d_hat v + v_hat + coupling) dt + sigma_hat dW:
    d_hat = 1/tau, sigma_hat = sqrt(2 r d_hat), and v_hat solves
    mean = (v_hat + coupling) / d_hat.
    """
    if decorr_time <= 0:
        raise ValueError("decorrelation time must be positive")
    if variance <= 0:
        raise ValueError("variance must be positive")
    d_hat = 1.0 / decorr_time
    sigma_hat = np.sqrt(2.0 * variance * d_hat)
    v_hat = mean * d_hat - coupling
    return d_hat, sigma_hat, v_hat


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def _with_overrides(cls, overrides: dict, extra_keys=()):
    """Instantiate a params dataclass from defaults plus flat overrides."""
    overrides = dict(overrides or {})
    extra = {k: overrides.pop(k) for k in list(overrides) if k in extra_keys}
    names = {f.name for f in fields(cls)}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown parameter keys: {sorted(unknown)}")
    return cls(**overrides), extra


def _build_triad(overrides):
    params, _ = _with_overrides(TriadParams, overrides)
    return triad_perfect(params)


def _build_triad_aug(overrides):
    params, extra = _with_overrides(TriadParams, overrides, extra_keys=("y_bar", "z_bar"))
    return triad_augmented(params, y_bar=extra.get("y_bar", 0.0), z_bar=extra.get("z_bar", 0.0))


def _build_triad_bt(overrides):
    params, _ = _with_overrides(TriadParams, overrides)
    return triad_bare_truncation(params)


def _build_l96(overrides):
    params, _ = _with_overrides(L96Params, overrides)
    return l96_perfect(params)


def _build_l96_approx(overrides):
    overrides = dict(overrides or {})
    base_keys = {f.name for f in fields(L96Params)}
    base = {k: overrides.pop(k) for k in list(overrides) if k in base_keys}
    params, _ = _with_overrides(L96Params, base)
    hatted = default_l96_approx_params(params)
    hat_names = {f.name for f in fields(L96ApproxParams)}
    unknown = set(overrides) - hat_names
    if unknown:
        raise ValueError(f"unknown parameter keys: {sorted(unknown)}")
    if overrides:
        hatted = replace(hatted, **{k: np.asarray(v, dtype=float) for k, v in overrides.items()})
    return l96_approximate(hatted)


def default_l96_approx_params(params: L96Params, d0: float = None, v0: float = None,
                              sig0: float = None) -> L96ApproxParams:
    """Neutral hatted parameters seeded from the full-model constants.

    Small-scale damping defaults to the site rate c_i; use the calibration
    helpers (or parameter estimation) for data-driven values.
    """
    nI, nJ = params.I, params.J
    d = np.tile((params.c if d0 is None else np.full(nI, d0))[:, None], (1, nJ))
    return L96ApproxParams(
        f_hat=np.full(nI, params.f),
        a_hat=params.h * params.c / nJ,
        sigma_u_hat=np.full(nI, params.sigma_u),
        d_hat=d,
        v_hat=np.full((nI, nJ), 0.0 if v0 is None else v0),
        sigma_v_hat=np.full((nI, nJ), params.sigma_v if sig0 is None else sig0),
    )


def _build_climate4d(overrides):
    params, _ = _with_overrides(Climate4dParams, overrides)
    return climate4d_perfect(params)


def _build_climate4d_approx(overrides):
    overrides = dict(overrides or {})
    base_keys = {f.name for f in fields(Climate4dParams)}
    base = {k: overrides.pop(k) for k in list(overrides) if k in base_keys}
    params, _ = _with_overrides(Climate4dParams, base)
    hat_names = {f.name for f in fields(Climate4dApproxParams)} - {"base"}
    unknown = set(overrides) - hat_names
    if unknown:
        raise ValueError(f"unknown parameter keys: {sorted(unknown)}")
    return climate4d_approximate(Climate4dApproxParams(base=params, **overrides))


_REGISTRY = {
    "triad": _build_triad,
    "triad-aug": _build_triad_aug,
    "triad-bt": _build_triad_bt,
    "l96": _build_l96,
    "l96-approx": _build_l96_approx,
    "climate4d": _build_climate4d,
    "climate4d-approx": _build_climate4d_approx,
}

MODEL_NAMES = tuple(sorted(_REGISTRY))


def build_model(name: str, overrides: dict | None = None):
    """Construct a registered model with flat parameter overrides."""
    if name not in _REGISTRY:
        raise KeyError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    return _REGISTRY[name](overrides or {})
