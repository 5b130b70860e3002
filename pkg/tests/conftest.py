import numpy as np

from condgauss import CgnsModel, as_general, const_coeff, simulate


def scalar_linear_model():
    """Scalar test model: dX = Y dt + dW1, dY = -Y dt + dW2.

    Its stationary filter variance solves -2R + 1 - R^2 = 0, i.e.
    R* = sqrt(2) - 1.
    """
    return CgnsModel(
        n1=1, n2=1,
        A0=const_coeff(np.zeros(1)),
        A1=const_coeff(np.ones((1, 1))),
        a0=const_coeff(np.zeros(1)),
        a1=const_coeff(-np.ones((1, 1))),
        B1=const_coeff(np.ones((1, 1))),
        b2=const_coeff(np.ones((1, 1))),
    )


def linear_2d_model():
    """Constant-coefficient model with a 2-dim hidden block."""
    return CgnsModel(
        n1=1, n2=2,
        A0=const_coeff(np.array([0.2])),
        A1=const_coeff(np.array([[1.0, 0.5]])),
        a0=const_coeff(np.array([0.1, -0.1])),
        a1=const_coeff(np.array([[-1.0, 0.4], [-0.3, -1.5]])),
        B1=const_coeff(np.array([[0.8]])),
        b2=const_coeff(np.diag([0.7, 1.1])),
    )


def observed_series(model, steps, dt, seed, u0=None):
    gen_model = as_general(model)
    u0 = np.zeros(gen_model.dim) if u0 is None else u0
    full = simulate(gen_model, u0, dt, steps, seed=seed)
    return full.select(range(model.n1)), full


def discrete_kalman_rts(model, x_values, dt, mu0, r0):
    """Independent oracle: discrete-time Kalman filter + RTS smoother.

    Treats the Euler-discretized system exactly: hidden transition
    F = I + dt a1, c = dt a0, Q = dt b2b2^T; observation increment
    dX = dt (A0 + A1 Y) + noise with covariance dt B1B1^T.
    Constant coefficients only.
    """
    n2 = model.n2
    z = np.zeros(1)
    A0 = np.atleast_1d(model.A0(np.zeros(model.n1), 0.0))
    A1 = np.atleast_2d(model.A1(np.zeros(model.n1), 0.0))
    a0 = np.atleast_1d(model.a0(np.zeros(model.n1), 0.0))
    a1 = np.atleast_2d(model.a1(np.zeros(model.n1), 0.0))
    B1 = np.atleast_2d(model.B1(np.zeros(model.n1), 0.0))
    b2 = np.atleast_2d(model.b2(np.zeros(model.n1), 0.0))
    F = np.eye(n2) + dt * a1
    c = dt * a0
    Q = dt * (b2 @ b2.T)
    H = dt * A1
    d = dt * A0
    Robs = dt * (B1 @ B1.T)
    n_steps = len(x_values) - 1
    # pred[j] conditions on increments strictly before j (matches the
    # forward sweep's value at index j); upd[j] additionally uses the
    # increment x_{j+1} - x_j, a linear readout of Y^j
    m_pred = np.empty((n_steps + 1, n2))
    P_pred = np.empty((n_steps + 1, n2, n2))
    m_upd = np.empty((n_steps, n2))
    P_upd = np.empty((n_steps, n2, n2))
    m_pred[0], P_pred[0] = mu0, r0
    for j in range(n_steps):
        yobs = x_values[j + 1] - x_values[j]
        S = H @ P_pred[j] @ H.T + Robs
        K = P_pred[j] @ H.T @ np.linalg.inv(S)
        m_upd[j] = m_pred[j] + K @ (yobs - d - H @ m_pred[j])
        P_upd[j] = (np.eye(n2) - K @ H) @ P_pred[j]
        m_pred[j + 1] = F @ m_upd[j] + c
        P_pred[j + 1] = F @ P_upd[j] @ F.T + Q
    ms = m_pred.copy()
    Ps = P_pred.copy()
    for j in range(n_steps - 1, -1, -1):
        J = P_upd[j] @ F.T @ np.linalg.inv(P_pred[j + 1])
        ms[j] = m_upd[j] + J @ (ms[j + 1] - m_pred[j + 1])
        Ps[j] = P_upd[j] + J @ (Ps[j + 1] - P_pred[j + 1]) @ J.T
    return m_pred, P_pred, ms, Ps
