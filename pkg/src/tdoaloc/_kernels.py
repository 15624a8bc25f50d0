"""Compiled hot-path kernels for the error-state filter.

These are the per-sample predict and IRLS update steps, written as scalar
numba kernels so a single filter step stays in the microsecond range. The
public API in :mod:`tdoaloc.estimator` wraps them; conventions (skew sign,
right-multiplied attitude error) match :mod:`tdoaloc.geometry`.

Status codes returned by the kernels: 0 ok, 1 covariance not positive
definite, 2 singular measurement geometry, 3 non-finite input.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_NOT_PD = 1
STATUS_SINGULAR = 2
STATUS_NOT_FINITE = 3

GRAVITY_Z = -9.81

# Robust cost ids shared with estimator.RobustCost
COST_QUADRATIC = 0
COST_GM = 1
COST_HUBER = 2
COST_CAUCHY = 3


@njit(cache=True)
def _rot_exp(u):
    """Exponential of the package skew convention: exp(skew(u))."""
    theta2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2]
    theta = math.sqrt(theta2)
    M = np.empty((3, 3))
    M[0, 0] = 0.0
    M[0, 1] = u[2]
    M[0, 2] = -u[1]
    M[1, 0] = -u[2]
    M[1, 1] = 0.0
    M[1, 2] = u[0]
    M[2, 0] = u[1]
    M[2, 1] = -u[0]
    M[2, 2] = 0.0
    if theta < 1e-10:
        s = 1.0
        c = 0.5
    else:
        s = math.sin(theta) / theta
        c = (1.0 - math.cos(theta)) / theta2
    E = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            m2 = M[i, 0] * M[0, j] + M[i, 1] * M[1, j] + M[i, 2] * M[2, j]
            E[i, j] = s * M[i, j] + c * m2
        E[i, i] += 1.0
    return E


@njit(cache=True)
def _rot_integrals(u):
    """Rotation exponential plus its first and second time integrals.

    For u = omega*dt returns (E, J1, J2) with E = exp(skew(u)),
    J1 = (1/dt) * int_0^dt exp(skew(omega s)) ds and
    J2 = (1/dt^2) * int_0^dt int_0^s exp(skew(omega r)) dr ds,
    so body-frame constant acceleration integrates exactly.
    """
    theta2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2]
    theta = math.sqrt(theta2)
    M = np.empty((3, 3))
    M[0, 0] = 0.0
    M[0, 1] = u[2]
    M[0, 2] = -u[1]
    M[1, 0] = -u[2]
    M[1, 1] = 0.0
    M[1, 2] = u[0]
    M[2, 0] = u[1]
    M[2, 1] = -u[0]
    M[2, 2] = 0.0
    if theta < 1e-4:
        # Series: stable for small angles, error below 1e-16 at the cutoff.
        a_e = 1.0 - theta2 / 6.0
        b_e = 0.5 - theta2 / 24.0
        a_1 = 0.5 - theta2 / 24.0
        b_1 = 1.0 / 6.0 - theta2 / 120.0
        a_2 = 1.0 / 6.0 - theta2 / 120.0
        b_2 = 1.0 / 24.0 - theta2 / 720.0
    else:
        st = math.sin(theta)
        ct = math.cos(theta)
        a_e = st / theta
        b_e = (1.0 - ct) / theta2
        a_1 = (1.0 - ct) / theta2
        b_1 = (theta - st) / (theta2 * theta)
        a_2 = (theta - st) / (theta2 * theta)
        b_2 = (ct - 1.0 + 0.5 * theta2) / (theta2 * theta2)
    E = np.empty((3, 3))
    J1 = np.empty((3, 3))
    J2 = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            m2 = M[i, 0] * M[0, j] + M[i, 1] * M[1, j] + M[i, 2] * M[2, j]
            E[i, j] = a_e * M[i, j] + b_e * m2
            J1[i, j] = a_1 * M[i, j] + b_1 * m2
            J2[i, j] = 0.5 * (1.0 if i == j else 0.0) + a_2 * M[i, j] + b_2 * m2
        E[i, i] += 1.0
        J1[i, i] += 1.0
    return E, J1, J2


@njit(cache=True)
def predict_kernel(p, v, C, P, accel, gyro, dt, qa, qg, qmat, use_qmat):
    """One strapdown step plus covariance propagation.

    qa/qg are squared white-noise densities (variance per unit time); the
    per-step process noise is built from them unless ``use_qmat`` selects
    the explicit 9x9 ``qmat``.
    """
    s = 0.0
    for i in range(3):
        s += accel[i] + gyro[i]
    if not math.isfinite(s):
        return p, v, C, P, STATUS_NOT_FINITE

    u = np.empty(3)
    for i in range(3):
        u[i] = gyro[i] * dt
    E, J1, J2 = _rot_integrals(u)

    # World-frame specific force through the exact constant-input integrals.
    a1 = np.empty(3)  # J1 @ accel
    a2 = np.empty(3)  # J2 @ accel
    for i in range(3):
        a1[i] = J1[i, 0] * accel[0] + J1[i, 1] * accel[1] + J1[i, 2] * accel[2]
        a2[i] = J2[i, 0] * accel[0] + J2[i, 1] * accel[1] + J2[i, 2] * accel[2]
    p2 = np.empty(3)
    v2 = np.empty(3)
    for i in range(3):
        ca1 = C[i, 0] * a1[0] + C[i, 1] * a1[1] + C[i, 2] * a1[2]
        ca2 = C[i, 0] * a2[0] + C[i, 1] * a2[1] + C[i, 2] * a2[2]
        g = GRAVITY_Z if i == 2 else 0.0
        p2[i] = p[i] + v[i] * dt + ca2 * dt * dt + 0.5 * g * dt * dt
        v2[i] = v[i] + ca1 * dt + g * dt
    C2 = C @ E

    # Error-state transition: right-multiplied attitude error.
    # d(dv)/d(dtheta) = dt * C * skew_std(accel), skew_std(a)x = a cross x.
    A = np.empty((3, 3))
    A[0, 0] = 0.0
    A[0, 1] = -accel[2]
    A[0, 2] = accel[1]
    A[1, 0] = accel[2]
    A[1, 1] = 0.0
    A[1, 2] = -accel[0]
    A[2, 0] = -accel[1]
    A[2, 1] = accel[0]
    A[2, 2] = 0.0
    CA = C @ A
    F = np.zeros((9, 9))
    for i in range(3):
        F[i, i] = 1.0
        F[i + 3, i + 3] = 1.0
        F[i, i + 3] = dt
        for j in range(3):
            F[i, j + 6] = 0.5 * dt * dt * CA[i, j]
            F[i + 3, j + 6] = dt * CA[i, j]
            F[i + 6, j + 6] = E[j, i]  # E transpose
    FP = F @ P
    P2 = FP @ F.T
    if use_qmat:
        for i in range(9):
            for j in range(9):
                P2[i, j] += qmat[i, j]
    else:
        qpp = 0.25 * qa * dt * dt * dt
        qpv = 0.5 * qa * dt * dt
        qvv = qa * dt
        qtt = qg * dt
        for i in range(3):
            P2[i, i] += qpp
            P2[i, i + 3] += qpv
            P2[i + 3, i] += qpv
            P2[i + 3, i + 3] += qvv
            P2[i + 6, i + 6] += qtt
    for i in range(9):
        for j in range(i):
            m = 0.5 * (P2[i, j] + P2[j, i])
            P2[i, j] = m
            P2[j, i] = m
    return p2, v2, C2, P2, STATUS_OK


@njit(cache=True)
def robust_weight_kernel(kind, param, e):
    if kind == COST_GM:
        t = 1.0 + e * e
        return 1.0 / (t * t)
    if kind == COST_HUBER:
        ae = abs(e)
        return 1.0 if ae <= param else param / ae
    if kind == COST_CAUCHY:
        t = e / param
        return 1.0 / (1.0 + t * t)
    return 1.0


@njit(cache=True)
def _chol9(A, L):
    """Lower Cholesky of a 9x9 matrix; returns False if not PD."""
    for i in range(9):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0 or not math.isfinite(s):
                    return False
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return True


@njit(cache=True)
def irls_update_kernel(p, v, C, P, d, a_i, a_j, sigma, kind, param, iters):
    """Iteratively reweighted scalar-TDOA measurement update.

    The measurement Jacobian and the gain's linearization point stay at the
    prior; the IRLS passes only re-evaluate the robust weights at the
    intermediate re-estimates. The final state/covariance use the gain and
    rescaled covariance from the last pass.
    """
    # Measurement geometry at the prior.
    di = np.empty(3)
    dj = np.empty(3)
    for i in range(3):
        di[i] = p[i] - a_i[i]
        dj[i] = p[i] - a_j[i]
    ri = math.sqrt(di[0] ** 2 + di[1] ** 2 + di[2] ** 2)
    rj = math.sqrt(dj[0] ** 2 + dj[1] ** 2 + dj[2] ** 2)
    if ri == 0.0 or rj == 0.0:
        return p, v, C, P, STATUS_SINGULAR
    G = np.zeros(9)
    for i in range(3):
        G[i] = di[i] / ri - dj[i] / rj
    g0 = ri - rj
    y0 = d - g0
    if not math.isfinite(y0):
        return p, v, C, P, STATUS_NOT_FINITE

    S = np.zeros((9, 9))
    if not _chol9(P, S):
        return p, v, C, P, STATUS_NOT_PD

    delta = np.zeros(9)
    ex = np.empty(9)
    winv = np.empty(9)
    Pt = np.empty((9, 9))
    K = np.zeros(9)
    sigma2 = sigma * sigma
    for _ in range(iters):
        # e_x = S^-1 (xhat_l - xcheck) by forward substitution.
        for i in range(9):
            s = delta[i]
            for k in range(i):
                s -= S[i, k] * ex[k]
            ex[i] = s / S[i, i]
        for i in range(9):
            winv[i] = 1.0 / robust_weight_kernel(kind, param, ex[i])
        # Residual at the intermediate estimate (position-only measurement).
        gx = math.sqrt((p[0] + delta[0] - a_i[0]) ** 2
                       + (p[1] + delta[1] - a_i[1]) ** 2
                       + (p[2] + delta[2] - a_i[2]) ** 2) \
            - math.sqrt((p[0] + delta[0] - a_j[0]) ** 2
                        + (p[1] + delta[1] - a_j[1]) ** 2
                        + (p[2] + delta[2] - a_j[2]) ** 2)
        ed = (d - gx) / sigma
        wd = robust_weight_kernel(kind, param, ed)
        # Rescaled prior covariance S W^-1 S^T and measurement variance.
        for i in range(9):
            for j in range(i + 1):
                s = 0.0
                for k in range(min(i, j) + 1):
                    s += S[i, k] * winv[k] * S[j, k]
                Pt[i, j] = s
                Pt[j, i] = s
        st2 = sigma2 / wd
        # Weighted Kalman gain for the scalar measurement.
        denom = st2
        for i in range(9):
            PG = 0.0
            for j in range(3):
                PG += Pt[i, j] * G[j]
            K[i] = PG
        for i in range(3):
            denom += G[i] * K[i]
        inno = (d - gx)
        gd = 0.0
        for i in range(9):
            K[i] /= denom
        for i in range(3):
            gd += G[i] * delta[i]
        for i in range(9):
            delta[i] = K[i] * (inno + gd)

    p2 = np.empty(3)
    v2 = np.empty(3)
    dth = np.empty(3)
    for i in range(3):
        p2[i] = p[i] + K[i] * y0
        v2[i] = v[i] + K[i + 3] * y0
        dth[i] = K[i + 6] * y0
    C2 = C @ _rot_exp(dth)
    # P = (I - K G) Pt, then symmetrize.
    P2 = np.empty((9, 9))
    for i in range(9):
        for j in range(9):
            kg = 0.0
            for m in range(3):
                kg += K[i] * G[m] * Pt[m, j]
            P2[i, j] = Pt[i, j] - kg
    for i in range(9):
        for j in range(i):
            m2 = 0.5 * (P2[i, j] + P2[j, i])
            P2[i, j] = m2
            P2[j, i] = m2
    return p2, v2, C2, P2, STATUS_OK
