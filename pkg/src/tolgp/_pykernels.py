"""Pure-numpy counterparts of the compiled kernels in ``_ckernels.pyx``."""
from __future__ import annotations

import math

import numpy as np
import scipy.linalg as sla

LOG_2PI = math.log(2.0 * math.pi)


class _GpTarget:
    def __init__(self, X, ell, scales, alpha, chol, mu0, ymeas, sigl, lower, upper, marginal, log_vol):
        self.X = np.asarray(X, dtype=float)
        self.ell2 = float(ell) ** 2
        self.scales = np.asarray(scales, dtype=float)
        self.alpha = np.asarray(alpha, dtype=float).reshape(len(self.scales), -1)
        self.chol = np.asarray(chol, dtype=float)
        self.mu0 = np.asarray(mu0, dtype=float)
        self.ymeas = np.asarray(ymeas, dtype=float)
        self.sigl = np.asarray(sigl, dtype=float)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.marginal = bool(marginal)
        self.log_vol = float(log_vol)

    def batch(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        out = np.full(P.shape[0], -np.inf)
        inside = np.all((P >= self.lower) & (P <= self.upper), axis=1)
        Q = P[inside]
        if Q.shape[0] == 0:
            return out
        d2 = np.sum((Q[:, None, :] - self.X[None, :, :]) ** 2, axis=-1)
        R = np.exp(-0.5 * d2 / self.ell2)
        total = np.zeros(Q.shape[0])
        for k in range(len(self.scales)):
            mean = self.mu0[k] + self.scales[k] * (R @ self.alpha[k])
            var = np.zeros(Q.shape[0])
            if self.marginal and self.X.shape[0]:
                V = sla.solve_triangular(self.chol[k], self.scales[k] * R.T, lower=True, check_finite=False)
                var = np.maximum(self.scales[k] - np.sum(V * V, axis=0), 0.0)
            elif self.marginal:
                var = np.full(Q.shape[0], self.scales[k])
            cov = self.sigl[k] + var
            res = mean - self.ymeas[k]
            total += LOG_2PI + np.log(cov) + res * res / cov
        out[inside] = -0.5 * total - self.log_vol
        return out

    def __call__(self, p):
        return float(self.batch(np.reshape(p, (1, -1)))[0])


def make_gp_target(*args):
    return _GpTarget(*args)


def rwm(logdensity, x0, lp0, scale, z, logu, n_adapt, batch, target_rate, gain, lower, upper):
    """Random-walk Metropolis with batchwise scale adaptation for any callable target."""
    z = np.asarray(z, dtype=float)
    n, d = z.shape
    out = np.empty((n, d))
    sc = np.array(scale, dtype=float).reshape(-1)
    x = np.array(x0, dtype=float).reshape(-1)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    lpx = float(lp0)
    n_acc = b_acc = 0
    for i in range(n):
        y = x + sc * z[i]
        if np.any(y < lower) or np.any(y > upper):
            lpy = -math.inf
        else:
            lpy = float(logdensity(y))
            if math.isnan(lpy):
                raise FloatingPointError(f"log-density returned NaN at step {i}")
        if logu[i] < lpy - lpx:
            x = y
            lpx = lpy
            n_acc += 1
            b_acc += 1
        out[i] = x
        if i < n_adapt and (i + 1) % batch == 0:
            # Robbins-Monro step: the gain decays with the batch count
            k = (i + 1) // batch
            sc = sc * math.exp(gain / math.sqrt(k) * (b_acc / batch - target_rate))
            b_acc = 0
    return out, n_acc, sc


def rwm_gp(target, x0, lp0, scale, z, logu, n_adapt, batch, target_rate, gain):
    return rwm(target, x0, lp0, scale, z, logu, n_adapt, batch, target_rate, gain, target.lower, target.upper)
