# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: GP surrogate log-posterior and the random-walk Metropolis loop.

Mirrors ``tolgp._pykernels`` step for step; both consume the same pre-drawn
normal increments and log-uniforms.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY, isnan

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


cdef class _GpTarget:
    cdef const double[:, ::1] X
    cdef double ell2
    cdef const double[::1] scales
    cdef const double[:, ::1] alpha
    cdef const double[:, :, ::1] chol
    cdef const double[::1] mu0
    cdef const double[::1] ymeas
    cdef const double[::1] sigl
    cdef const double[::1] lower
    cdef const double[::1] upper
    cdef int marginal
    cdef double log_vol
    cdef double[::1] r
    cdef double[::1] v
    cdef Py_ssize_t s, m, d

    def __init__(self, X, double ell, scales, alpha, chol, mu0, ymeas, sigl, lower, upper, int marginal, double log_vol):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.ell2 = ell * ell
        self.scales = np.ascontiguousarray(scales, dtype=np.float64)
        self.alpha = np.ascontiguousarray(alpha, dtype=np.float64).reshape(len(self.scales), -1)
        self.chol = np.ascontiguousarray(chol, dtype=np.float64)
        self.mu0 = np.ascontiguousarray(mu0, dtype=np.float64)
        self.ymeas = np.ascontiguousarray(ymeas, dtype=np.float64)
        self.sigl = np.ascontiguousarray(sigl, dtype=np.float64)
        self.lower = np.ascontiguousarray(lower, dtype=np.float64)
        self.upper = np.ascontiguousarray(upper, dtype=np.float64)
        self.marginal = marginal
        self.log_vol = log_vol
        self.s = self.X.shape[0]
        self.d = self.lower.shape[0]
        self.m = self.scales.shape[0]
        self.r = np.zeros(max(self.s, 1))
        self.v = np.zeros(max(self.s, 1))

    cdef double logpost(self, double* y) nogil:
        cdef Py_ssize_t i, j, k
        cdef double d2, t, mean, var, cov, res, acc
        cdef double total = 0.0
        for j in range(self.d):
            if y[j] < self.lower[j] or y[j] > self.upper[j]:
                return -INFINITY
        for i in range(self.s):
            d2 = 0.0
            for j in range(self.d):
                t = y[j] - self.X[i, j]
                d2 += t * t
            self.r[i] = exp(-0.5 * d2 / self.ell2)
        for k in range(self.m):
            mean = 0.0
            for i in range(self.s):
                mean += self.r[i] * self.alpha[k, i]
            mean = self.mu0[k] + self.scales[k] * mean
            var = 0.0
            if self.marginal:
                # forward substitution L v = scale * r
                for i in range(self.s):
                    acc = self.scales[k] * self.r[i]
                    for j in range(i):
                        acc -= self.chol[k, i, j] * self.v[j]
                    self.v[i] = acc / self.chol[k, i, i]
                    var += self.v[i] * self.v[i]
                var = self.scales[k] - var
                if var < 0.0:
                    var = 0.0
            cov = self.sigl[k] + var
            res = mean - self.ymeas[k]
            total += LOG_2PI + log(cov) + res * res / cov
        return -0.5 * total - self.log_vol

    def __call__(self, p):
        cdef double[::1] y = np.ascontiguousarray(p, dtype=np.float64).reshape(-1)
        return self.logpost(&y[0])

    def batch(self, P):
        cdef double[:, ::1] Q = np.ascontiguousarray(P, dtype=np.float64)
        out = np.empty(Q.shape[0])
        cdef double[::1] o = out
        cdef Py_ssize_t i
        for i in range(Q.shape[0]):
            o[i] = self.logpost(&Q[i, 0])
        return out


def make_gp_target(X, double ell, scales, alpha, chol, mu0, ymeas, sigl, lower, upper, int marginal, double log_vol):
    return _GpTarget(X, ell, scales, alpha, chol, mu0, ymeas, sigl, lower, upper, marginal, log_vol)


def rwm_gp(_GpTarget target, x0, double lp0, scale, z, logu,
           Py_ssize_t n_adapt, Py_ssize_t batch, double target_rate, double gain):
    """Random-walk Metropolis on a compiled GP target.

    Returns ``(samples, n_accepted, final_scale)``.
    """
    cdef double[:, ::1] Z = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[::1] LU = np.ascontiguousarray(logu, dtype=np.float64)
    cdef Py_ssize_t n = Z.shape[0]
    cdef Py_ssize_t d = Z.shape[1]
    out = np.empty((n, d))
    cdef double[:, ::1] o = out
    sc_arr = np.array(scale, dtype=np.float64).reshape(-1)
    cdef double[::1] sc = sc_arr
    x_arr = np.array(x0, dtype=np.float64).reshape(-1)
    cdef double[::1] x = x_arr
    y_arr = np.empty(d)
    cdef double[::1] y = y_arr
    cdef double lpx = lp0, lpy, factor
    cdef Py_ssize_t i, j, n_acc = 0, b_acc = 0
    for i in range(n):
        for j in range(d):
            y[j] = x[j] + sc[j] * Z[i, j]
        lpy = target.logpost(&y[0])
        if isnan(lpy):
            raise FloatingPointError(f"log-density returned NaN at step {i}")
        if LU[i] < lpy - lpx:
            for j in range(d):
                x[j] = y[j]
            lpx = lpy
            n_acc += 1
            b_acc += 1
        for j in range(d):
            o[i, j] = x[j]
        if i < n_adapt and (i + 1) % batch == 0:
            factor = exp(gain / sqrt(<double>((i + 1) // batch)) * (<double>b_acc / <double>batch - target_rate))
            for j in range(d):
                sc[j] *= factor
            b_acc = 0
    return out, n_acc, sc_arr
