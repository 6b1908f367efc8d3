# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM layer recurrence; same contract as ``_lstm_py``.

The recurrent matrix product goes through numpy (its BLAS is the fastest
one available in-process); the gate nonlinearities and state updates are
fused into single passes over contiguous memory.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, copysign

cnp.import_array()


# Both nonlinearities go through exp: the vectorised libm exp is an order of
# magnitude faster than libm tanh. Arguments are kept non-positive so exp
# never overflows.

cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e = exp(-fabs(x))
    return (x >= 0) * (1.0 / (1.0 + e)) + (x < 0) * (e / (1.0 + e))


cdef inline double _tanh(double x) noexcept nogil:
    cdef double e = exp(-2.0 * fabs(x))
    return copysign((1.0 - e) / (1.0 + e), x)


cdef void _activate(double* z, int B, int H) noexcept nogil:
    cdef int b, j
    cdef double* row
    for b in range(B):
        row = z + b * 4 * H
        for j in range(3 * H):
            row[j] = _sigmoid(row[j])
        for j in range(3 * H, 4 * H):
            row[j] = _tanh(row[j])


cdef void _state(double* z, double* cprev, double* ct, double* ht,
                 int B, int H, bint first) noexcept nogil:
    cdef int b, j
    cdef double* row
    cdef double cv
    for b in range(B):
        row = z + b * 4 * H
        for j in range(H):
            if first:
                cv = row[H + j] * row[3 * H + j]
            else:
                cv = row[j] * cprev[b * H + j] + row[H + j] * row[3 * H + j]
            ct[b * H + j] = cv
            ht[b * H + j] = row[2 * H + j] * _tanh(cv)


def layer_forward(cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] gx,
                  cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] wh_t):
    cdef int T = gx.shape[0], B = gx.shape[1], G = gx.shape[2]
    cdef int H = G // 4
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] gates = gx.copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] c = np.empty((T, B, H))
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] h = np.empty((T, B, H))
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] rec = np.empty((B, G))
    cdef double* gp = &gates[0, 0, 0]
    cdef double* cp = &c[0, 0, 0]
    cdef double* hp = &h[0, 0, 0]
    cdef double* rp = &rec[0, 0]
    cdef double* z
    cdef int t, k
    for t in range(T):
        z = gp + t * B * G
        if t > 0:
            np.matmul(h[t - 1], wh_t, out=rec)
            with nogil:
                for k in range(B * G):
                    z[k] += rp[k]
        with nogil:
            _activate(z, B, H)
            _state(z, cp + (t - 1) * B * H, cp + t * B * H, hp + t * B * H,
                   B, H, t == 0)
    return gates, c, h


cdef void _gate_grads(double* z, double* ct, double* cprev, double* dh,
                      double* dhn, double* dcn, double* dz,
                      int B, int H, bint first) noexcept nogil:
    cdef int b, j, k
    cdef double f, i, o, g, tc, cp, dht, dc
    cdef double* row
    cdef double* drow
    for b in range(B):
        row = z + b * 4 * H
        drow = dz + b * 4 * H
        for j in range(H):
            k = b * H + j
            f = row[j]
            i = row[H + j]
            o = row[2 * H + j]
            g = row[3 * H + j]
            tc = _tanh(ct[k])
            cp = 0.0 if first else cprev[k]
            dht = dh[k] + dhn[k]
            dc = dcn[k] + dht * o * (1.0 - tc * tc)
            drow[j] = dc * cp * f * (1.0 - f)
            drow[H + j] = dc * g * i * (1.0 - i)
            drow[2 * H + j] = dht * tc * o * (1.0 - o)
            drow[3 * H + j] = dc * i * (1.0 - g * g)
            dcn[k] = dc * f


def layer_backward(cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] dh,
                   cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] gates,
                   cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] c,
                   cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] wh):
    cdef int T = dh.shape[0], B = dh.shape[1], H = dh.shape[2]
    cdef int G = 4 * H
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] dgx = np.empty((T, B, G))
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] dh_next = np.zeros((B, H))
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] dc_next = np.zeros((B, H))
    cdef double* dhp = &dh[0, 0, 0]
    cdef double* gp = &gates[0, 0, 0]
    cdef double* cp = &c[0, 0, 0]
    cdef double* dgp = &dgx[0, 0, 0]
    cdef double* dhn = &dh_next[0, 0]
    cdef double* dcn = &dc_next[0, 0]
    cdef int t
    for t in range(T - 1, -1, -1):
        with nogil:
            _gate_grads(gp + t * B * G, cp + t * B * H, cp + (t - 1) * B * H,
                        dhp + t * B * H, dhn, dcn, dgp + t * B * G, B, H, t == 0)
        if t > 0:
            np.matmul(dgx[t], wh, out=dh_next)
    return dgx
