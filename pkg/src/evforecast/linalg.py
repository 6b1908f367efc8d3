"""Small dense helpers on float64 numpy arrays.

Matrices are 2-D C-contiguous ``float64`` arrays (row-major), vectors are 1-D.
These are the reference routines; the batched training path lives in
:mod:`evforecast.kernels`.
"""
import numpy as np

from .errors import ShapeError


def as_vector(v):
    return np.asarray(v, dtype=np.float64).reshape(-1)


def as_matrix(m):
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError("as_matrix", m.shape)
    return m


def matvec(m, v):
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ShapeError("matvec", m.shape, v.shape)
    return m @ v


def sigmoid(v):
    """Logistic function, evaluated so that large |x| never overflows."""
    x = np.asarray(v, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_v(v):
    return np.tanh(np.asarray(v, dtype=np.float64))


def hadamard(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("hadamard", a.shape, b.shape)
    return a * b
