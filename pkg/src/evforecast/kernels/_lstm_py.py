"""Numpy implementation of the LSTM layer recurrence.

Gate blocks are stacked along the last axis in the order forget, input,
output, candidate. States start at zero for every window.
"""
import numpy as np


def _sigmoid(x):
    # exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def layer_forward(gx, wh_t):
    """Run one layer over a time-major batch.

    gx   : (T, B, 4H) input projections ``x @ Wx.T + b``
    wh_t : (H, 4H) transposed recurrent weights

    Returns activated gates (T, B, 4H), cell states (T, B, H) and hidden
    states (T, B, H).
    """
    T, B, G = gx.shape
    H = G // 4
    gates = np.empty((T, B, G))
    c = np.empty((T, B, H))
    h = np.empty((T, B, H))
    h_prev = np.zeros((B, H))
    c_prev = np.zeros((B, H))
    for t in range(T):
        z = gx[t] + h_prev @ wh_t
        z[:, :3 * H] = _sigmoid(z[:, :3 * H])
        z[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        f, i, o, g = z[:, :H], z[:, H:2 * H], z[:, 2 * H:3 * H], z[:, 3 * H:]
        c_prev = f * c_prev + i * g
        h_prev = o * np.tanh(c_prev)
        gates[t] = z
        c[t] = c_prev
        h[t] = h_prev
    return gates, c, h


def layer_backward(dh, gates, c, wh):
    """Backpropagate through time for one layer.

    dh   : (T, B, H) loss gradient w.r.t. each step's hidden output
    wh   : (4H, H) recurrent weights

    Returns the gradient w.r.t. the gate pre-activations, (T, B, 4H).
    """
    T, B, H = dh.shape
    dgx = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        f = gates[t, :, :H]
        i = gates[t, :, H:2 * H]
        o = gates[t, :, 2 * H:3 * H]
        g = gates[t, :, 3 * H:]
        tc = np.tanh(c[t])
        c_prev = c[t - 1] if t > 0 else zeros
        dht = dh[t] + dh_next
        dc = dc_next + dht * o * (1.0 - tc * tc)
        dz = dgx[t]
        dz[:, :H] = dc * c_prev * f * (1.0 - f)
        dz[:, H:2 * H] = dc * g * i * (1.0 - i)
        dz[:, 2 * H:3 * H] = dht * tc * o * (1.0 - o)
        dz[:, 3 * H:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dz @ wh
    return dgx
