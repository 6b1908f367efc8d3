"""Stacked LSTM regressor with dropout, trained by backpropagation through time.

Gate weights are stored fused: ``wx`` is ``(4H, in)``, ``wh`` is ``(4H, H)``
and ``b`` is ``(4H,)``, with row blocks ordered forget, input, output,
candidate. Named per-gate views (``W_fx``, ``W_ch``, ``b_o`` ...) are exposed
on :class:`LstmLayerParams`.

Dropout is inverted (kept units scaled by ``1/(1-p)``) and applied to every
layer's hidden output at every step, never to the recurrent path. For the top
layer only the final step feeds the dense head, so only that step is masked.
"""
import json
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    CorruptModelError,
    ModelVersionError,
    ShapeError,
    TrainingDivergenceError,
)
from .linalg import hadamard, matvec, sigmoid, tanh_v

GATES = ("f", "i", "o", "c")
DROPOUT_CHOICES = (0.0, 0.05, 0.1, 0.15)
MODEL_FORMAT = "evforecast-model"
MODEL_VERSION = 1


def _gate_view(attr, gate):
    k = GATES.index(gate)

    def get(self):
        H = self.hidden_size
        arr = getattr(self, attr)
        return arr[k * H:(k + 1) * H]

    return property(get)


@dataclass(eq=False)
class LstmLayerParams:
    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.wx = np.ascontiguousarray(self.wx, dtype=np.float64)
        self.wh = np.ascontiguousarray(self.wh, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        G, H = self.wh.shape
        if G != 4 * H or self.wx.shape[0] != G or self.b.shape != (G,):
            raise ShapeError("LstmLayerParams", self.wx.shape, self.wh.shape, self.b.shape)

    @property
    def input_size(self):
        return self.wx.shape[1]

    @property
    def hidden_size(self):
        return self.wh.shape[1]

    W_fx, W_ix, W_ox, W_cx = (_gate_view("wx", g) for g in GATES)
    W_fh, W_ih, W_oh, W_ch = (_gate_view("wh", g) for g in GATES)
    b_f, b_i, b_o, b_c = (_gate_view("b", g) for g in GATES)

    @classmethod
    def zeros(cls, input_size, hidden_size):
        H = hidden_size
        return cls(np.zeros((4 * H, input_size)), np.zeros((4 * H, H)), np.zeros(4 * H))

    @classmethod
    def from_gates(cls, wx, wh, b):
        """Build from per-gate dicts keyed by ``f``, ``i``, ``o``, ``c``."""
        return cls(
            np.vstack([wx[g] for g in GATES]),
            np.vstack([wh[g] for g in GATES]),
            np.concatenate([np.asarray(b[g], dtype=np.float64).reshape(-1) for g in GATES]),
        )

    def parameters(self):
        return [self.wx, self.wh, self.b]


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_size):
        return cls(np.zeros(hidden_size), np.zeros(hidden_size))


def cell_step(p, x, prev):
    """One LSTM step for a single sample.

    Unbatched and deliberately literal; the batched kernels are checked
    against it.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != p.input_size:
        raise ShapeError("cell_step", x.shape, (p.input_size,))
    if prev.h.shape != (p.hidden_size,) or prev.c.shape != (p.hidden_size,):
        raise ShapeError("cell_step", prev.h.shape, (p.hidden_size,))
    f = sigmoid(matvec(p.W_fx, x) + matvec(p.W_fh, prev.h) + p.b_f)
    i = sigmoid(matvec(p.W_ix, x) + matvec(p.W_ih, prev.h) + p.b_i)
    o = sigmoid(matvec(p.W_ox, x) + matvec(p.W_oh, prev.h) + p.b_o)
    c_bar = tanh_v(matvec(p.W_cx, x) + matvec(p.W_ch, prev.h) + p.b_c)
    c = hadamard(f, prev.c) + hadamard(i, c_bar)
    h = hadamard(o, tanh_v(c))
    cache = {"f": f, "i": i, "o": o, "c_bar": c_bar, "c": c, "h": h, "x": x,
             "h_prev": prev.h, "c_prev": prev.c}
    return LstmState(h, c), cache


@dataclass(eq=False)
class LstmModel:
    layers: list
    head_weights: np.ndarray
    head_b: np.ndarray = field(default_factory=lambda: np.zeros(1))
    dropout_p: float = 0.0
    rng_seed: int = 0
    norm_id: str = ""

    def __post_init__(self):
        self.head_weights = np.ascontiguousarray(self.head_weights, dtype=np.float64)
        self.head_b = np.ascontiguousarray(self.head_b, dtype=np.float64).reshape(1)
        if not 0.0 <= self.dropout_p <= max(DROPOUT_CHOICES):
            raise ConfigError(f"dropout_p must lie in [0, {max(DROPOUT_CHOICES)}], got {self.dropout_p}")
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.input_size != lower.hidden_size:
                raise ShapeError("LstmModel layers", (lower.hidden_size,), (upper.input_size,))
        if self.head_weights.shape != (self.layers[-1].hidden_size,):
            raise ShapeError("LstmModel head", self.head_weights.shape, (self.layers[-1].hidden_size,))

    @property
    def head_bias(self):
        return float(self.head_b[0])

    @head_bias.setter
    def head_bias(self, value):
        self.head_b[0] = value

    @property
    def n_features(self):
        return self.layers[0].input_size

    @property
    def hidden_sizes(self):
        return [layer.hidden_size for layer in self.layers]

    def parameters(self):
        """Every trainable array, in a fixed order shared with gradients."""
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        out.append(self.head_weights)
        out.append(self.head_b)
        return out

    def parameter_names(self):
        names = []
        for k in range(len(self.layers)):
            names.extend([f"layer{k}.wx", f"layer{k}.wh", f"layer{k}.b"])
        return names + ["head.w", "head.b"]

    def signature(self):
        return tuple(p.shape for p in self.parameters())

    def copy(self):
        return LstmModel(
            [LstmLayerParams(l.wx.copy(), l.wh.copy(), l.b.copy()) for l in self.layers],
            self.head_weights.copy(), self.head_b.copy(), self.dropout_p, self.rng_seed, self.norm_id,
        )


def build_model(n_features, hidden_size, num_layers=1, dropout_p=0.0, seed=0, norm_id=""):
    """Randomly initialised model: weights uniform in +-1/sqrt(hidden), biases zero."""
    rng = np.random.default_rng([seed, 0])
    r = 1.0 / math.sqrt(hidden_size)
    layers = []
    in_size = n_features
    for _ in range(num_layers):
        layers.append(LstmLayerParams(
            rng.uniform(-r, r, size=(4 * hidden_size, in_size)),
            rng.uniform(-r, r, size=(4 * hidden_size, hidden_size)),
            np.zeros(4 * hidden_size),
        ))
        in_size = hidden_size
    head = rng.uniform(-r, r, size=hidden_size)
    return LstmModel(layers, head, np.zeros(1), float(dropout_p), int(seed), norm_id)


@dataclass
class ForwardCache:
    model: object
    signature: tuple
    inputs: list  # per layer, time-major (T, B, in)
    gates: list
    cells: list
    hiddens: list
    masks: list  # per layer; None when dropout is off
    h_last: np.ndarray  # (B, H) masked top-layer output at the final step
    pred: np.ndarray


def sample_masks(model, T, B, rng):
    """Scaled Bernoulli keep-masks for one forward pass."""
    p = model.dropout_p
    masks = []
    for k, H in enumerate(model.hidden_sizes):
        shape = (B, H) if k == len(model.layers) - 1 else (T, B, H)
        masks.append((rng.random(shape) >= p) / (1.0 - p))
    return masks


def forward_batch(model, X, dropout_active=False, rng=None, masks=None, backend=None):
    """Forward a batch of windows ``X`` of shape ``(B, T, f)``.

    Returns predictions ``(B,)`` (normalised units) and a cache for
    :func:`backward_batch`. Explicit ``masks`` override sampling.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != model.n_features:
        raise ShapeError("forward_batch", X.shape, ("B", "T", model.n_features))
    k = kernels.get_backend(backend)
    B, T, _ = X.shape
    if masks is None and dropout_active and model.dropout_p > 0:
        if rng is None:
            raise ValueError("dropout_active requires an rng")
        masks = sample_masks(model, T, B, rng)
    xs = np.ascontiguousarray(X.transpose(1, 0, 2))
    cache = ForwardCache(model, model.signature(), [], [], [], [], [], None, None)
    n_layers = len(model.layers)
    for li, layer in enumerate(model.layers):
        gx = (xs.reshape(T * B, -1) @ layer.wx.T + layer.b).reshape(T, B, -1)
        gates, c, h = k.layer_forward(gx, np.ascontiguousarray(layer.wh.T))
        cache.inputs.append(xs)
        cache.gates.append(gates)
        cache.cells.append(c)
        cache.hiddens.append(h)
        m = masks[li] if masks is not None else None
        cache.masks.append(m)
        if li < n_layers - 1:
            xs = h * m if m is not None else h
    h_last = cache.hiddens[-1][-1]
    if cache.masks[-1] is not None:
        h_last = h_last * cache.masks[-1]
    cache.h_last = h_last
    cache.pred = h_last @ model.head_weights + model.head_b[0]
    return cache.pred, cache


def backward_batch(cache, dpred, backend=None):
    """Gradients of ``sum(dpred * pred)`` w.r.t. ``model.parameters()``."""
    model = cache.model
    if model.signature() != cache.signature:
        raise ShapeError("backward_batch cache/model", cache.signature, model.signature())
    dpred = np.asarray(dpred, dtype=np.float64).reshape(-1)
    if dpred.shape[0] != cache.pred.shape[0]:
        raise ShapeError("backward_batch", dpred.shape, cache.pred.shape)
    k = kernels.get_backend(backend)
    grads_head_w = cache.h_last.T @ dpred
    grads_head_b = np.array([dpred.sum()])
    d_last = np.outer(dpred, model.head_weights)
    if cache.masks[-1] is not None:
        d_last *= cache.masks[-1]
    T, B, H = cache.hiddens[-1].shape
    dh = np.zeros((T, B, H))
    dh[-1] = d_last
    layer_grads = []
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        T, B, H = cache.hiddens[li].shape
        dgx = k.layer_backward(dh, cache.gates[li], cache.cells[li], layer.wh)
        flat = dgx.reshape(T * B, 4 * H)
        x_in = cache.inputs[li]
        g_wx = flat.T @ x_in.reshape(T * B, -1)
        g_wh = dgx[1:].reshape(-1, 4 * H).T @ cache.hiddens[li][:-1].reshape(-1, H)
        g_b = flat.sum(axis=0)
        layer_grads.append([g_wx, g_wh, g_b])
        if li > 0:
            dh = (flat @ layer.wx).reshape(T, B, -1)
            if cache.masks[li - 1] is not None:
                dh *= cache.masks[li - 1]
    grads = []
    for g in reversed(layer_grads):
        grads.extend(g)
    grads.append(grads_head_w)
    grads.append(grads_head_b)
    return grads


def forward_window(model, window, dropout_active=False, rng=None, masks=None):
    """Predict from one ``(w, f)`` window; returns ``(prediction, cache)``."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ShapeError("forward_window", window.shape, ("w", model.n_features))
    pred, cache = forward_batch(model, window[None], dropout_active, rng, masks)
    if not np.isfinite(pred[0]):
        raise TrainingDivergenceError(epoch=None, detail="non-finite activation in forward pass")
    return float(pred[0]), cache


def backward_window(cache, d_loss_d_pred):
    return backward_batch(cache, np.array([d_loss_d_pred], dtype=np.float64))


def predict(model, X, dropout_active=False, rng=None, chunk=256):
    """Forward-only predictions for ``(n, T, f)`` inputs, in chunks."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(X.shape[0])
    for start in range(0, X.shape[0], chunk):
        pred, _ = forward_batch(model, X[start:start + chunk], dropout_active, rng)
        out[start:start + chunk] = pred
    return out


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list = None
    second_moment: list = None


def adam_update(params, grads, s):
    """Bias-corrected Adam step applied in place to ``params``."""
    if len(params) != len(grads):
        raise ShapeError("adam_update", (len(params),), (len(grads),))
    if s.first_moment is None:
        s.first_moment = [np.zeros_like(p) for p in params]
        s.second_moment = [np.zeros_like(p) for p in params]
    s.step += 1
    c1 = 1.0 - s.beta1 ** s.step
    c2 = 1.0 - s.beta2 ** s.step
    for p, g, m, v in zip(params, grads, s.first_moment, s.second_moment):
        if p.shape != g.shape:
            raise ShapeError("adam_update", p.shape, g.shape)
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * (g * g)
        p -= s.learning_rate * (m / c1) / (np.sqrt(v / c2) + s.epsilon)
    return params, s


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass
class TrainReport:
    epoch_train_loss: list = field(default_factory=list)
    epoch_val_loss: list = field(default_factory=list)
    epochs_run: int = 0

    def to_dict(self):
        return {"epoch_train_loss": list(self.epoch_train_loss),
                "epoch_val_loss": list(self.epoch_val_loss),
                "epochs_run": self.epochs_run}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["epoch_train_loss"]), list(d["epoch_val_loss"]), int(d["epochs_run"]))


def mse_loss(model, X, y, chunk=256):
    pred = predict(model, X, chunk=chunk)
    return float(np.mean((pred - y) ** 2))


def train(model, train_set, val_set=None, batch_size=32, epochs=150, adam=None,
          clip_norm=5.0, patience=None, rng=None, on_epoch=None):
    """Minimise mean-squared error over shuffled mini-batches.

    ``train_set``/``val_set`` expose ``inputs`` ``(n, w, f)`` and ``targets``
    ``(n,)`` in normalised units. Validation loss is measured with dropout
    off. ``patience`` enables early stopping on validation loss.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    adam = adam if adam is not None else AdamState()
    rng = rng if rng is not None else np.random.default_rng([model.rng_seed, 1])
    X, y = train_set.inputs, train_set.targets
    n = X.shape[0]
    if n == 0:
        raise ConfigError("empty training set")
    params = model.parameters()
    report = TrainReport()
    best_val, stale = math.inf, 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            pred, cache = forward_batch(model, X[idx], dropout_active=True, rng=rng)
            resid = pred - y[idx]
            loss = float(np.mean(resid * resid))
            if not math.isfinite(loss):
                raise TrainingDivergenceError(epoch, step, "non-finite training loss")
            grads = backward_batch(cache, 2.0 * resid / len(idx))
            clip_by_global_norm(grads, clip_norm)
            adam_update(params, grads, adam)
            total += loss * len(idx)
        train_loss = total / n
        val_loss = mse_loss(model, val_set.inputs, val_set.targets) if val_set is not None else math.nan
        if val_set is not None and not math.isfinite(val_loss):
            raise TrainingDivergenceError(epoch, detail="non-finite validation loss")
        report.epoch_train_loss.append(train_loss)
        report.epoch_val_loss.append(val_loss)
        report.epochs_run = epoch
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        if patience is not None and val_set is not None:
            if val_loss < best_val:
                best_val, stale = val_loss, 0
            else:
                stale += 1
                if stale >= patience:
                    break
    return report


def save_model(model, path, norm_id=None):
    meta = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_features": model.n_features,
        "hidden_sizes": model.hidden_sizes,
        "dropout_p": model.dropout_p,
        "rng_seed": model.rng_seed,
        "norm_id": norm_id if norm_id is not None else model.norm_id,
    }
    arrays = dict(zip(model.parameter_names(), model.parameters()))
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_model(path):
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("format") != MODEL_FORMAT:
                raise CorruptModelError(f"{path}: not an evforecast model file")
            if meta.get("version") != MODEL_VERSION:
                raise ModelVersionError(
                    f"{path}: model format version {meta.get('version')!r}, expected {MODEL_VERSION}")
            n_layers = len(meta["hidden_sizes"])
            layers = [LstmLayerParams(data[f"layer{k}.wx"], data[f"layer{k}.wh"], data[f"layer{k}.b"])
                      for k in range(n_layers)]
            model = LstmModel(layers, data["head.w"], data["head.b"], float(meta["dropout_p"]),
                              int(meta["rng_seed"]), meta.get("norm_id", ""))
    except (zipfile.BadZipFile, EOFError, KeyError, ValueError, json.JSONDecodeError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CorruptModelError(f"{path}: unreadable model file ({exc})") from exc
    if model.n_features != meta["n_features"]:
        raise CorruptModelError(f"{path}: feature count mismatch")
    return model
