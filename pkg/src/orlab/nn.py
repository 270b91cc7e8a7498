"""Minimal feed-forward network engine with manual backpropagation.

Dense layers (relu/identity) plus an optional small 2D convolution,
softmax/cross-entropy and margin losses, plain-SGD training with
optional Gaussian noise injected at a configurable site during
training, and PGD adversarial training. Everything is numpy; the
all-dense single-example forward pass additionally has a numba build
(see :mod:`orlab.kernels`) because black-box attacks hammer it.

Models are immutable after training: ``train`` returns a new model and
``forward``/``backward`` never mutate their arguments, so they are safe
to call from parallel workers.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels

__all__ = [
    "Dense", "Conv2d", "Model", "TrainConfig", "AdvTrainConfig",
    "TrainingDivergedError", "init_model", "forward", "forward_batch",
    "predict", "predict_batch", "accuracy", "softmax", "log_softmax",
    "cross_entropy", "cw_margin_loss", "backward", "input_grad_batch",
    "pgd_batch", "train", "grad_check", "one_hot", "save_model",
    "load_model",
]

_ACTIVATIONS = ("relu", "identity")

CHECKPOINT_MAGIC = b"ORLAB-MODEL-1\n"


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss turns NaN/Inf."""


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"bad dense dims {self.in_dim}x{self.out_dim}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_size(self):
        return self.in_dim

    @property
    def output_size(self):
        return self.out_dim

    @property
    def param_count(self):
        return self.out_dim * self.in_dim + self.out_dim


@dataclass(frozen=True)
class Conv2d:
    """Valid-padding, stride-1 convolution on a (channels, h, w) input."""

    in_shape: tuple  # (channels, height, width)
    out_channels: int
    kernel: int
    activation: str = "identity"

    def __post_init__(self):
        c, h, w = self.in_shape
        if min(c, h, w, self.out_channels, self.kernel) < 1:
            raise ValueError(f"bad conv spec {self}")
        if self.kernel > min(h, w):
            raise ValueError(f"kernel {self.kernel} exceeds input {h}x{w}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_hw(self):
        _, h, w = self.in_shape
        return h - self.kernel + 1, w - self.kernel + 1

    @property
    def input_size(self):
        c, h, w = self.in_shape
        return c * h * w

    @property
    def output_size(self):
        oh, ow = self.out_hw
        return self.out_channels * oh * ow

    @property
    def param_count(self):
        c = self.in_shape[0]
        return self.out_channels * c * self.kernel * self.kernel + self.out_channels


class Model:
    """Layer specs plus a single flat parameter vector."""

    def __init__(self, layers, params, seed=0, dtype=np.float64):
        layers = tuple(layers)
        if not layers:
            raise ValueError("model needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.output_size != b.input_size:
                raise ValueError(
                    f"layer dims do not chain: {a.output_size} -> {b.input_size}")
        expected = sum(l.param_count for l in layers)
        params = np.ascontiguousarray(params, dtype=dtype)
        if params.ndim != 1 or params.size != expected:
            raise ValueError(f"expected {expected} params, got {params.size}")
        self.layers = layers
        self.params = params
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.num_classes = layers[-1].output_size
        self.input_dim = layers[0].input_size
        self.all_dense = all(isinstance(l, Dense) for l in layers)
        if self.all_dense:
            self._dims = np.array(
                [layers[0].in_dim] + [l.out_dim for l in layers], dtype=np.int64)
            self._acts = np.array(
                [1 if l.activation == "relu" else 0 for l in layers], dtype=np.int64)
        # flat-vector offsets of each layer's (W, b) block
        offs, off = [], 0
        for l in layers:
            offs.append(off)
            off += l.param_count
        self._offsets = tuple(offs)

    def layer_params(self, i):
        """Views (no copy) of layer i's weight matrix and bias."""
        l = self.layers[i]
        off = self._offsets[i]
        if isinstance(l, Dense):
            w = self.params[off:off + l.out_dim * l.in_dim].reshape(l.out_dim, l.in_dim)
            b = self.params[off + l.out_dim * l.in_dim:off + l.param_count]
        else:
            c = l.in_shape[0]
            nw = l.out_channels * c * l.kernel * l.kernel
            w = self.params[off:off + nw].reshape(l.out_channels, c, l.kernel, l.kernel)
            b = self.params[off + nw:off + l.param_count]
        return w, b

    def with_params(self, params):
        return Model(self.layers, params, seed=self.seed, dtype=self.dtype)

    def __repr__(self):
        shape = "-".join(str(l.input_size) for l in self.layers)
        return (f"Model({shape}-{self.num_classes}, {self.params.size} params, "
                f"{self.dtype.name})")


def init_model(layers, seed=0, dtype=np.float64):
    """He-scaled Gaussian init, deterministic per seed."""
    rng = np.random.default_rng(seed)
    chunks = []
    for l in layers:
        if isinstance(l, Dense):
            fan_in = l.in_dim
            n_w, n_b = l.out_dim * l.in_dim, l.out_dim
        else:
            fan_in = l.in_shape[0] * l.kernel ** 2
            n_w, n_b = l.param_count - l.out_channels, l.out_channels
        scale = np.sqrt(2.0 / fan_in) if l.activation == "relu" else np.sqrt(1.0 / fan_in)
        chunks.append(rng.normal(0.0, scale, n_w))
        chunks.append(np.zeros(n_b))
    return Model(layers, np.concatenate(chunks), seed=seed, dtype=dtype)


def mlp(sizes, seed=0, dtype=np.float64):
    """Relu MLP helper: mlp([784, 128, 64, 10]) builds 784->128->64->10."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        act = "relu" if i < len(sizes) - 2 else "identity"
        layers.append(Dense(a, b, act))
    return init_model(layers, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# forward

def _apply_act(z, activation):
    if activation == "relu":
        return np.maximum(z, 0)
    return z


def _conv_cols(x4, k):
    # (B, c, h, w) -> (B, oh*ow, c*k*k) patch matrix
    win = np.lib.stride_tricks.sliding_window_view(x4, (k, k), axis=(2, 3))
    b, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * k * k)
    return np.ascontiguousarray(cols), (oh, ow)


def _layer_forward(model, i, h):
    """One layer on a (B, n) batch. Returns (activated, cache)."""
    l = model.layers[i]
    w, b = model.layer_params(i)
    if isinstance(l, Dense):
        z = h @ w.T + b
        return _apply_act(z, l.activation), (h, z)
    c, hh, ww = l.in_shape
    x4 = h.reshape(-1, c, hh, ww)
    cols, (oh, ow) = _conv_cols(x4, l.kernel)
    wmat = w.reshape(l.out_channels, -1)
    z3 = cols @ wmat.T + b                       # (B, oh*ow, oc)
    z = z3.transpose(0, 2, 1).reshape(h.shape[0], -1)
    return _apply_act(z, l.activation), (cols, z, (oh, ow))


def forward_batch(model, x):
    """Logits for a (B, input_dim) batch; deterministic, no noise."""
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"expected (B, {model.input_dim}) input, got {x.shape}")
    h = x
    for i in range(len(model.layers)):
        h, _ = _layer_forward(model, i, h)
    return h


def forward(model, x):
    """Logit vector f(x) for a single input; deterministic, no noise."""
    x = np.ascontiguousarray(x, dtype=model.dtype)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise ValueError(f"expected input of length {model.input_dim}, got {x.shape}")
    if model.all_dense:
        return kernels.mlp_logits(x, model.params, model._dims, model._acts)
    return forward_batch(model, x[None, :])[0]


def predict(model, x):
    return int(np.argmax(forward(model, x)))


def predict_batch(model, x):
    return np.argmax(forward_batch(model, x), axis=1)


def accuracy(model, x, y):
    return float(np.mean(predict_batch(model, x) == np.asarray(y)))


# ---------------------------------------------------------------------------
# losses

def softmax(logits):
    """Stable softmax; shift-invariant, rejects NaN/Inf input."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("log_softmax input must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def one_hot(y, num_classes):
    out = np.zeros(num_classes)
    out[y] = 1.0
    return out


def cross_entropy(logits, y):
    """Cross-entropy from logits. Returns (loss, grad wrt logits).

    Computed via log-sum-exp directly on the logits; probabilities are
    never materialised in the loss, so large-logit models lose no
    precision beyond what the gradient itself carries.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = int(y)
    if not 0 <= y < z.shape[-1]:
        raise IndexError(f"class {y} out of range for {z.shape[-1]} logits")
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    loss = lse - z[y]
    grad = np.exp(z - lse)
    grad[y] -= 1.0
    return float(loss), grad


def cw_margin_loss(logits, y, kappa=0.0):
    """Clamped logit margin max(z_y - max_{i != y} z_i, -kappa).

    Positive when the model is confidently correct; an attacker drives
    it down (maximises its negation).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("margin needs at least two classes")
    y = int(y)
    if not 0 <= y < z.shape[-1]:
        raise IndexError(f"class {y} out of range for {z.shape[-1]} logits")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    rival = np.max(np.delete(z, y))
    return float(max(z[y] - rival, -kappa))


# ---------------------------------------------------------------------------
# backward

def _noisy_forward_caches(model, x2, noise=None, noise_site="logits"):
    """Forward over a batch keeping per-layer caches.

    ``noise`` (if given) is added after layer ``noise_site``'s activation
    (an int layer index) or to the final logits (``"logits"``). The noise
    is a constant additive term: downstream layers and the loss see the
    shifted values, and backprop treats the shift as having derivative 1.
    """
    caches = []
    h = x2
    n_layers = len(model.layers)
    for i in range(n_layers):
        h, cache = _layer_forward(model, i, h)
        if noise is not None and noise_site == i and i != n_layers - 1:
            h = h + noise
        caches.append(cache)
    if noise is not None and (noise_site == "logits" or noise_site == n_layers - 1):
        h = h + noise
    return h, caches


def _layer_backward(model, i, cache, dout):
    """Gradient of one layer. Returns (dW_flat_with_bias, dinput)."""
    l = model.layers[i]
    w, _ = model.layer_params(i)
    if isinstance(l, Dense):
        hin, z = cache
        dz = dout * (z > 0) if l.activation == "relu" else dout
        dw = dz.T @ hin
        db = dz.sum(axis=0)
        dh = dz @ w
        return np.concatenate([dw.ravel(), db]), dh
    cols, z, (oh, ow) = cache
    dz = dout * (z > 0) if l.activation == "relu" else dout
    bsz = dz.shape[0]
    dz3 = dz.reshape(bsz, l.out_channels, oh * ow).transpose(0, 2, 1)  # (B, P, oc)
    wmat = w.reshape(l.out_channels, -1)
    dwmat = np.einsum("bpo,bpi->oi", dz3, cols)
    db = dz3.sum(axis=(0, 1))
    dcols = dz3 @ wmat                                                 # (B, P, ic*k*k)
    c, hh, ww = l.in_shape
    k = l.kernel
    dwin = dcols.reshape(bsz, oh, ow, c, k, k)
    dx4 = np.zeros((bsz, c, hh, ww), dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            dx4[:, :, ki:ki + oh, kj:kj + ow] += dwin[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return np.concatenate([dwmat.ravel(), db]), dx4.reshape(bsz, -1)


def _loss_and_dlogits(logits2, y_arr, loss_kind, kappa=0.0):
    """Per-example losses and dLoss/dlogits for a (B, C) logit batch."""
    z = logits2
    bsz, num_c = z.shape
    rows = np.arange(bsz)
    if loss_kind == "xent":
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        losses = lse - z[rows, y_arr]
        dz = np.exp(z - lse[:, None])
        dz[rows, y_arr] -= 1.0
        return losses, dz
    if loss_kind == "cw":
        masked = z.copy()
        masked[rows, y_arr] = -np.inf
        rival = masked.argmax(axis=1)
        margin = z[rows, y_arr] - z[rows, rival]
        losses = np.maximum(margin, -kappa)
        live = margin > -kappa
        dz = np.zeros_like(z)
        dz[rows[live], y_arr[live]] = 1.0
        dz[rows[live], rival[live]] = -1.0
        return losses, dz
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _batch_grads(model, x2, y_arr, loss_kind="xent", noise=None,
                 noise_site="logits", kappa=0.0):
    """Mean loss, mean parameter gradient and per-example input gradient."""
    logits2, caches = _noisy_forward_caches(model, x2, noise, noise_site)
    losses, dz = _loss_and_dlogits(logits2, y_arr, loss_kind, kappa)
    bsz = x2.shape[0]
    pgrads = np.zeros(model.params.size)
    dh = dz
    for i in range(len(model.layers) - 1, -1, -1):
        gflat, dh = _layer_backward(model, i, caches[i], dh)
        off = model._offsets[i]
        pgrads[off:off + model.layers[i].param_count] = gflat
    return float(losses.mean()), pgrads / bsz, dh


def backward(model, x, y, loss_kind="xent", logit_noise=None, kappa=0.0):
    """Exact reverse-mode gradients of the loss at logits + logit_noise.

    Returns (param_gradients, input_gradient); the noise term is treated
    as a constant shift of the logits.
    """
    x = np.ascontiguousarray(x, dtype=model.dtype)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise ValueError(f"expected input of length {model.input_dim}, got {x.shape}")
    if logit_noise is not None:
        logit_noise = np.asarray(logit_noise, dtype=model.dtype)
        if logit_noise.shape != (model.num_classes,):
            raise ValueError("logit_noise length must equal the class count")
    if not 0 <= int(y) < model.num_classes:
        raise IndexError(f"class {y} out of range")
    _, pgrads, dx = _batch_grads(
        model, x[None, :], np.array([int(y)]),
        loss_kind=loss_kind, noise=logit_noise, noise_site="logits", kappa=kappa)
    if not np.all(np.isfinite(dx)):
        raise FloatingPointError("NaN in activations during backward")
    return pgrads, dx[0]


def input_grad_batch(model, x2, y_arr, loss_kind="xent", kappa=0.0):
    """Per-example gradient of the loss wrt the input, for a batch."""
    x2 = np.ascontiguousarray(x2, dtype=model.dtype)
    logits2, caches = _noisy_forward_caches(model, x2)
    _, dz = _loss_and_dlogits(logits2, np.asarray(y_arr, dtype=np.int64),
                              loss_kind, kappa)
    dh = dz
    for i in range(len(model.layers) - 1, -1, -1):
        _, dh = _layer_backward(model, i, caches[i], dh)
    return dh


def input_grad_from_dlogits(model, x, dlogits):
    """Backpropagate a caller-supplied logit sensitivity to the input."""
    x = np.ascontiguousarray(x, dtype=model.dtype)
    _, caches = _noisy_forward_caches(model, x[None, :])
    dh = np.asarray(dlogits, dtype=model.dtype)[None, :]
    for i in range(len(model.layers) - 1, -1, -1):
        _, dh = _layer_backward(model, i, caches[i], dh)
    return dh[0]


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class AdvTrainConfig:
    """PGD(Xent) parameters for adversarial training."""
    eps: float = 8.0 / 255.0
    step: float = 2.0 / 255.0
    steps: int = 10

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("adversarial training budget eps must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    learning_rate: float = 0.05
    or_sigma: float = 0.0          # stddev of train-time Gaussian logit noise
    noise_site: object = "logits"  # "logits" or int layer index (after activation)
    adv_train: AdvTrainConfig | None = None
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.or_sigma < 0:
            raise ValueError("or_sigma must be nonnegative")


def _noise_width(model, noise_site):
    if noise_site == "logits":
        return model.num_classes
    i = int(noise_site)
    if not 0 <= i < len(model.layers):
        raise ValueError(f"noise site layer {i} out of range")
    return model.layers[i].output_size


def pgd_batch(model, x2, y_arr, eps, step, steps, rng):
    """Batch PGD(Xent) in the l-inf ball, random start, clip to [0, 1]."""
    x0 = np.asarray(x2, dtype=np.float64)
    x = np.clip(x0 + rng.uniform(-eps, eps, x0.shape), 0.0, 1.0)
    for _ in range(steps):
        g = input_grad_batch(model, x, y_arr, "xent")
        x = x + step * np.sign(g)
        x = np.clip(x, x0 - eps, x0 + eps)
        x = np.clip(x, 0.0, 1.0)
    return x


def train(model, x_train, y_train, config):
    """Minibatch SGD. Returns (trained model, [(iteration, mean loss), ...]).

    With ``or_sigma > 0`` a fresh zero-mean Gaussian is added at
    ``noise_site`` on every forward pass, during training only; with
    ``or_sigma == 0`` no noise is ever drawn, so the run is bit-identical
    to plain SGD under the same seed. With ``adv_train`` set, each batch
    is replaced by PGD(Xent) adversarial examples before the step.
    Evaluation-time forward stays deterministic and noise-free either way.
    """
    x_train = np.ascontiguousarray(x_train, dtype=model.dtype)
    y_train = np.asarray(y_train, dtype=np.int64)
    if x_train.ndim != 2 or x_train.shape[0] == 0:
        raise ValueError("training set must be a nonempty (N, d) array")
    if x_train.shape[0] != y_train.shape[0]:
        raise ValueError("feature/label count mismatch")
    rng = np.random.default_rng(config.seed)
    params = model.params.copy()
    cur = model.with_params(params)
    n = x_train.shape[0]
    width = _noise_width(model, config.noise_site)
    log = []
    for it in range(config.iterations):
        idx = rng.integers(0, n, size=config.batch_size)
        xb = x_train[idx]
        yb = y_train[idx]
        if config.adv_train is not None:
            a = config.adv_train
            xb = pgd_batch(cur, xb, yb, a.eps, a.step, a.steps, rng).astype(model.dtype)
        noise = None
        if config.or_sigma > 0:
            noise = rng.normal(0.0, config.or_sigma,
                               (config.batch_size, width)).astype(model.dtype)
        loss, pgrads, _ = _batch_grads(cur, xb, yb, "xent",
                                       noise=noise, noise_site=config.noise_site)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss diverged at iteration {it}: {loss} "
                f"(lr={config.learning_rate}, or_sigma={config.or_sigma})")
        params -= config.learning_rate * pgrads.astype(model.dtype)
        cur = cur.with_params(params)
        if it % config.log_every == 0 or it == config.iterations - 1:
            log.append((it, loss))
    return cur, log


# ---------------------------------------------------------------------------
# verification

def grad_check(model, x, y, step=1e-4):
    """Worst relative error of backward vs central finite differences.

    Coordinates where both gradients vanish (dead relu paths) compare as
    exact zeros rather than blowing up the relative error.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    analytic, _ = backward(model, x, y, "xent")
    params = model.params.astype(np.float64).copy()
    worst = 0.0
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + step
        lp, _ = cross_entropy(forward(model.with_params(params), x), y)
        params[i] = orig - step
        lm, _ = cross_entropy(forward(model.with_params(params), x), y)
        params[i] = orig
        numeric = (lp - lm) / (2.0 * step)
        denom = max(abs(analytic[i]), abs(numeric))
        if denom < 1e-7:
            continue
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

def _layer_to_dict(l):
    if isinstance(l, Dense):
        return {"kind": "dense", "in_dim": l.in_dim, "out_dim": l.out_dim,
                "activation": l.activation}
    return {"kind": "conv2d", "in_shape": list(l.in_shape),
            "out_channels": l.out_channels, "kernel": l.kernel,
            "activation": l.activation}


def _layer_from_dict(d):
    if d["kind"] == "dense":
        return Dense(d["in_dim"], d["out_dim"], d["activation"])
    if d["kind"] == "conv2d":
        return Conv2d(tuple(d["in_shape"]), d["out_channels"], d["kernel"],
                      d["activation"])
    raise ValueError(f"unknown layer kind {d['kind']!r}")


def save_model(model, path):
    """Checkpoint format: magic, one JSON header line, raw little-endian
    parameter bytes. Round trips bit-exactly."""
    le = "<f4" if model.dtype == np.float32 else "<f8"
    header = {
        "layers": [_layer_to_dict(l) for l in model.layers],
        "num_classes": model.num_classes,
        "seed": model.seed,
        "dtype": model.dtype.name,
        "param_count": int(model.params.size),
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(model.params, dtype=le).tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic {magic!r})")
        header = json.loads(fh.readline().decode("ascii"))
        le = "<f4" if header["dtype"] == "float32" else "<f8"
        raw = fh.read()
    params = np.frombuffer(raw, dtype=le)
    if params.size != header["param_count"]:
        raise ValueError(
            f"{path}: expected {header['param_count']} params, file has {params.size}")
    layers = [_layer_from_dict(d) for d in header["layers"]]
    return Model(layers, params.astype(header["dtype"]), seed=header["seed"],
                 dtype=np.dtype(header["dtype"]))
