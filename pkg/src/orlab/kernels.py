"""Hot numeric kernels.

The single hot loop in this package is the black-box oracle: attacks
like zeroth-order coordinate descent issue 1e4-1e6 single-example
forward passes per image, so the all-dense forward pass gets a numba
build. ``mlp_logits`` is the selected build (see :mod:`orlab.accel`);
the numpy twin stays importable so tests and the benchmark can compare
the two directly.

Kernel calling convention: the model is passed as a flat parameter
vector plus two small int64 arrays, ``dims = [d0, d1, ..., dL]`` and
``acts`` (1 = relu, 0 = identity, one entry per layer). Parameters are
laid out layer by layer, row-major weight matrix then bias.
"""

import numpy as np

from .accel import NUMBA_ENABLED, maybe_njit

__all__ = ["mlp_logits", "mlp_logits_numpy", "mlp_logits_numba"]


def mlp_logits_numpy(x, params, dims, acts):
    """Pure-numpy forward pass; reference twin of the numba kernel."""
    off = 0
    h = x
    for li in range(dims.shape[0] - 1):
        din = int(dims[li])
        dout = int(dims[li + 1])
        w = params[off:off + dout * din].reshape(dout, din)
        off += dout * din
        b = params[off:off + dout]
        off += dout
        h = np.dot(w, h) + b
        if acts[li] == 1:
            h = np.maximum(h, 0)
    return h


def _mlp_logits_loops(x, params, dims, acts):
    # Same arithmetic as mlp_logits_numpy; relu is an explicit loop so the
    # kernel stays dtype-generic under numba (scalar 0.0 would promote f32).
    off = 0
    h = x
    for li in range(dims.shape[0] - 1):
        din = dims[li]
        dout = dims[li + 1]
        w = params[off:off + dout * din].reshape(dout, din)
        off += dout * din
        b = params[off:off + dout]
        off += dout
        h = np.dot(w, h) + b
        if acts[li] == 1:
            for j in range(h.shape[0]):
                if h[j] < 0:
                    h[j] = 0
    return h


if NUMBA_ENABLED:
    mlp_logits_numba = maybe_njit(_mlp_logits_loops)
    mlp_logits = mlp_logits_numba
else:
    mlp_logits_numba = None
    mlp_logits = mlp_logits_numpy
