"""Dense float64 kernels behind the network forward/backward passes.

Two interchangeable backends provide the same five operations:

* ``numba``  - loop kernels compiled with ``@njit`` (default when numba
  imports cleanly),
* ``numpy``  - plain vectorized numpy, used as the fallback.

The backend is chosen once at import time from the environment variable
``LAYERMATCH_BACKEND`` (``auto`` | ``numba`` | ``numpy``; default
``auto``).  Both backends are deterministic; results may differ in the
last ulp because BLAS and the loop kernels accumulate in different
orders.  ``benchmarks/bench_backends.py`` compares the two.

Shape conventions: batches are ``(n, dim)`` row-major, weights are
``(out_dim, in_dim)``, biases ``(out_dim, 1)``.
"""

from __future__ import annotations

import os

import numpy as np

IDENTITY, RELU, TANH = 0, 1, 2
ACTIVATION_CODES = {"identity": IDENTITY, "relu": RELU, "tanh": TANH}


# ---------------------------------------------------------------------------
# numpy backend


def _affine_numpy(x, w, b):
    return x @ w.T + b.T


def _activate_numpy(z, code):
    if code == RELU:
        return np.maximum(z, 0.0)
    if code == TANH:
        return np.tanh(z)
    return z


def _activate_grad_numpy(z, code):
    if code == RELU:
        return (z > 0.0).astype(np.float64)
    if code == TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def _affine_backward_numpy(dz, a_prev, w):
    dw = dz.T @ a_prev
    db = dz.sum(axis=0)[:, None]
    da = dz @ w
    return dw, db, da


def _softmax_rows_numpy(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# loop kernels (jitted by the numba backend)


def _affine_loops(x, w, b):
    n, in_dim = x.shape
    out_dim = w.shape[0]
    out = np.empty((n, out_dim))
    for i in range(n):
        for j in range(out_dim):
            acc = b[j, 0]
            for k in range(in_dim):
                acc += x[i, k] * w[j, k]
            out[i, j] = acc
    return out


def _activate_loops(z, code):
    if code == IDENTITY:
        return z
    n, m = z.shape
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            v = z[i, j]
            if code == RELU:
                out[i, j] = v if v > 0.0 else 0.0
            else:
                out[i, j] = np.tanh(v)
    return out


def _activate_grad_loops(z, code):
    n, m = z.shape
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            if code == IDENTITY:
                out[i, j] = 1.0
            elif code == RELU:
                out[i, j] = 1.0 if z[i, j] > 0.0 else 0.0
            else:
                t = np.tanh(z[i, j])
                out[i, j] = 1.0 - t * t
    return out


def _affine_backward_loops(dz, a_prev, w):
    n, out_dim = dz.shape
    in_dim = a_prev.shape[1]
    dw = np.zeros((out_dim, in_dim))
    db = np.zeros((out_dim, 1))
    da = np.zeros((n, in_dim))
    for i in range(n):
        for j in range(out_dim):
            g = dz[i, j]
            db[j, 0] += g
            for k in range(in_dim):
                dw[j, k] += g * a_prev[i, k]
                da[i, k] += g * w[j, k]
    return dw, db, da


def _softmax_rows_loops(logits):
    n, m = logits.shape
    out = np.empty((n, m))
    for i in range(n):
        hi = logits[i, 0]
        for j in range(1, m):
            if logits[i, j] > hi:
                hi = logits[i, j]
        total = 0.0
        for j in range(m):
            e = np.exp(logits[i, j] - hi)
            out[i, j] = e
            total += e
        for j in range(m):
            out[i, j] /= total
    return out


_NUMPY_IMPLS = {
    "affine": _affine_numpy,
    "activate": _activate_numpy,
    "activate_grad": _activate_grad_numpy,
    "affine_backward": _affine_backward_numpy,
    "softmax_rows": _softmax_rows_numpy,
}

_LOOP_SOURCES = {
    "affine": _affine_loops,
    "activate": _activate_loops,
    "activate_grad": _activate_grad_loops,
    "affine_backward": _affine_backward_loops,
    "softmax_rows": _softmax_rows_loops,
}

_numba_cache: dict | None = None


def _numba_impls() -> dict:
    global _numba_cache
    if _numba_cache is None:
        from numba import njit

        # no fastmath, no parallel: bitwise-reproducible per backend
        _numba_cache = {name: njit(cache=True)(fn) for name, fn in _LOOP_SOURCES.items()}
    return _numba_cache


def implementations(name: str) -> dict:
    """Return the implementation table for backend ``name`` (benchmark hook)."""
    if name == "numpy":
        return _NUMPY_IMPLS
    if name == "numba":
        return _numba_impls()
    raise ValueError(f"unknown backend {name!r}")


def _resolve_backend() -> str:
    choice = os.environ.get("LAYERMATCH_BACKEND", "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"LAYERMATCH_BACKEND must be auto, numba or numpy, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise RuntimeError("LAYERMATCH_BACKEND=numba but numba is not importable")
        return "numpy"
    return "numba"


ACTIVE_BACKEND = _resolve_backend()
_impls = implementations(ACTIVE_BACKEND)

affine = _impls["affine"]
activate = _impls["activate"]
activate_grad = _impls["activate_grad"]
affine_backward = _impls["affine_backward"]
softmax_rows = _impls["softmax_rows"]


def backend() -> str:
    """Name of the backend selected at import time."""
    return ACTIVE_BACKEND


def warmup() -> None:
    """Run every kernel once on tiny inputs (triggers JIT compilation)."""
    x = np.ones((2, 3))
    w = np.ones((4, 3))
    b = np.zeros((4, 1))
    z = affine(x, w, b)
    for code in (IDENTITY, RELU, TANH):
        activate(z, code)
        activate_grad(z, code)
    affine_backward(z, x, w)
    softmax_rows(z)
