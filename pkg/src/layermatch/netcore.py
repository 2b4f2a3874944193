"""Small dense network: a feature extractor stack plus a linear softmax head.

Everything is float64 and functional: parameters and gradients travel in
plain dataclasses, forward passes return explicit caches, and the
backward pass consumes them.  The kernels module supplies the matmuls so
the numba/numpy backend switch happens below this layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels

CHECKPOINT_MAGIC = b"LMCK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Raised for malformed or truncated checkpoint files."""


@dataclass
class FeatureExtractorParams:
    """Stacked affine layers.  weights[i] is (out, in), biases[i] is (out, 1)."""

    weights: list
    biases: list
    activations: list

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "FeatureExtractorParams":
        return FeatureExtractorParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


@dataclass
class ClassifierParams:
    """Linear head mapping features to class logits."""

    weight: np.ndarray  # (num_classes, feature_dim)
    bias: np.ndarray  # (num_classes, 1)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.weight.copy(), self.bias.copy())


@dataclass
class GradientSet:
    """Gradients shaped exactly like the parameters they belong to."""

    feature_weights: list
    feature_biases: list
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    def add_scaled(self, other: "GradientSet", coeff: float = 1.0) -> None:
        """In-place self += coeff * other."""
        for dst, src in zip(self.feature_weights, other.feature_weights):
            dst += coeff * src
        for dst, src in zip(self.feature_biases, other.feature_biases):
            dst += coeff * src
        self.classifier_weight += coeff * other.classifier_weight
        self.classifier_bias += coeff * other.classifier_bias

    def copy(self) -> "GradientSet":
        return GradientSet(
            [g.copy() for g in self.feature_weights],
            [g.copy() for g in self.feature_biases],
            self.classifier_weight.copy(),
            self.classifier_bias.copy(),
        )


@dataclass
class ForwardCache:
    """Intermediate arrays one backward pass needs."""

    inputs: np.ndarray
    pre_activations: list
    layer_outputs: list  # post-activation, same length as layers
    features: np.ndarray = field(init=False)
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None

    def __post_init__(self):
        self.features = self.layer_outputs[-1] if self.layer_outputs else self.inputs


def _check_activation(name: str) -> int:
    if name not in kernels.ACTIVATION_CODES:
        raise ValueError(
            f"unknown activation {name!r}; expected one of "
            f"{sorted(kernels.ACTIVATION_CODES)}"
        )
    return kernels.ACTIVATION_CODES[name]


def _glorot_uniform(rng, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def init_feature_extractor(
    layer_dims: Sequence[int],
    activation="relu",
    rng: np.random.Generator | None = None,
) -> FeatureExtractorParams:
    """Build extractor params for dims [d_in, h1, ..., d_feat].

    ``activation`` is a single name applied to every layer, or a list
    with one name per layer.  Weights are uniform on
    +-sqrt(6 / (fan_in + fan_out)); biases start at zero.
    """
    if len(layer_dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output size")
    if rng is None:
        rng = np.random.default_rng()
    n_layers = len(layer_dims) - 1
    if isinstance(activation, str):
        acts = [activation] * n_layers
    else:
        acts = list(activation)
        if len(acts) != n_layers:
            raise ValueError(f"expected {n_layers} activations, got {len(acts)}")
    for a in acts:
        _check_activation(a)
    weights, biases = [], []
    for i in range(n_layers):
        weights.append(_glorot_uniform(rng, layer_dims[i + 1], layer_dims[i]))
        biases.append(np.zeros((layer_dims[i + 1], 1)))
    return FeatureExtractorParams(weights, biases, acts)


def init_classifier(
    feature_dim: int, num_classes: int, rng: np.random.Generator | None = None
) -> ClassifierParams:
    if rng is None:
        rng = np.random.default_rng()
    return ClassifierParams(
        _glorot_uniform(rng, num_classes, feature_dim), np.zeros((num_classes, 1))
    )


def forward_features(
    params: FeatureExtractorParams, x: np.ndarray, keep_cache: bool = False
):
    """Run the extractor stack.  Returns features, or (features, cache)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    pre, post = [], []
    a = x
    for i, (w, b, act) in enumerate(
        zip(params.weights, params.biases, params.activations)
    ):
        if a.shape[1] != w.shape[1]:
            raise ValueError(
                f"layer {i}: got {a.shape[1]} input columns, weight expects "
                f"{w.shape[1]}"
            )
        z = kernels.affine(a, w, b)
        a = kernels.activate(z, kernels.ACTIVATION_CODES[act])
        pre.append(z)
        post.append(a)
    if keep_cache:
        return a, ForwardCache(x, pre, post)
    return a


def forward_probs(clf: ClassifierParams, features: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for a batch of feature rows."""
    if features.shape[1] != clf.weight.shape[1]:
        raise ValueError(
            f"classifier expects {clf.weight.shape[1]} feature columns, got "
            f"{features.shape[1]}"
        )
    logits = kernels.affine(features, clf.weight, clf.bias)
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits in forward_probs")
    return kernels.softmax_rows(logits)


def forward_model(
    fe: FeatureExtractorParams, clf: ClassifierParams, x: np.ndarray
) -> ForwardCache:
    """Full forward pass, cache filled in (features, logits, probs)."""
    _, cache = forward_features(fe, x, keep_cache=True)
    cache.logits = kernels.affine(cache.features, clf.weight, clf.bias)
    cache.probs = kernels.softmax_rows(cache.logits)
    return cache


def _backprop_features(
    fe: FeatureExtractorParams, cache: ForwardCache, dfeatures: np.ndarray
):
    """Push a gradient at the feature output down the stack.

    Returns (per-layer dW list, per-layer db list, dX).
    """
    dws = [None] * fe.num_layers
    dbs = [None] * fe.num_layers
    da = dfeatures
    for i in range(fe.num_layers - 1, -1, -1):
        code = kernels.ACTIVATION_CODES[fe.activations[i]]
        dz = da * kernels.activate_grad(cache.pre_activations[i], code)
        a_prev = cache.layer_outputs[i - 1] if i > 0 else cache.inputs
        dz = np.ascontiguousarray(dz)
        dws[i], dbs[i], da = kernels.affine_backward(dz, a_prev, fe.weights[i])
    return dws, dbs, da


def backward(
    fe: FeatureExtractorParams,
    clf: ClassifierParams,
    cache: ForwardCache,
    dlogits: np.ndarray,
) -> GradientSet:
    """Backward pass from a gradient at the logits.

    The caller owns the loss definition; any batch averaging must
    already be folded into ``dlogits``.
    """
    dlogits = np.ascontiguousarray(dlogits)
    dw_clf, db_clf, dfeat = kernels.affine_backward(dlogits, cache.features, clf.weight)
    dws, dbs, _ = _backprop_features(fe, cache, dfeat)
    return GradientSet(dws, dbs, dw_clf, db_clf)


def grad_wrt_input(
    fe: FeatureExtractorParams,
    clf: ClassifierParams,
    x: np.ndarray,
    class_index: int,
) -> np.ndarray:
    """d P(class_index) / d x for every row of x, via the backward pass.

    Uses the softmax Jacobian row dP_c/dz_j = P_c (1[c=j] - P_j) as the
    seed at the logits.
    """
    if not 0 <= class_index < clf.num_classes:
        raise ValueError(f"class_index {class_index} out of range")
    cache = forward_model(fe, clf, x)
    p = cache.probs
    dlogits = -p[:, class_index : class_index + 1] * p
    dlogits[:, class_index] += p[:, class_index]
    dlogits = np.ascontiguousarray(dlogits)
    _, _, dfeat = kernels.affine_backward(dlogits, cache.features, clf.weight)
    _, _, dx = _backprop_features(fe, cache, dfeat)
    return dx


def feature_jacobian(fe: FeatureExtractorParams, x: np.ndarray) -> np.ndarray:
    """Jacobian of the feature map at a single point, shape (d_feat, d_in)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] != 1:
        raise ValueError("feature_jacobian expects one input point")
    jac = None
    a = x
    for w, b, act in zip(fe.weights, fe.biases, fe.activations):
        z = kernels.affine(a, w, b)
        code = kernels.ACTIVATION_CODES[act]
        a = kernels.activate(z, code)
        d = kernels.activate_grad(z, code)[0]  # (out,)
        layer_jac = d[:, None] * w
        jac = layer_jac if jac is None else layer_jac @ jac
    if jac is None:
        raise ValueError("feature extractor has no layers")
    return jac


def zeros_like_grads(
    fe: FeatureExtractorParams, clf: ClassifierParams
) -> GradientSet:
    return GradientSet(
        [np.zeros_like(w) for w in fe.weights],
        [np.zeros_like(b) for b in fe.biases],
        np.zeros_like(clf.weight),
        np.zeros_like(clf.bias),
    )


def model_matrices(fe: FeatureExtractorParams, clf: ClassifierParams) -> list:
    """Flatten a model into the checkpoint matrix order: W1,b1,...,Wc,bc."""
    mats = []
    for w, b in zip(fe.weights, fe.biases):
        mats.extend([w, b])
    mats.extend([clf.weight, clf.bias])
    return mats


def assign_model_matrices(
    fe: FeatureExtractorParams, clf: ClassifierParams, mats: Sequence[np.ndarray]
) -> None:
    """Load matrices (as produced by model_matrices) back into params."""
    expected = model_matrices(fe, clf)
    if len(mats) != len(expected):
        raise CheckpointError(
            f"checkpoint holds {len(mats)} matrices, model needs {len(expected)}"
        )
    for dst, src in zip(expected, mats):
        if dst.shape != src.shape:
            raise CheckpointError(
                f"matrix shape mismatch: checkpoint {src.shape}, model {dst.shape}"
            )
        dst[...] = src


def save_matrices(path, matrices: Sequence[np.ndarray]) -> None:
    """Write matrices to the binary checkpoint format.

    Layout: magic ``LMCK``, u32 version, then per matrix a u32 row
    count, u32 column count and the row-major float64 payload.  All
    integers and floats are little-endian.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for m in matrices:
            a = np.ascontiguousarray(m, dtype="<f8")
            if a.ndim != 2:
                raise ValueError("checkpoints hold 2-D matrices only")
            fh.write(struct.pack("<II", a.shape[0], a.shape[1]))
            fh.write(a.tobytes())


def load_matrices(path) -> list:
    """Read a checkpoint back; matrices come out in write order."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    mats = []
    offset = 8
    while offset < len(raw):
        if len(raw) - offset < 8:
            raise CheckpointError(f"{path}: truncated matrix header")
        rows, cols = struct.unpack_from("<II", raw, offset)
        offset += 8
        count = rows * cols
        if len(raw) - offset < 8 * count:
            raise CheckpointError(f"{path}: truncated matrix payload")
        block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        mats.append(block.reshape(rows, cols).astype(np.float64))
        offset += 8 * count
    return mats
