"""Numerical checks for the gradient machinery and its continuous-limit
story.

Four families of checks:

* chain-rule identity: for a binary sigmoid head, the input gradient
  computed by backpropagation must equal P(1-P) * beta^T J_M(x) built
  from the feature Jacobian, to near machine precision;
* integral convergence: the vertex sum h^d * sum ||grad P||_1 over a
  grid approaches the volume integral of ||grad P||_1 as h shrinks,
  at first order;
* flatness trend: along a training trace, the fraction of probe points
  whose input-gradient l1 norm falls below a fixed epsilon should not
  decrease (smoothed over a 3-checkpoint window);
* finite-difference gradcheck over every loss surface the trainer uses.

Reports render as text and as CSV rows `check,quantity,value,threshold,pass`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netcore, sslcore
from .data import AugmentationSpec, Example, weak_augment
from .netcore import ClassifierParams, FeatureExtractorParams

_trapz = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class GridSpec:
    """Axis-aligned evaluation box, same point count per dimension."""

    lower: tuple
    upper: tuple
    points_per_dim: int = 101

    def validate(self) -> None:
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper must have the same dimension")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("each lower bound must be below its upper bound")
        if self.points_per_dim < 2:
            raise ValueError("points_per_dim must be >= 2")

    @property
    def dim(self) -> int:
        return len(self.lower)


@dataclass
class BinaryHeadModel:
    """Feature extractor with a single-logit sigmoid readout."""

    fe: FeatureExtractorParams
    beta: np.ndarray  # (feature_dim,)
    bias: float = 0.0

    def as_two_class(self) -> ClassifierParams:
        """Embed the sigmoid head as a 2-class softmax.

        With logit rows [0, beta.x + bias], softmax gives class 1 the
        probability sigmoid(beta.x + bias), so the generic multi-class
        machinery computes this model's gradients directly.
        """
        w = np.vstack([np.zeros_like(self.beta), self.beta])
        b = np.array([[0.0], [self.bias]])
        return ClassifierParams(w, b)

    def prob(self, x: np.ndarray) -> np.ndarray:
        """P(positive class) per row of x."""
        feats = netcore.forward_features(self.fe, np.atleast_2d(x))
        z = feats @ self.beta + self.bias
        return _sigmoid(z)

    def input_grad(self, x: np.ndarray) -> np.ndarray:
        """Gradient of P w.r.t. each input row, via backprop."""
        return netcore.grad_wrt_input(self.fe, self.as_two_class(), np.atleast_2d(x), 1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def binary_head_from_classifier(
    clf: ClassifierParams, fe: FeatureExtractorParams, class_index: int = 0
) -> BinaryHeadModel:
    """One-vs-rest probe: one classifier row becomes the sigmoid weight.

    The bias is dropped so the probe is the pure row readout.
    """
    if not 0 <= class_index < clf.num_classes:
        raise ValueError(f"class_index {class_index} out of range")
    return BinaryHeadModel(fe, clf.weight[class_index].copy(), 0.0)


def chain_rule_identity_check(model: BinaryHeadModel, x: np.ndarray) -> float:
    """Max coordinate gap between backprop and the factored input gradient.

    The factored side is P(1-P) * beta^T J_M(x) with J_M the feature
    Jacobian; equality is algebraic, so any visible gap is a bug.
    """
    if np.asarray(model.beta).ndim != 1:
        raise ValueError("chain_rule_identity_check needs a single-logit head")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    direct = model.input_grad(x)
    p = model.prob(x)
    worst = 0.0
    for i in range(x.shape[0]):
        jac = netcore.feature_jacobian(model.fe, x[i])
        rhs = p[i] * (1.0 - p[i]) * (model.beta @ jac)
        worst = max(worst, float(np.max(np.abs(direct[i] - rhs))))
    return worst


def _grid_vertices(lower, upper, h: float) -> np.ndarray:
    axes = [np.arange(lo, hi + h * 0.5, h) for lo, hi in zip(lower, upper)]
    if len(axes) == 1:
        return axes[0][:, None]
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def _l1_input_grad(model: BinaryHeadModel, points: np.ndarray) -> np.ndarray:
    return np.abs(model.input_grad(points)).sum(axis=1)


@dataclass
class ConvergenceRow:
    h: float
    discrete_sum: float
    integral_estimate: float

    @property
    def gap(self) -> float:
        return abs(self.discrete_sum - self.integral_estimate)


def integral_convergence(
    model: BinaryHeadModel, grid: GridSpec, spacings
) -> list:
    """Vertex Riemann sums of ||grad P||_1 against a trapezoid reference.

    For each spacing h the discrete quantity is h^d times the sum of
    ||grad P||_1 over the box vertices.  The reference integral is a
    composite trapezoid rule at one tenth of the finest requested
    spacing.  Only 1-D and 2-D boxes are supported; the vertex count
    explodes beyond that.
    """
    grid.validate()
    if grid.dim > 2:
        raise ValueError("integral check supports 1-D and 2-D boxes only")
    if not spacings:
        raise ValueError("need at least one spacing")
    h_ref = min(spacings) / 10.0
    ref_axes = [
        np.linspace(lo, hi, int(round((hi - lo) / h_ref)) + 1)
        for lo, hi in zip(grid.lower, grid.upper)
    ]
    if grid.dim == 1:
        vals = _l1_input_grad(model, ref_axes[0][:, None])
        integral = float(_trapz(vals, ref_axes[0]))
    else:
        gx, gy = np.meshgrid(ref_axes[0], ref_axes[1], indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        vals = _l1_input_grad(model, pts).reshape(gx.shape)
        inner = _trapz(vals, ref_axes[1], axis=1)
        integral = float(_trapz(inner, ref_axes[0]))
    rows = []
    for h in spacings:
        verts = _grid_vertices(grid.lower, grid.upper, h)
        total = float(np.sum(_l1_input_grad(model, verts))) * h**grid.dim
        rows.append(ConvergenceRow(float(h), total, integral))
    return rows


def flatness_fractions(trace, probe_points: np.ndarray, epsilon: float) -> list:
    """Per-checkpoint fraction of probe points with ||grad P||_1 < epsilon.

    ``trace`` is a list of (iteration, ModelState-like) pairs; the
    binary probe head is the one-vs-rest reduction on class 0.
    """
    probe_points = np.atleast_2d(probe_points)
    if probe_points.shape[0] == 0:
        raise ValueError("probe set is empty")
    out = []
    for iteration, model in trace:
        head = binary_head_from_classifier(model.clf, model.fe, 0)
        norms = _l1_input_grad(head, probe_points)
        out.append((iteration, float(np.mean(norms < epsilon))))
    return out


def smooth_trailing(values, window: int = 3) -> list:
    """Trailing moving average; entry i averages values[max(0,i-w+1):i+1]."""
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo : i + 1])))
    return out


def flatness_trend(trace, probe_points, epsilon: float, window: int = 3):
    """Smoothed first-vs-last comparison of the flatness fractions.

    Returns (per-checkpoint fractions, smoothed series, trend_ok) where
    trend_ok means the smoothed series ends at or above where it began.
    """
    fractions = flatness_fractions(trace, probe_points, epsilon)
    smoothed = smooth_trailing([f for _, f in fractions], window)
    ok = bool(smoothed[-1] >= smoothed[0]) if smoothed else True
    return fractions, smoothed, ok


# ---------------------------------------------------------------------------
# finite-difference gradcheck


@dataclass
class SurfaceResult:
    name: str
    worst_rel_err: float
    n_checked: int
    passed: bool


@dataclass
class GradcheckReport:
    surfaces: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.surfaces)


def relative_error(a: float, n: float, abs_floor: float = 1e-10) -> float:
    """|a-n| over max(|a|,|n|), treating both-tiny as exact agreement."""
    denom = max(abs(a), abs(n))
    if denom < abs_floor:
        return 0.0 if abs(a - n) < abs_floor else abs(a - n) / abs_floor
    return abs(a - n) / denom


def _central_diff(eval_fn, arr: np.ndarray, flat_index: int, h: float) -> float:
    orig = arr.flat[flat_index]
    arr.flat[flat_index] = orig + h
    lp = eval_fn()
    arr.flat[flat_index] = orig - h
    lm = eval_fn()
    arr.flat[flat_index] = orig
    return (lp - lm) / (2.0 * h)


def _check_surface(
    name: str,
    eval_fn,
    pairs,
    rng,
    n_coords: int,
    tolerance: float,
    fd_step: float,
) -> SurfaceResult:
    """Compare analytic gradients against central differences.

    ``pairs`` is a list of (parameter array, analytic gradient array).
    Coordinates are sampled uniformly over all entries.
    """
    sizes = np.array([p.size for p, _ in pairs])
    cum = np.cumsum(sizes)
    worst = 0.0
    for _ in range(n_coords):
        flat = int(rng.integers(cum[-1]))
        which = int(np.searchsorted(cum, flat, side="right"))
        local = flat - (cum[which - 1] if which else 0)
        param, grad = pairs[which]
        numeric = _central_diff(eval_fn, param, local, fd_step)
        worst = max(worst, relative_error(float(grad.flat[local]), numeric))
    return SurfaceResult(name, worst, n_coords, worst < tolerance)


def _frozen(seed: int):
    """A factory of rng streams that restart identically on every call."""
    return lambda: np.random.default_rng(seed)


def _suite_fixture(seed: int):
    """Small smooth model plus batches with a safe admission margin.

    tanh everywhere: difference quotients across relu kinks would
    produce spurious failures.  The seed is advanced until no selection
    confidence sits within 1e-3 of the threshold, so the admission set
    cannot flip under the finite-difference perturbations.
    """
    tau = 0.6
    for attempt in range(50):
        rng = np.random.default_rng(seed + attempt)
        fe = netcore.init_feature_extractor([2, 5, 4], "tanh", rng)
        clf = netcore.init_classifier(4, 3, rng)
        labeled = [
            Example(rng.normal(size=2), int(rng.integers(3)), int(rng.integers(3)))
            for _ in range(6)
        ]
        for ex in labeled:
            ex.true_label = ex.label
        unlabeled = [
            Example(rng.normal(size=2) * 2.0, None, int(rng.integers(3)))
            for _ in range(8)
        ]
        aug = AugmentationSpec(0.05, 0.25, 0.2)
        sel_rng = np.random.default_rng(seed + attempt + 1000)
        x_weak = weak_augment(
            np.array([ex.features for ex in unlabeled]), aug, sel_rng
        )
        probs = netcore.forward_probs(clf, netcore.forward_features(fe, x_weak))
        conf = probs.max(axis=1)
        if np.min(np.abs(conf - tau)) > 1e-3 and (conf >= tau).any():
            return fe, clf, labeled, unlabeled, aug, tau, seed + attempt
    raise RuntimeError("could not find a fixture with a safe admission margin")


def gradcheck_suite(
    seed: int = 0,
    n_coords: int = 100,
    tolerance: float = 1e-4,
    fd_step: float = 1e-5,
) -> GradcheckReport:
    """Finite-difference audit of every gradient surface the trainer uses.

    Augmentation draws are frozen by reseeding an identical rng before
    each loss evaluation, which turns the stochastic losses into fixed
    deterministic functions of the parameters.
    """
    fe, clf, labeled, unlabeled, aug, tau, used_seed = _suite_fixture(seed)
    coord_rng = np.random.default_rng(used_seed + 7)
    policy = sslcore.fixed_threshold(tau, 3)
    fresh = _frozen(used_seed + 11)
    theta_pairs = lambda grads: list(
        zip(fe.weights + fe.biases, grads.feature_weights + grads.feature_biases)
    )
    surfaces = []

    # labeled cross-entropy: all parameters
    def eval_sup():
        loss, _ = sslcore.supervised_loss(fe, clf, labeled, aug, fresh())
        return loss

    _, g_sup = sslcore.supervised_loss(fe, clf, labeled, aug, fresh())
    pairs = theta_pairs(g_sup) + [
        (clf.weight, g_sup.classifier_weight),
        (clf.bias, g_sup.classifier_bias),
    ]
    surfaces.append(
        _check_surface("labeled_ce", eval_sup, pairs, coord_rng, n_coords, tolerance, fd_step)
    )

    # pseudo-label cross-entropy on strong views: all parameters
    def make_pseudo():
        return sslcore.select_pseudo_labels(fe, clf, unlabeled, policy, aug, fresh())

    def eval_unsup():
        loss, _ = sslcore.unsupervised_loss(fe, clf, make_pseudo(), aug, _frozen(used_seed + 13)())
        return loss

    _, g_unsup = sslcore.unsupervised_loss(
        fe, clf, make_pseudo(), aug, _frozen(used_seed + 13)()
    )
    pairs = theta_pairs(g_unsup) + [
        (clf.weight, g_unsup.classifier_weight),
        (clf.bias, g_unsup.classifier_bias),
    ]
    surfaces.append(
        _check_surface("pseudo_ce", eval_unsup, pairs, coord_rng, n_coords, tolerance, fd_step)
    )

    # same loss through the slow head: extractor and slow-head parameters
    beta_bar = clf.copy()
    beta_bar.weight += np.random.default_rng(used_seed + 17).normal(
        0.0, 0.05, size=beta_bar.weight.shape
    )

    def eval_ac():
        loss, _ = sslcore.avg_clustering_loss(
            fe, beta_bar, make_pseudo(), aug, _frozen(used_seed + 19)()
        )
        return loss

    _, g_ac = sslcore.avg_clustering_loss(
        fe, beta_bar, make_pseudo(), aug, _frozen(used_seed + 19)()
    )
    pairs = theta_pairs(g_ac) + [
        (beta_bar.weight, g_ac.classifier_weight),
        (beta_bar.bias, g_ac.classifier_bias),
    ]
    surfaces.append(
        _check_surface("ema_head_ce", eval_ac, pairs, coord_rng, n_coords, tolerance, fd_step)
    )

    # class probability as a function of the input
    probe_x = np.random.default_rng(used_seed + 23).normal(size=(4, 2))

    def eval_prob():
        feats = netcore.forward_features(fe, probe_x)
        return float(netcore.forward_probs(clf, feats)[:, 1].sum())

    g_in = netcore.grad_wrt_input(fe, clf, probe_x, 1)
    surfaces.append(
        _check_surface(
            "class_prob_vs_input",
            eval_prob,
            [(probe_x, g_in)],
            coord_rng,
            n_coords,
            tolerance,
            fd_step,
        )
    )

    # full objective, extractor parameters (the routed set is exact there)
    weights = sslcore.LossWeights(1.0, 1.0)
    ac_template = sslcore.AvgClusteringState(beta_bar.copy(), 4, 0.999, 5e-4, 1)

    def objective():
        return sslcore.overall_objective(
            fe,
            clf,
            labeled,
            unlabeled,
            policy,
            aug,
            weights,
            sslcore.AvgClusteringState(
                ac_template.beta_bar.copy(), 4, 0.999, 5e-4, 1
            ),
            _frozen(used_seed + 29)(),
            _frozen(used_seed + 31)(),
        )

    def eval_total():
        return objective().total

    g_total = objective().gradients
    surfaces.append(
        _check_surface(
            "combined_objective_features",
            eval_total,
            theta_pairs(g_total),
            coord_rng,
            n_coords,
            tolerance,
            fd_step,
        )
    )

    return GradcheckReport(surfaces, tolerance)


# ---------------------------------------------------------------------------
# report rendering


@dataclass
class CheckRow:
    check: str
    quantity: str
    value: float
    threshold: float | None
    passed: bool | None

    def csv(self) -> str:
        thr = "" if self.threshold is None else repr(self.threshold)
        ok = "" if self.passed is None else str(self.passed).lower()
        return f"{self.check},{self.quantity},{repr(float(self.value))},{thr},{ok}"


REPORT_HEADER = "check,quantity,value,threshold,pass"


def render_csv(rows) -> str:
    return "\n".join([REPORT_HEADER, *[r.csv() for r in rows]]) + "\n"


def render_text(rows) -> str:
    lines = []
    for r in rows:
        status = "" if r.passed is None else ("  [ok]" if r.passed else "  [FAIL]")
        thr = "" if r.threshold is None else f" (threshold {r.threshold:g})"
        lines.append(f"{r.check:10s} {r.quantity:34s} {r.value: .6e}{thr}{status}")
    return "\n".join(lines) + "\n"
