"""Pseudo-labeling core: selection, the three losses, gradient routing,
and the slow EMA classifier head.

The one structural idea here is that the linear classifier only ever
learns from labeled data.  ``grad_relu_route`` enforces it by building
the update from the supervised classifier gradient alone, while feature
layers receive every loss term.  A second classifier (``beta_bar``)
trains on pseudo-labels through its own EMA update and periodically
resyncs from the live head.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import netcore
from .data import AugmentationSpec, stack_features, stack_true_labels, strong_augment, weak_augment
from .netcore import ClassifierParams, FeatureExtractorParams, GradientSet

PROB_FLOOR = 1e-12


@dataclass
class ThresholdPolicy:
    """Confidence gate for pseudo-label admission.

    kind is "fixed" (use tau forever) or "adaptive" (current_tau tracks
    an EMA of the batch mean max-confidence).
    """

    kind: str = "fixed"
    tau: float = 0.95
    ema_momentum: float = 0.999
    current_tau: float = 0.95
    num_classes: int = 2

    def validate(self) -> None:
        if self.kind not in ("fixed", "adaptive"):
            raise ValueError(f"unknown threshold kind {self.kind!r}")
        lo = 1.0 / self.num_classes
        if not lo < self.tau < 1.0:
            raise ValueError(f"tau must lie in ({lo}, 1), got {self.tau}")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError("ema_momentum must lie in [0, 1)")

    @property
    def effective_tau(self) -> float:
        return self.current_tau if self.kind == "adaptive" else self.tau


def fixed_threshold(tau: float, num_classes: int) -> ThresholdPolicy:
    p = ThresholdPolicy("fixed", tau, 0.0, tau, num_classes)
    p.validate()
    return p


def adaptive_threshold(tau0: float, momentum: float, num_classes: int) -> ThresholdPolicy:
    p = ThresholdPolicy("adaptive", tau0, momentum, tau0, num_classes)
    p.validate()
    return p


@dataclass
class PseudoBatch:
    """Admitted unlabeled examples with their one-hot pseudo-labels.

    inputs are the ORIGINAL (unaugmented) features; augmentation for
    the losses happens at loss time.  true_labels are diagnostics only.
    """

    inputs: np.ndarray  # (n, d)
    pseudo_labels: np.ndarray  # (n, num_classes) one-hot
    confidences: np.ndarray  # (n,)
    true_labels: np.ndarray  # (n,)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def empty_pseudo_batch(dim: int, num_classes: int) -> PseudoBatch:
    return PseudoBatch(
        np.empty((0, dim)),
        np.empty((0, num_classes)),
        np.empty(0),
        np.empty(0, dtype=np.int64),
    )


@dataclass
class AvgClusteringState:
    """Slow classifier head and its update hyperparameters."""

    beta_bar: ClassifierParams
    period: int  # resync every this many iterations
    momentum: float
    step_size: float
    iteration: int = 0


@dataclass
class LossWeights:
    w_u: float = 1.0
    w_ac: float = 1.0

    def validate(self) -> None:
        if not (np.isfinite(self.w_u) and np.isfinite(self.w_ac)):
            raise ValueError("loss weights must be finite")
        if self.w_u < 0 or self.w_ac < 0:
            raise ValueError("loss weights must be >= 0")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean CE against one-hot targets, probs clamped before the log."""
    clamped = np.clip(probs, PROB_FLOOR, 1.0)
    return float(-np.mean(np.sum(targets * np.log(clamped), axis=1)))


def select_pseudo_labels(
    fe: FeatureExtractorParams,
    clf: ClassifierParams,
    unlabeled_batch,
    policy: ThresholdPolicy,
    aug_spec: AugmentationSpec,
    rng,
    probs: np.ndarray | None = None,
) -> PseudoBatch:
    """Admit examples whose weak-view max class probability clears tau.

    Predictions come from weakly augmented inputs; the stored inputs are
    the originals.  Pass ``probs`` to reuse predictions already computed
    on the weak views (no rng draw happens then).
    """
    num_classes = clf.num_classes
    if not unlabeled_batch:
        return empty_pseudo_batch(0, num_classes)
    x = stack_features(unlabeled_batch)
    if probs is None:
        x_weak = weak_augment(x, aug_spec, rng)
        probs = netcore.forward_probs(clf, netcore.forward_features(fe, x_weak))
    conf = probs.max(axis=1)
    admitted = conf >= policy.effective_tau
    if not admitted.any():
        return empty_pseudo_batch(x.shape[1], num_classes)
    pred = probs[admitted].argmax(axis=1)
    return PseudoBatch(
        np.ascontiguousarray(x[admitted]),
        one_hot(pred, num_classes),
        conf[admitted],
        stack_true_labels(unlabeled_batch)[admitted],
    )


def _batch_ce_and_grads(
    fe: FeatureExtractorParams,
    head: ClassifierParams,
    x_aug: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, GradientSet]:
    """CE loss and gradients for an already-augmented batch.

    The head may be the live classifier or beta_bar; the GradientSet's
    classifier slot carries whichever head was used.
    """
    cache = netcore.forward_model(fe, head, x_aug)
    loss = _cross_entropy(cache.probs, targets)
    dlogits = (cache.probs - targets) / x_aug.shape[0]
    return loss, netcore.backward(fe, head, cache, dlogits)


def supervised_loss(
    fe: FeatureExtractorParams,
    clf: ClassifierParams,
    labeled_batch,
    aug_spec: AugmentationSpec,
    rng,
) -> tuple[float, GradientSet]:
    """Mean CE over weakly augmented labeled examples."""
    if not labeled_batch:
        raise ValueError("supervised loss needs a nonempty labeled batch")
    x = stack_features(labeled_batch)
    y = one_hot(
        np.array([ex.label for ex in labeled_batch], dtype=np.int64), clf.num_classes
    )
    x_weak = weak_augment(x, aug_spec, rng)
    return _batch_ce_and_grads(fe, clf, x_weak, y)


def unsupervised_loss(
    fe: FeatureExtractorParams,
    clf: ClassifierParams,
    pseudo_batch: PseudoBatch,
    aug_spec: AugmentationSpec,
    rng,
    augment: str = "strong",
) -> tuple[float, GradientSet]:
    """Mean CE between strong-view predictions and stored pseudo-labels.

    Normalized by the admitted count; an empty batch costs nothing and
    moves nothing.  ``augment="weak"`` supports the no-strong-view
    baseline.
    """
    if pseudo_batch.size == 0:
        return 0.0, netcore.zeros_like_grads(fe, clf)
    aug = strong_augment if augment == "strong" else weak_augment
    x_aug = aug(pseudo_batch.inputs, aug_spec, rng)
    return _batch_ce_and_grads(fe, clf, x_aug, pseudo_batch.pseudo_labels)


def avg_clustering_loss(
    fe: FeatureExtractorParams,
    beta_bar: ClassifierParams,
    pseudo_batch: PseudoBatch,
    aug_spec: AugmentationSpec,
    rng,
    augment: str = "strong",
) -> tuple[float, GradientSet]:
    """Same functional form as the unsupervised loss, head swapped to beta_bar.

    In the returned GradientSet the feature slots are the extractor
    gradients (they go to the main optimizer) and the classifier slots
    are beta_bar's own gradients (they go only to update_avg_classifier).
    """
    return unsupervised_loss(fe, beta_bar, pseudo_batch, aug_spec, rng, augment)


def _check_same_shapes(a: GradientSet, b: GradientSet, label: str) -> None:
    for x, y in zip(a.feature_weights, b.feature_weights):
        if x.shape != y.shape:
            raise ValueError(f"{label}: feature gradient shape {y.shape} != {x.shape}")
    if a.classifier_weight.shape != b.classifier_weight.shape:
        raise ValueError(f"{label}: classifier gradient shape mismatch")


def grad_relu_route(
    grads_s: GradientSet,
    grads_u: GradientSet | None,
    grads_ac_theta: GradientSet | None,
    weights: LossWeights,
) -> GradientSet:
    """Combine per-loss gradients with the classifier head walled off.

    Feature layers get grads_s + w_u*grads_u + w_ac*grads_ac_theta.
    The classifier slot is an exact copy of the supervised gradient;
    nothing from the other losses reaches it, whatever the weights say.
    """
    routed = GradientSet(
        [g.copy() for g in grads_s.feature_weights],
        [g.copy() for g in grads_s.feature_biases],
        grads_s.classifier_weight.copy(),
        grads_s.classifier_bias.copy(),
    )
    # skip zero-weight terms entirely so the w=0 path is bit-exact
    if grads_u is not None and weights.w_u != 0.0:
        _check_same_shapes(grads_s, grads_u, "unsupervised")
        for dst, src in zip(routed.feature_weights, grads_u.feature_weights):
            dst += weights.w_u * src
        for dst, src in zip(routed.feature_biases, grads_u.feature_biases):
            dst += weights.w_u * src
    if grads_ac_theta is not None and weights.w_ac != 0.0:
        _check_same_shapes(grads_s, grads_ac_theta, "avg-clustering")
        for dst, src in zip(routed.feature_weights, grads_ac_theta.feature_weights):
            dst += weights.w_ac * src
        for dst, src in zip(routed.feature_biases, grads_ac_theta.feature_biases):
            dst += weights.w_ac * src
    return routed


def unrouted_sum(
    grads_s: GradientSet,
    grads_u: GradientSet | None,
    weights: LossWeights,
) -> GradientSet:
    """Plain weighted gradient sum, classifier included (routing ablation).

    beta_bar's gradients still stay out: they belong to a different head.
    """
    total = grads_s.copy()
    if grads_u is not None and weights.w_u != 0.0:
        total.add_scaled(grads_u, weights.w_u)
    return total


def update_avg_classifier(
    state: AvgClusteringState,
    live_beta: ClassifierParams,
    grad_weight: np.ndarray,
    grad_bias: np.ndarray,
) -> AvgClusteringState:
    """Advance the slow head one iteration.

    On resync iterations (t mod period == 0) beta_bar becomes an exact
    copy of the live classifier.  Otherwise it takes a small gradient
    step and is folded back into the EMA:
        candidate = beta_bar - step_size * grad
        beta_bar  = momentum * beta_bar + (1 - momentum) * candidate
    """
    bb = state.beta_bar
    if grad_weight.shape != bb.weight.shape or grad_bias.shape != bb.bias.shape:
        raise ValueError("avg-clustering gradient shape does not match beta_bar")
    if state.iteration % state.period == 0:
        if live_beta.weight.shape != bb.weight.shape:
            raise ValueError("live classifier shape does not match beta_bar")
        new_bb = live_beta.copy()
    else:
        cand_w = bb.weight - state.step_size * grad_weight
        cand_b = bb.bias - state.step_size * grad_bias
        new_bb = ClassifierParams(
            state.momentum * bb.weight + (1.0 - state.momentum) * cand_w,
            state.momentum * bb.bias + (1.0 - state.momentum) * cand_b,
        )
    return AvgClusteringState(
        new_bb, state.period, state.momentum, state.step_size, state.iteration + 1
    )


def update_adaptive_threshold(
    policy: ThresholdPolicy, confidences: np.ndarray
) -> ThresholdPolicy:
    """EMA the threshold toward the batch mean max-confidence."""
    if policy.kind != "adaptive":
        raise ValueError("update_adaptive_threshold needs an adaptive policy")
    if len(confidences) == 0:
        return policy
    m = policy.ema_momentum
    new_tau = m * policy.current_tau + (1.0 - m) * float(np.mean(confidences))
    lo = 1.0 / policy.num_classes + 1e-6
    hi = 1.0 - 1e-6
    return dataclasses.replace(policy, current_tau=min(max(new_tau, lo), hi))


@dataclass
class ObjectiveResult:
    """Everything one optimization step produces."""

    total: float
    loss_s: float
    loss_u: float
    loss_ac: float
    gradients: GradientSet
    ac_state: AvgClusteringState | None
    pseudo_batch: PseudoBatch
    confidences: np.ndarray  # weak-view max-prob of every unlabeled example


def overall_objective(
    fe: FeatureExtractorParams,
    clf: ClassifierParams,
    labeled_batch,
    unlabeled_batch,
    policy: ThresholdPolicy,
    aug_spec: AugmentationSpec,
    weights: LossWeights,
    ac_state: AvgClusteringState | None,
    labeled_rng,
    unlabeled_rng,
    selection_model: tuple | None = None,
    loss_augment: str = "strong",
    route: bool = True,
    share_strong_aug: bool = False,
    ac_theta_coupling: bool = True,
    pseudo_label_shift: int = 0,
) -> ObjectiveResult:
    """One full objective evaluation: L_s + w_u*L_u + w_ac*L_ac.

    Fixed composition order: weak views of the unlabeled batch,
    selection, supervised loss, unsupervised loss, avg-clustering loss,
    routing, slow-head update.  Labeled and unlabeled augmentation draw
    from separate rng streams, so a run whose unsupervised terms carry
    zero weight consumes exactly the same labeled noise as a
    supervised-only run.

    selection_model optionally supplies (fe, clf) for admission
    decisions (e.g. a prediction-EMA model); losses always use the live
    parameters.  pseudo_label_shift rotates every admitted label by that
    many classes; it exists to probe that the classifier never learns
    from pseudo-labels.
    """
    num_classes = clf.num_classes
    sel_fe, sel_clf = selection_model if selection_model is not None else (fe, clf)
    if unlabeled_batch:
        x_u = stack_features(unlabeled_batch)
        x_weak = weak_augment(x_u, aug_spec, unlabeled_rng)
        sel_probs = netcore.forward_probs(sel_clf, netcore.forward_features(sel_fe, x_weak))
        confidences = sel_probs.max(axis=1)
        pseudo = select_pseudo_labels(
            fe, clf, unlabeled_batch, policy, aug_spec, unlabeled_rng, probs=sel_probs
        )
    else:
        confidences = np.empty(0)
        pseudo = empty_pseudo_batch(0, num_classes)
    if pseudo_label_shift and pseudo.size:
        pseudo = dataclasses.replace(
            pseudo, pseudo_labels=np.roll(pseudo.pseudo_labels, pseudo_label_shift, axis=1)
        )

    loss_s, grads_s = supervised_loss(fe, clf, labeled_batch, aug_spec, labeled_rng)

    loss_u, loss_ac = 0.0, 0.0
    grads_u, grads_ac = None, None
    new_ac_state = ac_state
    if pseudo.size:
        aug = strong_augment if loss_augment == "strong" else weak_augment
        x_loss = aug(pseudo.inputs, aug_spec, unlabeled_rng)
        loss_u, grads_u = _batch_ce_and_grads(fe, clf, x_loss, pseudo.pseudo_labels)
        if ac_state is not None:
            x_ac = x_loss if share_strong_aug else aug(pseudo.inputs, aug_spec, unlabeled_rng)
            loss_ac, grads_ac = _batch_ce_and_grads(
                fe, ac_state.beta_bar, x_ac, pseudo.pseudo_labels
            )

    if route:
        ac_theta = grads_ac if ac_theta_coupling else None
        gradients = grad_relu_route(grads_s, grads_u, ac_theta, weights)
    else:
        gradients = unrouted_sum(grads_s, grads_u, weights)
        if grads_ac is not None and ac_theta_coupling and weights.w_ac != 0.0:
            for dst, src in zip(gradients.feature_weights, grads_ac.feature_weights):
                dst += weights.w_ac * src
            for dst, src in zip(gradients.feature_biases, grads_ac.feature_biases):
                dst += weights.w_ac * src

    if ac_state is not None:
        if grads_ac is not None:
            gw, gb = grads_ac.classifier_weight, grads_ac.classifier_bias
        else:
            gw = np.zeros_like(ac_state.beta_bar.weight)
            gb = np.zeros_like(ac_state.beta_bar.bias)
        new_ac_state = update_avg_classifier(ac_state, clf, gw, gb)

    total = loss_s + weights.w_u * loss_u + weights.w_ac * loss_ac
    return ObjectiveResult(
        total, loss_s, loss_u, loss_ac, gradients, new_ac_state, pseudo, confidences
    )
