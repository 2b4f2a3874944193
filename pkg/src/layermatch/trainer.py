"""Training loop: SGD with momentum, cosine decay, model EMAs, periodic
evaluation with pseudo-label quality metrics, and checkpoint/CSV output.

Four methods share the loop and differ only in which loss terms they
keep and whether gradient routing is on:

  supervised_only  labeled cross-entropy, nothing else
  pseudo_label     adds thresholded pseudo-labels, no strong views
  fixmatch         pseudo-labels with strong views, no routing
  layermatch       routing on, slow EMA head on
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, netcore, sslcore
from .data import AugmentationSpec, DatasetSpec
from .netcore import ClassifierParams, FeatureExtractorParams, GradientSet

METHODS = ("supervised_only", "pseudo_label", "fixmatch", "layermatch")

METRICS_HEADER = "iteration,loss_s,loss_u,loss_ac,test_acc,gamma,upsilon,tau,lr"


@dataclass
class TrainConfig:
    # optimization
    total_iterations: int = 5000
    lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    b_l: int = 8
    b_u: int = 32
    # method and losses
    method: str = "layermatch"
    w_u: float = 1.0
    w_ac: float = 1.0
    threshold_kind: str = "fixed"
    tau: float = 0.95
    tau_momentum: float = 0.999
    # avg-clustering head
    ac_period: int = 2048
    ac_momentum: float = 0.999
    ac_step_size: float = 5e-4
    # EMAs
    model_ema_momentum: float = 0.999
    prediction_ema_momentum: float = 0.999
    pseudo_from_ema: bool = False
    # architecture
    hidden_dims: tuple = (32, 32)
    activation: str = "relu"
    # data
    generator: str = "two_moons"
    n_samples: int = 2008
    noise_sigma: float = 0.3
    num_classes: int = 2
    labels_per_class: int = 4
    test_samples: int = 1000
    images_path: str | None = None
    labels_path: str | None = None
    # augmentation
    weak_jitter_sigma: float = 0.05
    strong_jitter_sigma: float = 0.25
    strong_mask_prob: float = 0.2
    # bookkeeping
    eval_every: int = 250
    seed: int = 0
    # switches for ablations and probes
    grad_relu: bool = True
    share_strong_aug: bool = False
    ac_theta_coupling: bool = True
    eval_beta_bar: bool = False
    pseudo_label_shift: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        for name in ("sgd_momentum", "model_ema_momentum", "prediction_ema_momentum",
                     "ac_momentum", "tau_momentum"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.ac_period < 1:
            raise ValueError("ac_period must be >= 1")
        if self.ac_step_size <= 0:
            raise ValueError("ac_step_size must be > 0")
        if self.b_l < 1:
            raise ValueError("b_l must be >= 1")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        self.dataset_spec().validate()
        self.augmentation_spec().validate()
        self.threshold_policy().validate()
        sslcore.LossWeights(self.w_u, self.w_ac).validate()

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            self.generator,
            self.n_samples,
            self.noise_sigma,
            self.num_classes,
            self.seed,
            self.labels_per_class,
            self.images_path,
            self.labels_path,
        )

    def augmentation_spec(self) -> AugmentationSpec:
        return AugmentationSpec(
            self.weak_jitter_sigma, self.strong_jitter_sigma, self.strong_mask_prob
        )

    def threshold_policy(self) -> sslcore.ThresholdPolicy:
        if self.threshold_kind == "adaptive":
            return sslcore.adaptive_threshold(self.tau, self.tau_momentum, self.num_classes)
        return sslcore.fixed_threshold(self.tau, self.num_classes)


@dataclass
class MetricsRecord:
    iteration: int
    loss_s: float
    loss_u: float
    loss_ac: float
    test_acc: float
    gamma: float
    upsilon: float | None  # None when nothing was admitted
    tau: float
    lr: float

    def csv_row(self) -> str:
        ups = "" if self.upsilon is None else repr(self.upsilon)
        return ",".join(
            [
                str(self.iteration),
                repr(self.loss_s),
                repr(self.loss_u),
                repr(self.loss_ac),
                repr(self.test_acc),
                repr(self.gamma),
                ups,
                repr(self.tau),
                repr(self.lr),
            ]
        )


@dataclass
class ModelState:
    """A feature extractor plus its classifier head."""

    fe: FeatureExtractorParams
    clf: ClassifierParams

    def copy(self) -> "ModelState":
        return ModelState(self.fe.copy(), self.clf.copy())

    def matrices(self) -> list:
        return netcore.model_matrices(self.fe, self.clf)


@dataclass
class DataBundle:
    d_l: list
    d_u: list
    test: list

    @property
    def input_dim(self) -> int:
        pool = self.d_l or self.d_u or self.test
        return len(pool[0].features)


@dataclass
class TrainResult:
    model: ModelState
    model_ema: ModelState | None
    ac_state: sslcore.AvgClusteringState | None
    policy: sslcore.ThresholdPolicy
    metrics: list
    snapshots: list = field(default_factory=list)  # (iteration, ModelState) at evals

    def eval_model(self) -> ModelState:
        return self.model_ema if self.model_ema is not None else self.model


def cosine_lr(k: int, total: int, eta0: float) -> float:
    """Decayed learning rate eta0 * cos(7*pi*k / (16*total))."""
    if k > total:
        raise ValueError(f"iteration {k} beyond total {total}")
    if total == 0:
        return eta0
    return eta0 * math.cos(7.0 * math.pi * k / (16.0 * total))


def sgd_step(param, grad, velocity, lr: float, momentum: float, weight_decay: float):
    """One momentum-SGD update on a single array.

    velocity <- momentum*velocity + (grad + weight_decay*param)
    param    <- param - lr*velocity
    """
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError("param, grad and velocity shapes must match")
    v = momentum * velocity + (grad + weight_decay * param)
    return param - lr * v, v


def apply_sgd(
    model: ModelState,
    grads: GradientSet,
    velocities: list,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place momentum-SGD over every parameter matrix of the model."""
    params = model.matrices()
    # model_matrices interleaves (W, b) per layer; rebuild matching order
    gmats = []
    for dw, db in zip(grads.feature_weights, grads.feature_biases):
        gmats.extend([dw, db])
    gmats.extend([grads.classifier_weight, grads.classifier_bias])
    if len(gmats) != len(params) or len(velocities) != len(params):
        raise ValueError("gradient/velocity layout does not match the model")
    for p, g, v in zip(params, gmats, velocities):
        new_p, new_v = sgd_step(p, g, v, lr, momentum, weight_decay)
        p[...] = new_p
        v[...] = new_v


def zero_velocities(model: ModelState) -> list:
    return [np.zeros_like(m) for m in model.matrices()]


def update_model_ema(ema: ModelState, live: ModelState, momentum: float) -> None:
    """ema <- momentum*ema + (1-momentum)*live, coordinate-wise, in place."""
    for e, l in zip(ema.matrices(), live.matrices()):
        if e.shape != l.shape:
            raise ValueError("EMA and live model shapes do not match")
        e *= momentum
        e += (1.0 - momentum) * l


def evaluate(model: ModelState, test_set) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if not test_set:
        raise ValueError("test set is empty")
    x = data.stack_features(test_set)
    probs = netcore.forward_probs(model.clf, netcore.forward_features(model.fe, x))
    pred = probs.argmax(axis=1)
    return float(np.mean(pred == data.stack_true_labels(test_set)))


def admitted_fraction(model: ModelState, x: np.ndarray, tau: float) -> float:
    """Fraction of rows whose max class probability reaches tau (raw inputs)."""
    if x.shape[0] == 0:
        return 0.0
    probs = netcore.forward_probs(model.clf, netcore.forward_features(model.fe, x))
    return float(np.mean(probs.max(axis=1) >= tau))


def compute_gamma_upsilon(model: ModelState, d_u_full, policy) -> tuple:
    """Pseudo-label coverage and precision over the whole unlabeled pool.

    gamma = admitted / |D_U| at the policy's current threshold;
    upsilon = correctly-labeled fraction of the admitted, or None when
    nothing is admitted.  Predictions run on the raw stored features.
    """
    if not d_u_full:
        return 0.0, None
    x = data.stack_features(d_u_full)
    probs = netcore.forward_probs(model.clf, netcore.forward_features(model.fe, x))
    conf = probs.max(axis=1)
    admitted = conf >= policy.effective_tau
    n_adm = int(admitted.sum())
    gamma = n_adm / len(d_u_full)
    if n_adm == 0:
        return gamma, None
    pred = probs[admitted].argmax(axis=1)
    truth = data.stack_true_labels(d_u_full)[admitted]
    return gamma, float(np.mean(pred == truth))


def prepare_data(config: TrainConfig) -> DataBundle:
    """Generate, split and hold out a test set, all seeded from config."""
    train_examples = data.generate(config.dataset_spec())
    d_l, d_u = data.split(train_examples, config.labels_per_class, config.seed)
    if config.generator == "idx_file":
        # image pairs carry their own test split upstream; reuse the pool
        test = train_examples
    else:
        test_spec = config.dataset_spec()
        test_spec.n_samples = config.test_samples
        test_spec.seed = config.seed + 1
        test = data.generate(test_spec)
    return DataBundle(d_l, d_u, test)


def _rng_streams(seed: int):
    root = np.random.SeedSequence(seed)
    init_ss, sampler_ss, labeled_ss, unlabeled_ss = root.spawn(4)
    return (
        np.random.default_rng(init_ss),
        sampler_ss,
        np.random.default_rng(labeled_ss),
        np.random.default_rng(unlabeled_ss),
    )


def init_model(config: TrainConfig, input_dim: int, rng) -> ModelState:
    dims = [input_dim, *config.hidden_dims]
    fe = netcore.init_feature_extractor(dims, config.activation, rng)
    clf = netcore.init_classifier(dims[-1], config.num_classes, rng)
    return ModelState(fe, clf)


def run(config: TrainConfig, bundle: DataBundle | None = None) -> TrainResult:
    """Train for config.total_iterations steps and collect metrics.

    Deterministic for a fixed config: all randomness is derived from
    config.seed through independent named streams (init, batch order,
    labeled augmentation, unlabeled augmentation).
    """
    config.validate()
    if bundle is None:
        bundle = prepare_data(config)
    init_rng, sampler_ss, labeled_rng, unlabeled_rng = _rng_streams(config.seed)

    model = init_model(config, bundle.input_dim, init_rng)
    velocities = zero_velocities(model)
    model_ema = model.copy() if config.model_ema_momentum > 0 else None
    pred_ema = model.copy() if config.pseudo_from_ema else None

    policy = config.threshold_policy()
    weights = sslcore.LossWeights(config.w_u, config.w_ac)
    aug_spec = config.augmentation_spec()
    ac_state = None
    if config.method == "layermatch":
        ac_state = sslcore.AvgClusteringState(
            model.clf.copy(), config.ac_period, config.ac_momentum, config.ac_step_size
        )

    # keep b_u for every method so batch order stays aligned across them
    sampler = data.batch_sampler(bundle.d_l, bundle.d_u, config.b_l, config.b_u, sampler_ss)

    metrics: list = []
    snapshots: list = []
    total = config.total_iterations
    for k in range(total):
        lr = cosine_lr(k, total, config.lr)
        batch_l, batch_u = next(sampler)

        if config.method == "supervised_only":
            loss_s, grads = sslcore.supervised_loss(
                model.fe, model.clf, batch_l, aug_spec, labeled_rng
            )
            loss_u = loss_ac = 0.0
            confidences = np.empty(0)
        else:
            selection = None
            if config.pseudo_from_ema and pred_ema is not None:
                selection = (pred_ema.fe, pred_ema.clf)
            result = sslcore.overall_objective(
                model.fe,
                model.clf,
                batch_l,
                batch_u,
                policy,
                aug_spec,
                weights,
                ac_state,
                labeled_rng,
                unlabeled_rng,
                selection_model=selection,
                loss_augment="weak" if config.method == "pseudo_label" else "strong",
                route=config.grad_relu if config.method == "layermatch" else False,
                share_strong_aug=config.share_strong_aug,
                ac_theta_coupling=config.ac_theta_coupling,
                pseudo_label_shift=config.pseudo_label_shift,
            )
            loss_s, loss_u, loss_ac = result.loss_s, result.loss_u, result.loss_ac
            grads = result.gradients
            ac_state = result.ac_state
            confidences = result.confidences

        if not (math.isfinite(loss_s) and math.isfinite(loss_u) and math.isfinite(loss_ac)):
            raise RuntimeError(
                f"non-finite loss at iteration {k}: "
                f"loss_s={loss_s}, loss_u={loss_u}, loss_ac={loss_ac}"
            )

        apply_sgd(model, grads, velocities, lr, config.sgd_momentum, config.weight_decay)
        if model_ema is not None:
            update_model_ema(model_ema, model, config.model_ema_momentum)
        if pred_ema is not None:
            update_model_ema(pred_ema, model, config.prediction_ema_momentum)
        if policy.kind == "adaptive" and len(confidences):
            policy = sslcore.update_adaptive_threshold(policy, confidences)

        step = k + 1
        if config.eval_every > 0 and (step % config.eval_every == 0 or step == total):
            if ac_state is not None and config.eval_beta_bar:
                eval_model = ModelState(
                    (model_ema or model).fe, ac_state.beta_bar
                )
            else:
                eval_model = model_ema if model_ema is not None else model
            acc = evaluate(eval_model, bundle.test)
            gamma, upsilon = compute_gamma_upsilon(eval_model, bundle.d_u, policy)
            metrics.append(
                MetricsRecord(
                    step, loss_s, loss_u, loss_ac, acc, gamma, upsilon,
                    policy.effective_tau, lr,
                )
            )
            snapshots.append((step, eval_model.copy()))

    return TrainResult(model, model_ema, ac_state, policy, metrics, snapshots)


def write_metrics_csv(records, path) -> None:
    """One row per eval, header fixed, empty field for an absent upsilon."""
    lines = [METRICS_HEADER]
    lines.extend(r.csv_row() for r in records)
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list:
    """Inverse of write_metrics_csv."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        out.append(
            MetricsRecord(
                int(parts[0]),
                float(parts[1]),
                float(parts[2]),
                float(parts[3]),
                float(parts[4]),
                float(parts[5]),
                None if parts[6] == "" else float(parts[6]),
                float(parts[7]),
                float(parts[8]),
            )
        )
    return out


def save_checkpoint(path, model: ModelState) -> None:
    netcore.save_matrices(path, model.matrices())


def load_checkpoint(path, template: ModelState) -> ModelState:
    """Restore a checkpoint into a copy of an architecture-matching model."""
    model = template.copy()
    netcore.assign_model_matrices(model.fe, model.clf, netcore.load_matrices(path))
    return model
