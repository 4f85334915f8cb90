"""Four-route consistency training.

A batch is passed through the shared-weight network along up to four routes:
the original view, an image-perturbed view, a feature-perturbed view, and a
view perturbed at both levels. Each route contributes a cross-entropy term,
and a Jensen-Shannon consistency term pulls every route toward the mean
prediction. Optimization is SGD with Nesterov momentum, weight decay, and a
single cosine learning-rate cycle over all steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, augment_batch
from .model import CnnConfig, ModelParams, forward, init_params
from .perturb import PerturbConfig
from .tensor import Rng, Tensor, backward, softmax, xlogy

ROUTES = ("O", "I", "F", "IF")


@dataclass
class RoutePredictions:
    """Softmax outputs per enabled route, each of shape (N, classes)."""

    probs: dict[str, Tensor]

    def __post_init__(self):
        unknown = set(self.probs) - set(ROUTES)
        if unknown:
            raise ValueError(f"unknown routes {sorted(unknown)}; valid routes are {ROUTES}")
        if not self.probs:
            raise ValueError("at least one route must be enabled")

    def enabled(self) -> list[str]:
        return [r for r in ROUTES if r in self.probs]


@dataclass
class LossBreakdown:
    l_cls: Tensor
    l_cons: Tensor
    total: Tensor
    per_route_cls: dict[str, float]


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 32
    lam: float = 5.0
    seed: int = 0
    routes: tuple[str, ...] = ROUTES
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: CnnConfig = field(default_factory=CnnConfig)

    def __post_init__(self):
        self.routes = tuple(self.routes)
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        unknown = set(self.routes) - set(ROUTES)
        if unknown or not self.routes:
            raise ValueError(f"routes must be a nonempty subset of {ROUTES}, got {self.routes}")
        if len(set(self.routes)) != len(self.routes):
            raise ValueError(f"duplicate routes in {self.routes}")


def four_route_forward(x: np.ndarray, params: ModelParams, cfg: TrainConfig,
                       rng: Rng, training: bool = True) -> RoutePredictions:
    """Predictions along the enabled routes.

    The image-perturbed view is drawn once per batch and shared by the I and
    IF routes. Consumption order from ``rng``: augmentation draws (if I or IF
    is enabled), then the F-route perturbation, then the IF-route perturbation.
    """
    routes = cfg.routes
    x_plain = Tensor(x)
    x_aug = None
    if "I" in routes or "IF" in routes:
        x_aug = Tensor(augment_batch(np.asarray(x, dtype=np.float32), rng, cfg.augment))

    probs: dict[str, Tensor] = {}
    if "O" in routes:
        probs["O"] = softmax(forward(x_plain, params, cfg.model), axis=1)
    if "F" in routes:
        probs["F"] = softmax(forward(x_plain, params, cfg.model,
                                     perturb=(cfg.perturb, rng), training=training), axis=1)
    if "I" in routes:
        probs["I"] = softmax(forward(x_aug, params, cfg.model), axis=1)
    if "IF" in routes:
        probs["IF"] = softmax(forward(x_aug, params, cfg.model,
                                      perturb=(cfg.perturb, rng), training=training), axis=1)
    return RoutePredictions(probs)


def mean_prediction(preds: RoutePredictions) -> Tensor:
    routes = preds.enabled()
    total = None
    for r in routes:
        total = preds.probs[r] if total is None else total + preds.probs[r]
    return total * (1.0 / len(routes))


def _check_distribution(data: np.ndarray, name: str) -> None:
    if np.any(data < 0):
        raise ValueError(f"{name} has negative entries")
    sums = data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ValueError(f"{name} rows do not sum to 1 (max deviation "
                         f"{float(np.max(np.abs(sums - 1.0))):.3g})")


def js_divergence(p, q):
    """Jensen-Shannon divergence in nats along the last axis.

    JS(p, q) = KLD(p || m)/2 + KLD(q || m)/2 with m = (p + q)/2 and the
    0*log(0) = 0 convention. Symmetric, bounded by ln 2. Accepts tensors or
    array-likes; returns a Tensor with the last axis reduced.
    """
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    _check_distribution(p.data, "p")
    _check_distribution(q.data, "q")
    m = (p + q) * 0.5
    last = p.ndim - 1
    kl_pm = (xlogy(p, p) - xlogy(p, m)).sum(axis=last)
    kl_qm = (xlogy(q, q) - xlogy(q, m)).sum(axis=last)
    return (kl_pm + kl_qm) * 0.5


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the true class, from probabilities."""
    labels = np.asarray(labels)
    k = probs.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    return -(probs.pick(labels).log().mean())


def classification_loss(preds: RoutePredictions, labels: np.ndarray) -> tuple[Tensor, dict[str, float]]:
    """Per-route batch-mean cross-entropy, summed over enabled routes."""
    total = None
    per_route: dict[str, float] = {}
    for r in preds.enabled():
        ce = cross_entropy(preds.probs[r], labels)
        per_route[r] = ce.item()
        total = ce if total is None else total + ce
    return total, per_route


def consistency_loss(preds: RoutePredictions) -> Tensor:
    """Batch mean of the summed JS divergences between each route and the mean prediction."""
    routes = preds.enabled()
    if len(routes) < 2:
        return Tensor(np.zeros((), dtype=preds.probs[routes[0]].dtype))
    p_mean = mean_prediction(preds)
    total = None
    for r in routes:
        d = js_divergence(p_mean, preds.probs[r])
        total = d if total is None else total + d
    return total.mean()


def total_loss(l_cls: Tensor, l_cons: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0 or (not l_cons.requires_grad and float(l_cons.data) == 0.0):
        return l_cls
    return l_cls + lam * l_cons


def compute_losses(preds: RoutePredictions, labels: np.ndarray, lam: float) -> LossBreakdown:
    l_cls, per_route = classification_loss(preds, labels)
    if lam > 0 and len(preds.enabled()) >= 2:
        l_cons = consistency_loss(preds)
    else:
        l_cons = Tensor(np.zeros((), dtype=l_cls.dtype))
    return LossBreakdown(l_cls=l_cls, l_cons=l_cons,
                         total=total_loss(l_cls, l_cons, lam),
                         per_route_cls=per_route)


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], state: SgdState,
             lr: float, momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
    """One Nesterov-momentum update: v <- m*v + d, theta <- theta - lr*(d + m*v),
    with d = grad + weight_decay * theta."""
    names = {name for name, _ in params.named()}
    if set(grads) != names:
        raise ValueError(f"gradient map does not match parameters: "
                         f"missing {sorted(names - set(grads))}, extra {sorted(set(grads) - names)}")
    for name, p in params.named():
        d = grads[name]
        if weight_decay:
            d = d + np.asarray(weight_decay, dtype=p.data.dtype) * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + d
        state.velocity[name] = v
        p.data -= np.asarray(lr, dtype=p.data.dtype) * (d + momentum * v)


def cosine_lr(t: int, total_steps: int, lr0: float) -> float:
    """Single cosine cycle from lr0 at t=0 down to 0 at t=total_steps."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


def fit(images: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> tuple[ModelParams, list[dict]]:
    """Train from scratch; returns the parameters and a per-epoch log.

    Fully deterministic per cfg.seed: the root stream splits into
    (init, epoch shuffling, per-batch perturbation) children, consumed in a
    fixed order.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(images) == 0 or len(images) != len(labels):
        raise ValueError(f"bad dataset: {len(images)} images, {len(labels)} labels")
    if cfg.model.classes <= int(labels.max()):
        raise ValueError(f"model has {cfg.model.classes} classes but labels reach {int(labels.max())}")

    init_rng, order_rng, batch_rng = Rng(cfg.seed).split(3)
    params = init_params(cfg.model, init_rng)
    state = SgdState()

    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    log: list[dict] = []

    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        cls_sum = cons_sum = tot_sum = 0.0
        correct = 0
        lr = cfg.lr0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            lr = cosine_lr(step, total_steps, cfg.lr0)
            preds = four_route_forward(xb, params, cfg, batch_rng, training=True)
            losses = compute_losses(preds, yb, cfg.lam)
            params.zero_grad()
            backward(losses.total)
            sgd_step(params, params.grads(), state, lr, cfg.momentum, cfg.weight_decay)

            bs = len(idx)
            cls_sum += losses.l_cls.item() * bs
            cons_sum += losses.l_cons.item() * bs
            tot_sum += losses.total.item() * bs
            track = "O" if "O" in preds.probs else preds.enabled()[0]
            correct += int((preds.probs[track].data.argmax(axis=1) == yb).sum())
            step += 1
        log.append({
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "l_cls": cls_sum / n,
            "l_cons": cons_sum / n,
            "total": tot_sum / n,
            "train_acc": correct / n,
        })
    return params, log


def evaluate(params: ModelParams, images: np.ndarray, labels: np.ndarray,
             cfg: CnnConfig, batch_size: int = 256) -> tuple[float, dict[int, float]]:
    """Argmax accuracy with all perturbations off; also per-class accuracies."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hits = np.zeros(cfg.classes, dtype=np.int64)
    counts = np.zeros(cfg.classes, dtype=np.int64)
    for start in range(0, len(images), batch_size):
        xb = Tensor(images[start:start + batch_size])
        yb = labels[start:start + batch_size]
        pred = forward(xb, params, cfg).data.argmax(axis=1)
        for cls in range(cfg.classes):
            mask = yb == cls
            counts[cls] += int(mask.sum())
            hits[cls] += int((pred[mask] == cls).sum())
    per_class = {cls: (hits[cls] / counts[cls] if counts[cls] else float("nan"))
                 for cls in range(cfg.classes)}
    return float(hits.sum() / counts.sum()), per_class
