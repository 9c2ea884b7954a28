"""Mini-batch SGD with optional gradient-restricted (GR) loss and early stopping.

The GR objective for one sample is ``l(z, theta) + alpha * ||grad l(z, theta)||``.
Its gradient, ``g + alpha * H_z g / max(||g||, eps)``, costs one per-sample
Hessian-vector product on top of the per-sample gradient.
"""

import csv
import dataclasses
import io
import math
import time
from typing import Callable, Optional

import numpy as np

from . import numerics
from .datasets import Dataset, split
from .errors import Diverged, NonFiniteLoss, NoConvergence
from .fileio import atomic_write
from .models import Checkpoint, ModelSpec, accuracy, init_params, objective
from .seeding import stream, stream_seed

EPS_NORM = 1e-12


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    alpha: float = 0.0
    seed: int = 0
    val_fraction: float = 0.0
    early_stopping: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclasses.dataclass
class TrainHistory:
    train_loss: list
    val_acc: list
    stopped_epoch: int
    best_epoch: int
    wall_time: float
    grad_norm: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_acc"])
        for e, (l, a) in enumerate(zip(self.train_loss, self.val_acc), start=1):
            w.writerow([e, repr(float(l)), repr(float(a))])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        atomic_write(path, self.to_csv().encode())


# ---------------------------------------------------------------------------
# GR loss


def gr_terms(spec: ModelSpec, theta, X, y, alpha: float):
    """Per-sample GR losses and gradients, as rows."""
    G, losses = numerics.per_sample_grads(spec, theta, X, y, with_losses=True)
    norms = np.linalg.norm(G, axis=1)
    if alpha == 0.0:
        return losses, G
    U = G / np.maximum(norms, EPS_NORM)[:, None]
    HU = numerics.per_sample_hvps(spec, theta, X, y, U)
    return losses + alpha * norms, G + alpha * HU


def gr_loss(spec: ModelSpec, theta, x, y, alpha: float) -> float:
    """``l(z, theta) + alpha * ||grad_theta l(z, theta)||_2`` for one sample."""
    if not alpha >= 0:
        raise ValueError("alpha must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if alpha == 0.0:
        value = float(numerics.per_sample_losses(spec, numerics.as_params(theta, spec.n_params), x[None, :], [y])[0])
    else:
        G, losses = numerics.per_sample_grads(spec, theta, x[None, :], [y], with_losses=True)
        value = float(losses[0] + alpha * np.linalg.norm(G[0]))
    if not math.isfinite(value):
        raise NonFiniteLoss("gr_loss", value)
    return value


def gr_loss_grad(spec: ModelSpec, theta, x, y, alpha: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _, G = gr_terms(spec, numerics.as_params(theta, spec.n_params), x[None, :], [y], alpha)
    return G[0]


def gr_objective(spec: ModelSpec, theta, X, y, alpha: float):
    """Mean GR loss over a batch and its gradient."""
    if alpha == 0.0:
        v, g = numerics.sum_loss_and_grad(spec, theta, X, y)
        n = np.asarray(X).shape[0]
        return v / n, g / n
    losses, G = gr_terms(spec, theta, X, y, alpha)
    return float(losses.mean()), G.mean(axis=0)


# ---------------------------------------------------------------------------
# SGD core


@dataclasses.dataclass
class FitResult:
    theta: np.ndarray
    history: TrainHistory
    updates: int


def fit_sgd(theta0, n: int, batch_grad: Callable, score: Callable, config: TrainConfig,
            shuffle_rng: np.random.Generator) -> FitResult:
    """Plain SGD over ``n`` samples with validation-score early stopping.

    ``batch_grad(theta, idx)`` returns ``(mean_loss, mean_grad)`` on the batch
    ``idx``; ``score(theta)`` is the validation metric (higher is better).
    Training stops once the score has not improved for ``patience`` epochs;
    ties keep the earlier epoch and the best parameters are restored.
    """
    theta = np.array(theta0, dtype=np.float64, copy=True)
    best_score, best_epoch, best_theta = -math.inf, 0, theta.copy()
    losses, scores = [], []
    updates = 0
    t0 = time.perf_counter()
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, g = batch_grad(theta, idx)
            if not math.isfinite(value) or not np.all(np.isfinite(g)):
                raise Diverged(epoch, value)
            theta -= config.lr * g
            updates += 1
            total += value * idx.size
        if not np.all(np.isfinite(theta)):
            raise Diverged(epoch)
        losses.append(total / n)
        s = float(score(theta))
        scores.append(s)
        if s > best_score:
            best_score, best_epoch, best_theta = s, epoch, theta.copy()
        elif config.early_stopping and epoch - best_epoch >= config.patience:
            break
    wall = max(time.perf_counter() - t0, 1e-9)
    final = best_theta if config.early_stopping else theta
    history = TrainHistory(losses, scores, epoch, best_epoch if config.early_stopping else epoch, wall)
    return FitResult(final, history, updates)


def train(spec: ModelSpec, dataset: Dataset, config: TrainConfig, val: Optional[Dataset] = None):
    """Train from a seed-derived init; returns ``(Checkpoint, TrainHistory)``.

    Early stopping watches ``val`` when given, otherwise a ``val_fraction``
    carve-out of ``dataset`` (then training uses the rest), otherwise the
    training accuracy itself.
    """
    train_set = dataset
    if val is None and config.val_fraction > 0:
        val, train_set = split(dataset, [config.val_fraction, 1.0 - config.val_fraction],
                               stream_seed(config.seed, "val-split"))
    monitor = val if val is not None else train_set
    X, y = train_set.features, train_set.labels

    def batch_grad(theta, idx):
        return gr_objective(spec, theta, X[idx], y[idx], config.alpha)

    def score(theta):
        return accuracy(spec, theta, monitor.features, monitor.labels)

    theta0 = init_params(spec, stream_seed(config.seed, "init"))
    result = fit_sgd(theta0, train_set.n, batch_grad, score, config, stream(config.seed, "shuffle"))
    _, g = numerics.sum_loss_and_grad(spec, result.theta, X, y)
    result.history.grad_norm = float(np.linalg.norm(g / train_set.n))
    meta = {
        "seed": config.seed,
        "epochs": result.history.stopped_epoch,
        "best_epoch": result.history.best_epoch,
        "alpha": config.alpha,
        "lr": config.lr,
        "n_train": train_set.n,
        "method": "sgd",
    }
    return Checkpoint(spec, result.theta, meta), result.history


# ---------------------------------------------------------------------------
# full-batch Newton for convex oracles


def fit_newton(spec: ModelSpec, X, y, theta0=None, tol: float = 1e-10, max_iter: int = 100,
               seed: int = 0) -> np.ndarray:
    """Minimize the mean loss by Newton-CG with backtracking.

    Converges when the mean-gradient norm is ``<= tol``.  Meant for strictly
    convex objectives (``l2 > 0`` logistic regression); the Hessian is only
    touched through HVPs.
    """
    obj = objective(spec, X, y)
    theta = init_params(spec, seed) if theta0 is None else np.array(theta0, dtype=np.float64, copy=True)
    value, g = obj.value_and_grad(theta)
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return theta
        H = numerics.hessian_operator(obj, theta, damping=0.0)
        step = numerics.cg_solve(H, -g, tol=min(1e-2, math.sqrt(gnorm)) * 1e-3, max_iter=20 * spec.n_params).x
        t = 1.0
        slope = float(g @ step)
        while True:
            cand = theta + t * step
            cv = obj.value(cand)
            # slack for loss differences below float64 rounding near the optimum
            if cv <= value + 1e-4 * t * slope + 1e-15 * abs(value) or t < 1e-12:
                break
            t *= 0.5
        theta = cand
        value, g = obj.value_and_grad(theta)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return theta
    raise NoConvergence(max_iter, gnorm)


# ---------------------------------------------------------------------------
# gradient-norm statistics


@dataclasses.dataclass
class GradNormStats:
    norms: np.ndarray
    min: float
    median: float
    mean: float
    max: float
    p95: float

    def histogram(self, bins: int = 20):
        counts, edges = np.histogram(self.norms, bins=bins)
        return counts, edges

    def histogram_csv(self, bins: int = 20) -> str:
        counts, edges = self.histogram(bins)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("min", "median", "mean", "max", "p95")}


def grad_norm_stats(spec: ModelSpec, theta, dataset: Dataset) -> GradNormStats:
    G = numerics.per_sample_grads(spec, theta, dataset.features, dataset.labels)
    norms = np.linalg.norm(G, axis=1)
    return GradNormStats(
        norms=norms,
        min=float(norms.min()),
        median=float(np.median(norms)),
        mean=float(norms.mean()),
        max=float(norms.max()),
        p95=float(np.percentile(norms, 95)),
    )
