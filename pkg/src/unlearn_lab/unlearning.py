"""Single-step approximate unlearning and the exact oracles it is measured against.

* ``iau_unlearn``: ``theta - eta * (G_r - G_f)``, where ``G_r`` and ``G_f`` are
  sums of per-sample gradients over the remain and forget sets, both taken
  at the input parameters.  One parameter write, no second-order work.
* ``incremental_unlearn``: the same step without the remain-set term.
* ``influence_remove`` / ``influence_add_predict``: first-order influence
  predictions ``theta -/+ (1/n) (H + lambda I)^{-1} grad l(z, theta)``, solved
  with conjugate gradients on HVPs.
* ``retrain_oracle``: retraining on the remain set (SGD or full-batch Newton).

All timings are milliseconds from ``time.perf_counter``.
"""

import dataclasses
import time
from typing import Optional

import numpy as np

from . import numerics
from .datasets import Dataset, Partition
from .errors import BadStep, EmptyDataset, EmptyForgetSet, NonFiniteUpdate
from .models import Checkpoint, ModelSpec, init_params, objective
from .seeding import stream_seed
from .training import TrainConfig, fit_newton, train

MODES = ("iau", "incremental_only")


@dataclasses.dataclass(frozen=True)
class UnlearnRequest:
    partition: Partition
    eta: float
    mode: str = "iau"

    def __post_init__(self):
        if self.partition.forget_indices.size == 0:
            raise EmptyForgetSet("forget set is empty")
        if not (self.eta > 0 and np.isfinite(self.eta)):
            raise BadStep(f"step size must be positive and finite, got {self.eta!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown unlearning mode {self.mode!r}")


@dataclasses.dataclass(frozen=True)
class InfluenceQuery:
    """Solver settings for an influence prediction.

    ``weight`` is the up-weighting amount; ``None`` means ``1/n``.
    """

    weight: Optional[float] = None
    damping: float = numerics.DEFAULT_DAMPING
    tol: float = numerics.DEFAULT_CG_TOL
    max_iter: Optional[int] = None

    def __post_init__(self):
        if not self.damping >= 0:
            raise ValueError("damping must be nonnegative")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")


def default_eta(lr: float, n_train: int) -> float:
    """Default IAU step: training learning rate divided by the training-set size."""
    return lr / n_train


# ---------------------------------------------------------------------------
# gradient-only updates


def gradient_sum(spec: ModelSpec, theta, dataset: Dataset, indices) -> np.ndarray:
    """Sum of per-sample loss gradients over ``dataset[indices]`` (zeros if empty)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return np.zeros(spec.n_params)
    _, g = numerics.sum_loss_and_grad(spec, theta, dataset.features[idx], dataset.labels[idx])
    return g


def iau_step(theta, remain_grad_sum, forget_grad_sum, eta: float) -> np.ndarray:
    """``theta - eta * (remain_grad_sum - forget_grad_sum)``."""
    out = np.asarray(theta, dtype=np.float64) - eta * (
        np.asarray(remain_grad_sum, dtype=np.float64) - np.asarray(forget_grad_sum, dtype=np.float64)
    )
    numerics.bump("param_writes")
    return out


def incremental_step(theta, forget_grad_sum, eta: float) -> np.ndarray:
    """``theta + eta * forget_grad_sum`` (gradient ascent on the forget set)."""
    out = np.asarray(theta, dtype=np.float64) + eta * np.asarray(forget_grad_sum, dtype=np.float64)
    numerics.bump("param_writes")
    return out


def _check_request(checkpoint: Checkpoint, dataset: Dataset, request: UnlearnRequest):
    part = request.partition
    if part.n != dataset.n:
        raise ValueError(f"partition covers {part.n} indices but dataset has {dataset.n}")
    if part.forget_indices.size == 0:
        raise EmptyForgetSet("forget set is empty")
    if dataset.d != checkpoint.spec.input_dim:
        raise ValueError("dataset feature dimension does not match the model")


def _finish(checkpoint, new_theta, request, elapsed_ms):
    if not np.all(np.isfinite(new_theta)):
        raise NonFiniteUpdate("unlearning produced non-finite parameters")
    ckpt = checkpoint.replace(
        new_theta,
        unlearn_mode=request.mode,
        unlearn_eta=request.eta,
        forgotten=int(request.partition.forget_indices.size),
    )
    return ckpt, elapsed_ms


def iau_unlearn(checkpoint: Checkpoint, dataset: Dataset, request: UnlearnRequest):
    """One IAU update; returns ``(new_checkpoint, elapsed_ms)``."""
    _check_request(checkpoint, dataset, request)
    spec, theta = checkpoint.spec, checkpoint.params
    t0 = time.perf_counter()
    g_forget = gradient_sum(spec, theta, dataset, request.partition.forget_indices)
    g_remain = gradient_sum(spec, theta, dataset, request.partition.remain_indices)
    new_theta = iau_step(theta, g_remain, g_forget, request.eta)
    elapsed = (time.perf_counter() - t0) * 1e3
    return _finish(checkpoint, new_theta, request, elapsed)


def incremental_unlearn(checkpoint: Checkpoint, dataset: Dataset, request: UnlearnRequest):
    """Forget-set gradient ascent only (no remain-set correction)."""
    _check_request(checkpoint, dataset, request)
    spec, theta = checkpoint.spec, checkpoint.params
    t0 = time.perf_counter()
    g_forget = gradient_sum(spec, theta, dataset, request.partition.forget_indices)
    new_theta = incremental_step(theta, g_forget, request.eta)
    elapsed = (time.perf_counter() - t0) * 1e3
    return _finish(checkpoint, new_theta, request, elapsed)


def unlearn(checkpoint: Checkpoint, dataset: Dataset, request: UnlearnRequest):
    if request.mode == "iau":
        return iau_unlearn(checkpoint, dataset, request)
    return incremental_unlearn(checkpoint, dataset, request)


# ---------------------------------------------------------------------------
# influence oracles


def inverse_hvp(checkpoint: Checkpoint, dataset: Dataset, rhs, query: InfluenceQuery) -> numerics.CGResult:
    """Solve ``(H + lambda I) x = rhs`` with ``H`` the Hessian of the mean loss over ``dataset``."""
    obj = objective(checkpoint.spec, dataset.features, dataset.labels)
    H = numerics.hessian_operator(obj, checkpoint.params, damping=query.damping)
    return numerics.cg_solve(H, rhs, tol=query.tol, max_iter=query.max_iter)


def predict_remove_from_gradient(checkpoint: Checkpoint, dataset: Dataset, grad, query: InfluenceQuery):
    """``theta + w (H + lambda I)^{-1} grad`` for a removed point with gradient ``grad``."""
    w = 1.0 / dataset.n if query.weight is None else query.weight
    solved = inverse_hvp(checkpoint, dataset, np.asarray(grad, dtype=np.float64), query)
    return checkpoint.params + w * solved.x


def predict_add_from_gradient(checkpoint: Checkpoint, dataset: Dataset, grad, query: InfluenceQuery):
    """``theta - w (H + lambda I)^{-1} grad`` for an added point with gradient ``grad``."""
    w = 1.0 / dataset.n if query.weight is None else query.weight
    solved = inverse_hvp(checkpoint, dataset, np.asarray(grad, dtype=np.float64), query)
    return checkpoint.params - w * solved.x


def sample_gradient(spec: ModelSpec, theta, x, y) -> np.ndarray:
    return numerics.per_sample_grads(spec, theta, np.asarray(x, dtype=np.float64)[None, :], [y])[0]


def influence_remove(checkpoint: Checkpoint, dataset: Dataset, forget_index: int,
                     query: InfluenceQuery = InfluenceQuery()) -> np.ndarray:
    """Predicted parameters after removing ``dataset[forget_index]``."""
    g = sample_gradient(checkpoint.spec, checkpoint.params,
                        dataset.features[forget_index], dataset.labels[forget_index])
    return predict_remove_from_gradient(checkpoint, dataset, g, query)


def influence_add_predict(checkpoint: Checkpoint, dataset: Dataset, x_new, y_new,
                          query: InfluenceQuery = InfluenceQuery()) -> np.ndarray:
    """Predicted parameters after adding the sample ``(x_new, y_new)``."""
    g = sample_gradient(checkpoint.spec, checkpoint.params, x_new, y_new)
    return predict_add_from_gradient(checkpoint, dataset, g, query)


# ---------------------------------------------------------------------------
# retraining


def retrain_oracle(spec: ModelSpec, remaining: Dataset, config: TrainConfig, method: str = "sgd",
                   val: Optional[Dataset] = None, tol: float = 1e-10, theta0=None):
    """Retrain from scratch on ``remaining``; returns ``(checkpoint, elapsed_ms)``.

    ``method="sgd"`` delegates to ``train`` with ``config`` (same seed streams,
    so an untouched dataset reproduces the original run).  ``method="newton"``
    minimizes the full-batch loss to mean-gradient norm ``tol``.
    """
    if remaining is None or remaining.n == 0:
        raise EmptyDataset("nothing left to retrain on")
    t0 = time.perf_counter()
    if method == "sgd":
        ckpt, _ = train(spec, remaining, config, val=val)
    elif method == "newton":
        if theta0 is None:
            theta0 = init_params(spec, stream_seed(config.seed, "init"))
        theta = fit_newton(spec, remaining.features, remaining.labels, theta0=theta0, tol=tol)
        ckpt = Checkpoint(spec, theta, {"seed": config.seed, "method": "newton", "n_train": remaining.n})
    else:
        raise ValueError(f"unknown retraining method {method!r}")
    return ckpt, (time.perf_counter() - t0) * 1e3
