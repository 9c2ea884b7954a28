"""Dense 64-bit numerics for the supported model family.

The model family is a fully connected network with an elementwise hidden
activation (relu or tanh) and either a softmax/cross-entropy head or a single
sigmoid/binary-cross-entropy head.  For that family this module provides

* batched reverse-mode gradients, summed or per sample;
* Hessian-vector products by forward-over-reverse differentiation (the
  R-operator applied to the backward pass), with one shared direction or one
  direction per sample;
* a generic ``Objective`` interface with ``value_and_grad``/``hvp`` wrappers;
* a damped conjugate-gradient solver and a central finite-difference oracle.

Parameters are flat float64 vectors.  Layer ``l`` occupies a contiguous block
holding its weight matrix (``out x in``, row-major) followed by its bias.
"""

import contextlib
import contextvars
import dataclasses
import math
from typing import Callable, Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyBatch,
    NoConvergence,
    NonFiniteLoss,
    NotPositiveDefinite,
)

ACTIVATIONS = ("relu", "tanh")
HEADS = ("softmax", "sigmoid")

DEFAULT_DAMPING = 1e-3
DEFAULT_CG_TOL = 1e-8


# ---------------------------------------------------------------------------
# operation counters


@dataclasses.dataclass
class OpCounts:
    grad_evals: int = 0
    hvp_calls: int = 0
    cg_iterations: int = 0
    param_writes: int = 0


_active_counters: contextvars.ContextVar[tuple] = contextvars.ContextVar("_active_counters", default=())


@contextlib.contextmanager
def count_ops():
    """Count gradient/HVP/CG/parameter-write events inside the block.

    >>> with count_ops() as ops:
    ...     pass
    >>> ops.hvp_calls
    0
    """
    counts = OpCounts()
    token = _active_counters.set(_active_counters.get() + (counts,))
    try:
        yield counts
    finally:
        _active_counters.reset(token)


def bump(field: str, k: int = 1) -> None:
    for c in _active_counters.get():
        setattr(c, field, getattr(c, field) + k)


# ---------------------------------------------------------------------------
# vectors


def as_params(theta, dim: Optional[int] = None, what: str = "parameter vector") -> np.ndarray:
    """Return ``theta`` as a finite 1-D float64 array, checking its length."""
    arr = np.asarray(theta, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(dim, arr.shape[0], what)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteLoss(what)
    return arr


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(a @ b / (na * nb))


def rel_error(approx, exact, floor: float = 1e-12) -> float:
    """``||approx - exact|| / max(||exact||, floor)`` in the L2 norm."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.linalg.norm(approx - exact) / max(np.linalg.norm(exact), floor))


# ---------------------------------------------------------------------------
# network kernels


@dataclasses.dataclass(frozen=True)
class NetShape:
    """Layer widths ``(in, h1, ..., out)`` plus activation and output head."""

    sizes: tuple
    activation: str = "relu"
    head: str = "softmax"

    def __post_init__(self):
        if len(self.sizes) < 2 or any(int(s) < 1 for s in self.sizes):
            raise ValueError(f"bad layer sizes {self.sizes!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "sigmoid" and self.sizes[-1] != 1:
            raise ValueError("sigmoid head needs exactly one output unit")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def slices(self):
        """``[(weight_slice, bias_slice, (out, in)), ...]`` per layer."""
        out, pos = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(pos, pos + fan_out * fan_in)
            pos = w.stop
            b = slice(pos, pos + fan_out)
            pos = b.stop
            out.append((w, b, (fan_out, fan_in)))
        return out

    def unflatten(self, theta: np.ndarray):
        """Views ``[(W, b), ...]`` into ``theta`` (1-D) or ``theta`` rows (2-D)."""
        lead = theta.shape[:-1]
        return [(theta[..., w].reshape(lead + shp), theta[..., b]) for w, b, shp in self.slices()]


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_derivs(name, z):
    """First and second derivative of the activation at ``z``."""
    if name == "relu":
        d1 = (z > 0.0).astype(np.float64)
        return d1, np.zeros_like(z)
    t = np.tanh(z)
    d1 = 1.0 - t * t
    return d1, -2.0 * t * d1


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def net_forward(shape: NetShape, theta: np.ndarray, X: np.ndarray, masks=None):
    """Forward pass; returns ``(pre_activations, layer_inputs)``.

    ``layer_inputs[l]`` is the (masked) input of layer ``l``; the logits are
    ``pre_activations[-1]``.  ``masks`` (optional) holds one inverted-dropout
    multiplier array per hidden layer.
    """
    layers = shape.unflatten(theta)
    a = X
    pres, inputs = [], [X]
    for l, (W, b) in enumerate(layers):
        z = a @ W.T + b
        pres.append(z)
        if l < shape.n_layers - 1:
            a = _act(shape.activation, z)
            if masks is not None:
                a = a * masks[l]
            inputs.append(a)
    return pres, inputs


def head_outputs(shape: NetShape, logits: np.ndarray, y: np.ndarray):
    """Per-sample loss and its derivative w.r.t. the logits."""
    B = logits.shape[0]
    if shape.head == "softmax":
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        losses = lse - logits[np.arange(B), y]
        delta = np.exp(logits - lse[:, None])
        delta[np.arange(B), y] -= 1.0
        return losses, delta
    z = logits[:, 0]
    yf = y.astype(np.float64)
    losses = np.logaddexp(0.0, z) - yf * z
    delta = (sigmoid(z) - yf)[:, None]
    return losses, delta


def probabilities(shape: NetShape, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    logits = net_forward(shape, theta, X)[0][-1]
    if shape.head == "softmax":
        return softmax(logits)
    return sigmoid(logits[:, 0])


def net_backward(shape, theta, pres, inputs, delta, masks=None, per_sample=False):
    """Backpropagate ``delta`` (d loss / d logits) to parameter gradients.

    Returns the batch sum (shape ``(p,)``) or per-sample rows (``(B, p)``).
    """
    B = delta.shape[0]
    layers = shape.unflatten(theta)
    out = np.empty((B, shape.n_params)) if per_sample else np.empty(shape.n_params)
    for l in range(shape.n_layers - 1, -1, -1):
        wsl, bsl, _ = shape.slices()[l]
        a_prev = inputs[l]
        if per_sample:
            out[:, wsl] = np.einsum("bo,bi->boi", delta, a_prev).reshape(B, -1)
            out[:, bsl] = delta
        else:
            out[wsl] = (delta.T @ a_prev).reshape(-1)
            out[bsl] = delta.sum(axis=0)
        if l > 0:
            da = delta @ layers[l][0]
            if masks is not None:
                da = da * masks[l - 1]
            d1, _ = _act_derivs(shape.activation, pres[l - 1])
            delta = da * d1
    return out


def net_hvp(shape, theta, X, y, V, per_sample=False):
    """Forward-over-reverse Hessian-vector product of the per-sample losses.

    ``V`` is one direction ``(p,)`` shared by all samples, or one direction per
    sample ``(B, p)``.  The result is ``sum_i H_i v`` (shared ``V``, unless
    ``per_sample``) or the rows ``H_i v_i``.  Regularization is not included.
    """
    B = X.shape[0]
    batched = V.ndim == 2
    if batched and V.shape[0] != B:
        raise DimensionMismatch(B, V.shape[0], "per-sample directions")
    layers = shape.unflatten(theta)
    vlayers = shape.unflatten(V)
    L = shape.n_layers

    a, Ra = X, np.zeros_like(X)
    pres, Rpres, inputs, Rinputs = [], [], [X], [Ra]
    for l, ((W, b), (VW, Vb)) in enumerate(zip(layers, vlayers)):
        z = a @ W.T + b
        if batched:
            Rz = Ra @ W.T + np.einsum("bi,boi->bo", a, VW) + Vb
        else:
            Rz = Ra @ W.T + a @ VW.T + Vb
        pres.append(z)
        Rpres.append(Rz)
        if l < L - 1:
            d1, _ = _act_derivs(shape.activation, z)
            a = _act(shape.activation, z)
            Ra = d1 * Rz
            inputs.append(a)
            Rinputs.append(Ra)

    logits, Rlogits = pres[-1], Rpres[-1]
    _, delta = head_outputs(shape, logits, y)
    if shape.head == "softmax":
        p = softmax(logits)
        Rdelta = p * Rlogits - p * (p * Rlogits).sum(axis=1, keepdims=True)
    else:
        s = sigmoid(logits)
        Rdelta = s * (1.0 - s) * Rlogits

    want_rows = per_sample or batched
    out = np.empty((B, shape.n_params)) if want_rows else np.empty(shape.n_params)
    for l in range(L - 1, -1, -1):
        wsl, bsl, _ = shape.slices()[l]
        a_prev, Ra_prev = inputs[l], Rinputs[l]
        if want_rows:
            out[:, wsl] = (np.einsum("bo,bi->boi", Rdelta, a_prev) + np.einsum("bo,bi->boi", delta, Ra_prev)).reshape(B, -1)
            out[:, bsl] = Rdelta
        else:
            out[wsl] = (Rdelta.T @ a_prev + delta.T @ Ra_prev).reshape(-1)
            out[bsl] = Rdelta.sum(axis=0)
        if l > 0:
            W, VW = layers[l][0], vlayers[l][0]
            da = delta @ W
            if batched:
                Rda = Rdelta @ W + np.einsum("bo,boi->bi", delta, VW)
            else:
                Rda = Rdelta @ W + delta @ VW
            d1, d2 = _act_derivs(shape.activation, pres[l - 1])
            Rdelta = Rda * d1 + da * d2 * Rpres[l - 1]
            delta = da * d1
    return out


# ---------------------------------------------------------------------------
# model-level helpers (``model`` is anything exposing ``.net`` and ``.l2``)


def _check_batch(model, X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if X.shape[0] == 0:
        raise EmptyBatch("empty batch")
    if X.shape[1] != model.net.sizes[0]:
        raise DimensionMismatch(model.net.sizes[0], X.shape[1], "feature vector")
    if y.shape[0] != X.shape[0]:
        raise DimensionMismatch(X.shape[0], y.shape[0], "label count")
    return X, y


def per_sample_losses(model, theta, X, y) -> np.ndarray:
    """Loss of each sample, regularization term included."""
    X, y = _check_batch(model, X, y)
    logits = net_forward(model.net, theta, X)[0][-1]
    losses, _ = head_outputs(model.net, logits, y)
    return losses + 0.5 * model.l2 * float(theta @ theta)


def per_sample_grads(model, theta, X, y, with_losses=False):
    """Gradient of each sample's loss; row ``k`` belongs to sample ``k``."""
    theta = as_params(theta, model.net.n_params)
    X, y = _check_batch(model, X, y)
    pres, inputs = net_forward(model.net, theta, X)
    losses, delta = head_outputs(model.net, pres[-1], y)
    G = net_backward(model.net, theta, pres, inputs, delta, per_sample=True)
    if model.l2:
        G += model.l2 * theta
    bump("grad_evals", X.shape[0])
    if with_losses:
        return G, losses + 0.5 * model.l2 * float(theta @ theta)
    return G


def sum_loss_and_grad(model, theta, X, y):
    """``(sum_i l_i, sum_i grad l_i)`` without materializing per-sample rows."""
    theta = as_params(theta, model.net.n_params)
    X, y = _check_batch(model, X, y)
    B = X.shape[0]
    pres, inputs = net_forward(model.net, theta, X)
    losses, delta = head_outputs(model.net, pres[-1], y)
    g = net_backward(model.net, theta, pres, inputs, delta)
    value = float(losses.sum())
    if model.l2:
        value += 0.5 * model.l2 * B * float(theta @ theta)
        g += model.l2 * B * theta
    bump("grad_evals", B)
    return value, g


def per_sample_hvps(model, theta, X, y, V) -> np.ndarray:
    """Rows ``H_i v_i`` for per-sample directions ``V`` of shape ``(B, p)``."""
    X, y = _check_batch(model, X, y)
    out = net_hvp(model.net, theta, X, y, np.asarray(V, dtype=np.float64))
    if model.l2:
        out += model.l2 * V
    bump("hvp_calls", X.shape[0])
    return out


# ---------------------------------------------------------------------------
# objectives


class Objective:
    """A twice-differentiable scalar function of a flat parameter vector.

    Subclasses implement ``value_and_grad`` and ``hvp``.
    """

    dim: int

    def value(self, theta) -> float:
        return self.value_and_grad(theta)[0]

    def value_and_grad(self, theta):
        raise NotImplementedError

    def hvp(self, theta, v):
        raise NotImplementedError

    def __call__(self, theta) -> float:
        return self.value(theta)


class Quadratic(Objective):
    """``0.5 * theta' A theta + b' theta + c`` with symmetric ``A``."""

    def __init__(self, A, b=None, c=0.0):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.dim = self.A.shape[0]
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=np.float64)
        self.c = float(c)

    def value(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return float(0.5 * theta @ self.A @ theta + self.b @ theta + self.c)

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return self.value(theta), self.A @ theta + self.b

    def hvp(self, theta, v):
        return self.A @ np.asarray(v, dtype=np.float64)


class BatchLoss(Objective):
    """Mean per-sample loss of ``model`` over ``(X, y)``."""

    def __init__(self, model, X, y):
        self.model = model
        self.X, self.y = _check_batch(model, X, y)
        self.dim = model.net.n_params

    def value(self, theta):
        return float(per_sample_losses(self.model, theta, self.X, self.y).mean())

    def value_and_grad(self, theta):
        v, g = sum_loss_and_grad(self.model, theta, self.X, self.y)
        n = self.X.shape[0]
        return v / n, g / n

    def hvp(self, theta, v):
        n = self.X.shape[0]
        out = net_hvp(self.model.net, theta, self.X, self.y, v) / n
        if self.model.l2:
            out += self.model.l2 * v
        return out


def value_and_grad(loss_fn: Objective, theta):
    """Loss value and exact gradient of ``loss_fn`` at ``theta``."""
    theta = as_params(theta, getattr(loss_fn, "dim", None))
    value, g = loss_fn.value_and_grad(theta)
    if not math.isfinite(value):
        raise NonFiniteLoss("value_and_grad: loss", value)
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteLoss("value_and_grad: gradient")
    return float(value), g


def hvp(loss_fn: Objective, theta, v) -> np.ndarray:
    """Exact Hessian-vector product ``H(theta) v`` of ``loss_fn``."""
    dim = getattr(loss_fn, "dim", None)
    theta = as_params(theta, dim)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != theta.shape[0]:
        raise DimensionMismatch(theta.shape[0], v.shape[0], "HVP direction")
    bump("hvp_calls")
    return np.asarray(loss_fn.hvp(theta, v), dtype=np.float64)


def finite_diff_grad(loss_fn, theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient; ``loss_fn`` may be a plain callable."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    f = loss_fn.value if isinstance(loss_fn, Objective) else loss_fn
    theta = np.asarray(theta, dtype=np.float64).copy()
    out = np.empty_like(theta)
    for i in range(theta.shape[0]):
        orig = theta[i]
        theta[i] = orig + h
        fp = f(theta)
        theta[i] = orig - h
        fm = f(theta)
        theta[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteLoss("finite_diff_grad", (fp, fm))
        out[i] = (fp - fm) / (2.0 * h)
    return out


def finite_diff_hvp(grad_fn: Callable, theta, v, h: float = 1e-4) -> np.ndarray:
    """``(grad(theta + h v) - grad(theta - h v)) / 2h``; ``grad_fn`` returns a vector."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return (np.asarray(grad_fn(theta + h * v)) - np.asarray(grad_fn(theta - h * v))) / (2.0 * h)


# ---------------------------------------------------------------------------
# Hessian operator and CG


@dataclasses.dataclass(frozen=True)
class HessianOperator:
    """Matrix-free ``v -> (H + damping * I) v``.

    ``apply`` is the undamped product.  ``source`` is free-form provenance
    (typically the objective and the point it was built at).
    """

    apply: Callable[[np.ndarray], np.ndarray]
    dim: int
    damping: float = DEFAULT_DAMPING
    source: object = None

    def __post_init__(self):
        if not self.damping >= 0:
            raise ValueError("damping must be nonnegative")

    def matvec(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionMismatch(self.dim, v.shape[0] if v.ndim else 0, "Hessian operand")
        out = self.apply(v)
        if self.damping:
            out = out + self.damping * v
        return out

    __call__ = matvec

    def dense(self) -> np.ndarray:
        """Materialize the damped matrix column by column (small ``dim`` only)."""
        eye = np.eye(self.dim)
        return np.column_stack([self.matvec(eye[:, j]) for j in range(self.dim)])


def hessian_operator(loss_fn: Objective, theta, damping: float = DEFAULT_DAMPING) -> HessianOperator:
    theta = as_params(theta, getattr(loss_fn, "dim", None)).copy()
    theta.setflags(write=False)
    return HessianOperator(
        apply=lambda v: hvp(loss_fn, theta, v),
        dim=theta.shape[0],
        damping=damping,
        source=(loss_fn, theta),
    )


@dataclasses.dataclass(frozen=True)
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float


def cg_solve(H: HessianOperator, b, tol: float = DEFAULT_CG_TOL, max_iter: Optional[int] = None) -> CGResult:
    """Solve ``(H + damping I) x = b`` by conjugate gradients.

    Stops once ``||r|| <= tol * ||b||``.  Raises ``NotPositiveDefinite`` when a
    search direction has non-positive curvature, ``NoConvergence`` when
    ``max_iter`` (default ``10 * dim``) runs out.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (H.dim,):
        raise DimensionMismatch(H.dim, b.size, "right-hand side")
    if max_iter is None:
        max_iter = 10 * H.dim
    x = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CGResult(x, 0, 0.0)
    target = tol * bnorm
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    for k in range(1, max_iter + 1):
        Ap = H.matvec(p)
        bump("cg_iterations")
        pAp = float(p @ Ap)
        if not pAp > 0.0:
            raise NotPositiveDefinite(pAp, k)
        step = rr / pAp
        x += step * p
        r -= step * Ap
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= target:
            # guard against drift of the recursive residual
            true_res = float(np.linalg.norm(b - H.matvec(x)))
            if true_res <= target:
                return CGResult(x, k, true_res)
            r = b - H.matvec(x)
            rr_new = float(r @ r)
            p = r.copy()
            rr = rr_new
            continue
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise NoConvergence(max_iter, float(np.linalg.norm(b - H.matvec(x))) / bnorm)
