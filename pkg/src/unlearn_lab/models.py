"""Logistic-regression and MLP classifiers with a flat parameter vector.

The per-sample loss is softmax cross-entropy plus ``(l2 / 2) * ||theta||^2``;
batch losses are means over samples.
"""

import dataclasses
import json
import struct
import zlib
from typing import Optional

import numpy as np

from . import numerics
from .fileio import atomic_write
from .errors import BadLabel, DimensionMismatch, InvariantViolation, NonFiniteLoss, ParseError, UnsupportedVersion

KINDS = ("logistic", "mlp")


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    classes: int
    hidden: tuple = ()
    activation: str = "relu"
    l2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in KINDS:
            raise InvariantViolation(f"unknown model kind {self.kind!r}")
        if self.classes < 2:
            raise InvariantViolation("classes must be >= 2")
        if self.input_dim < 1:
            raise InvariantViolation("input_dim must be >= 1")
        if (self.kind == "logistic") != (len(self.hidden) == 0):
            raise InvariantViolation("hidden must be empty iff kind is logistic")
        if any(h < 1 for h in self.hidden):
            raise InvariantViolation("hidden widths must be positive")
        if self.activation not in numerics.ACTIVATIONS:
            raise InvariantViolation(f"unknown activation {self.activation!r}")
        if not (self.l2 >= 0 and np.isfinite(self.l2)):
            raise InvariantViolation("l2 must be finite and nonnegative")

    @classmethod
    def logistic(cls, input_dim, classes, l2=0.0):
        return cls("logistic", input_dim, classes, (), "relu", l2)

    @classmethod
    def mlp(cls, input_dim, hidden, classes, activation="relu", l2=0.0):
        return cls("mlp", input_dim, classes, tuple(hidden), activation, l2)

    @property
    def net(self) -> numerics.NetShape:
        return numerics.NetShape((self.input_dim, *self.hidden, self.classes), self.activation)

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def to_dict(self):
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "classes": self.classes,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "l2": self.l2,
        }


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, ``U(-a, a)`` with ``a = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    return glorot_init(spec.net, np.random.default_rng(seed))


def glorot_init(shape: numerics.NetShape, rng: np.random.Generator) -> np.ndarray:
    theta = np.zeros(shape.n_params)
    for wsl, _, (fan_out, fan_in) in shape.slices():
        a = np.sqrt(6.0 / (fan_in + fan_out))
        theta[wsl] = rng.uniform(-a, a, size=fan_out * fan_in)
    return theta


def _check_labels(spec, y):
    y = np.atleast_1d(np.asarray(y))
    if y.size and (y.min() < 0 or y.max() >= spec.classes):
        raise BadLabel(f"labels must lie in [0, {spec.classes})")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise BadLabel("labels must be integers")
    return y.astype(np.int64)


def forward(spec: ModelSpec, theta, x) -> np.ndarray:
    """Class probabilities for one feature vector (1-D) or a batch (2-D)."""
    theta = numerics.as_params(theta, spec.n_params)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[-1] != spec.input_dim:
        raise DimensionMismatch(spec.input_dim, X.shape[-1], "feature vector")
    probs = numerics.probabilities(spec.net, theta, X)
    return probs[0] if single else probs


def predict(spec: ModelSpec, theta, X) -> np.ndarray:
    theta = numerics.as_params(theta, spec.n_params)
    logits = numerics.net_forward(spec.net, theta, np.asarray(X, dtype=np.float64))[0][-1]
    return logits.argmax(axis=1)


def accuracy(spec: ModelSpec, theta, X, y) -> float:
    """Fraction of correct predictions, in [0, 1]."""
    return float(np.mean(predict(spec, theta, X) == np.asarray(y)))


def loss(spec: ModelSpec, theta, X, y) -> float:
    """Mean cross-entropy over the batch plus ``(l2/2) ||theta||^2``."""
    theta = numerics.as_params(theta, spec.n_params)
    y = _check_labels(spec, y)
    value = float(numerics.per_sample_losses(spec, theta, X, y).mean())
    if not np.isfinite(value):
        raise NonFiniteLoss("loss", value)
    return value


def objective(spec: ModelSpec, X, y) -> numerics.BatchLoss:
    return numerics.BatchLoss(spec, X, _check_labels(spec, y))


def sample_objective(spec: ModelSpec, x, y) -> numerics.BatchLoss:
    """Objective for a single sample ``z = (x, y)``."""
    return numerics.BatchLoss(spec, np.asarray(x, dtype=np.float64)[None, :], _check_labels(spec, [y]))


# ---------------------------------------------------------------------------
# checkpoints


@dataclasses.dataclass(frozen=True, eq=False)
class Checkpoint:
    spec: ModelSpec
    params: np.ndarray
    train_meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64).reshape(-1).copy()
        if params.shape[0] != self.spec.n_params:
            raise InvariantViolation(
                f"parameter length {params.shape[0]} does not match spec ({self.spec.n_params})"
            )
        if not np.all(np.isfinite(params)):
            raise InvariantViolation("non-finite parameters")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "train_meta", dict(self.train_meta))

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.params.tobytes() == other.params.tobytes()
            and self.train_meta == other.train_meta
        )

    def replace(self, params=None, **meta):
        new_meta = dict(self.train_meta)
        new_meta.update(meta)
        return Checkpoint(self.spec, self.params if params is None else params, new_meta)


MAGIC = b"ULCK"
FORMAT_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    spec = ckpt.spec
    body = bytearray()
    body += _pack_str(spec.kind)
    body += struct.pack("<II", spec.input_dim, spec.classes)
    body += struct.pack("<I", len(spec.hidden))
    body += b"".join(struct.pack("<I", h) for h in spec.hidden)
    body += _pack_str(spec.activation)
    body += struct.pack("<d", spec.l2)
    meta = sorted(ckpt.train_meta.items())
    body += struct.pack("<I", len(meta))
    for key, value in meta:
        body += _pack_str(str(key))
        body += _pack_str(json.dumps(value, sort_keys=True))
    body += struct.pack("<Q", ckpt.params.shape[0])
    body += ckpt.params.astype("<f8").tobytes()
    header = MAGIC + struct.pack("<H", FORMAT_VERSION)
    return header + bytes(body) + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ParseError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"bad string in checkpoint: {e}") from None


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 6 or data[:4] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", data[4:6])
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version} (supported: {FORMAT_VERSION})")
    if len(data) < 10:
        raise ParseError("truncated checkpoint")
    body, (crc,) = data[6:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    kind = r.string()
    input_dim, classes = r.unpack("<II")
    (n_hidden,) = r.unpack("<I")
    hidden = r.unpack(f"<{n_hidden}I") if n_hidden else ()
    activation = r.string()
    (l2,) = r.unpack("<d")
    (n_meta,) = r.unpack("<I")
    meta = {}
    for _ in range(n_meta):
        key = r.string()
        raw = r.string()
        try:
            meta[key] = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ParseError(f"bad metadata value for {key!r}: {e}") from None
    (n_params,) = r.unpack("<Q")
    params = np.frombuffer(r.take(8 * n_params), dtype="<f8").astype(np.float64)
    if r.pos != len(body):
        raise ParseError(f"{len(body) - r.pos} trailing bytes in checkpoint")
    if zlib.crc32(body) != crc:
        raise ParseError("checkpoint checksum mismatch")
    spec = ModelSpec(kind, input_dim, classes, tuple(hidden), activation, l2)
    return Checkpoint(spec, params, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def checkpoint_meta(seed: Optional[int] = None, epochs: Optional[int] = None, alpha: Optional[float] = None, **extra):
    meta = {k: v for k, v in (("seed", seed), ("epochs", epochs), ("alpha", alpha)) if v is not None}
    meta.update(extra)
    return meta
