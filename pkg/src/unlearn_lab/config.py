"""YAML experiment configuration with schema validation.

Every field error is reported as a :class:`ConfigError` carrying the dotted
field path and, when the value came from a file, its 1-based line number.

Example::

    seed: 0
    data:
      source: blobs
      d: 10
      classes: 3
      spread: 0.5
      sizes: {train: 1000, val: 200, test: 2000, shadow: 1200}
    model: {kind: logistic, l2: 0.001}
    train: {lr: 0.5, batch_size: 32, max_epochs: 200, patience: 10}
    unlearn: {ratio: 0.05, mode: iau}
    evaluation: {shadows: 3}
    bench: {seeds: [0, 1, 2]}
    out: runs/blobs
"""

import dataclasses
import os
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError
from .models import ModelSpec
from .training import TrainConfig
from .unlearning import MODES

SOURCES = ("blobs", "moons", "csv", "idx")
PARTS = ("train", "val", "test", "shadow")


@dataclasses.dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    d: int = 10
    classes: int = 3
    spread: float = 0.5
    noise: float = 0.1
    label_noise: float = 0.0
    sizes: tuple = (("train", 1000), ("val", 200), ("test", 2000), ("shadow", 1200))
    split: tuple = (("train", 0.5), ("val", 0.1), ("test", 0.2), ("shadow", 0.2))
    path: Optional[str] = None
    label_column: str = "label"
    images: Optional[str] = None
    labels: Optional[str] = None

    @property
    def synthetic(self) -> bool:
        return self.source in ("blobs", "moons")


@dataclasses.dataclass(frozen=True)
class UnlearnConfig:
    ratio: Optional[float] = 0.05
    indices: Optional[tuple] = None
    eta: Optional[float] = None
    mode: str = "iau"


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    shadows: int = 3
    shadow_size: Optional[int] = None
    attack_lr: float = 0.05
    attack_batch_size: int = 64
    attack_max_epochs: int = 100
    attack_patience: int = 10


@dataclasses.dataclass(frozen=True)
class OracleConfig:
    damping: float = 0.0
    tol: float = 1e-10


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    model: dict = dataclasses.field(default_factory=lambda: {"kind": "logistic", "l2": 1e-3})
    train: TrainConfig = TrainConfig()
    unlearn: UnlearnConfig = UnlearnConfig()
    evaluation: EvalConfig = EvalConfig()
    oracle: OracleConfig = OracleConfig()
    bench_seeds: tuple = (0,)
    out: str = "out"

    def model_spec(self, input_dim: int, classes: int) -> ModelSpec:
        m = self.model
        if m["kind"] == "logistic":
            return ModelSpec.logistic(input_dim, classes, m["l2"])
        return ModelSpec.mlp(input_dim, m["hidden"], classes, m["activation"], m["l2"])

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# line lookup


def _line_index(node, path=(), out=None):
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            out[path + (str(k.value),)] = k.start_mark.line + 1
            _line_index(v, path + (str(k.value),), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (str(i),), out)
    return out


class _Checker:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, path, message):
        line = None
        for cut in range(len(path), -1, -1):
            if path[:cut] in self.lines:
                line = self.lines[path[:cut]]
                break
        raise ConfigError(message, field=".".join(path) or None, line=line)

    def section(self, raw, path, allowed):
        if raw is None:
            return {}
        if not isinstance(raw, dict):
            self.fail(path, "expected a mapping")
        for key in raw:
            if key not in allowed:
                self.fail(path + (str(key),), f"unknown key (allowed: {', '.join(allowed)})")
        return raw

    def integer(self, raw, path, default, lo=None, hi=None):
        v = raw.get(path[-1], default)
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(path, f"expected an integer, got {v!r}")
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            self.fail(path, f"value {v} out of range")
        return v

    def real(self, raw, path, default, lo=None, lo_open=False, hi=None, hi_open=False, optional=False):
        v = raw.get(path[-1], default)
        if v is None and optional:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(path, f"expected a number, got {v!r}")
        v = float(v)
        if v != v or v in (float("inf"), float("-inf")):
            self.fail(path, "must be finite")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            self.fail(path, f"value {v} must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            self.fail(path, f"value {v} must be {'<' if hi_open else '<='} {hi}")
        return v

    def choice(self, raw, path, default, options):
        v = raw.get(path[-1], default)
        if v not in options:
            self.fail(path, f"expected one of {', '.join(options)}, got {v!r}")
        return v

    def string(self, raw, path, default=None):
        v = raw.get(path[-1], default)
        if v is not None and not isinstance(v, str):
            self.fail(path, f"expected a string, got {v!r}")
        return v

    def existing_path(self, raw, path, base: Path):
        v = self.string(raw, path)
        if v is None:
            self.fail(path, "required for this data source")
        p = Path(v) if os.path.isabs(v) else base / v
        if not p.exists():
            self.fail(path, f"file not found: {p}")
        return str(p)


def _parse_data(ck, raw, base):
    p = ("data",)
    raw = ck.section(raw, p, ("source", "d", "classes", "spread", "noise", "label_noise", "sizes", "split",
                              "path", "label_column", "images", "labels"))
    source = ck.choice(raw, p + ("source",), "blobs", SOURCES)
    kw = {"source": source}
    kw["d"] = ck.integer(raw, p + ("d",), 10, lo=1)
    kw["classes"] = ck.integer(raw, p + ("classes",), 3, lo=2)
    kw["spread"] = ck.real(raw, p + ("spread",), 0.5, lo=0.0, lo_open=True)
    kw["noise"] = ck.real(raw, p + ("noise",), 0.1, lo=0.0)
    kw["label_noise"] = ck.real(raw, p + ("label_noise",), 0.0, lo=0.0, hi=1.0, hi_open=True)
    if source == "moons":
        kw["d"], kw["classes"] = 2, 2
    if source in ("blobs", "moons"):
        sizes = ck.section(raw.get("sizes"), p + ("sizes",), PARTS)
        defaults = dict(DataConfig.sizes)
        kw["sizes"] = tuple(
            (part, ck.integer(sizes, p + ("sizes", part), defaults[part], lo=0 if part == "shadow" else 1))
            for part in PARTS
        )
    else:
        split = ck.section(raw.get("split"), p + ("split",), PARTS)
        defaults = dict(DataConfig.split)
        fr = tuple((part, ck.real(split, p + ("split", part), defaults[part], lo=0.0)) for part in PARTS)
        if any(v == 0 for part, v in fr if part != "shadow"):
            ck.fail(p + ("split",), "train, val and test fractions must be positive")
        if abs(sum(v for _, v in fr) - 1.0) > 1e-9:
            ck.fail(p + ("split",), "fractions must sum to 1")
        kw["split"] = fr
    if source == "csv":
        kw["path"] = ck.existing_path(raw, p + ("path",), base)
        kw["label_column"] = ck.string(raw, p + ("label_column",), "label")
    if source == "idx":
        kw["images"] = ck.existing_path(raw, p + ("images",), base)
        kw["labels"] = ck.existing_path(raw, p + ("labels",), base)
    return DataConfig(**kw)


def _parse_model(ck, raw):
    p = ("model",)
    raw = ck.section(raw, p, ("kind", "hidden", "activation", "l2"))
    kind = ck.choice(raw, p + ("kind",), "logistic", ("logistic", "mlp"))
    hidden = raw.get("hidden", [] if kind == "logistic" else [32])
    if not isinstance(hidden, list) or any(isinstance(h, bool) or not isinstance(h, int) or h < 1 for h in hidden):
        ck.fail(p + ("hidden",), "expected a list of positive integers")
    if (kind == "logistic") != (len(hidden) == 0):
        ck.fail(p + ("hidden",), "hidden must be empty for logistic and nonempty for mlp")
    return {
        "kind": kind,
        "hidden": tuple(hidden),
        "activation": ck.choice(raw, p + ("activation",), "relu", ("relu", "tanh")),
        "l2": ck.real(raw, p + ("l2",), 1e-3, lo=0.0),
    }


def _parse_train(ck, raw):
    p = ("train",)
    raw = ck.section(raw, p, ("lr", "batch_size", "max_epochs", "patience", "alpha", "early_stopping"))
    max_epochs = ck.integer(raw, p + ("max_epochs",), 100, lo=1)
    patience = ck.integer(raw, p + ("patience",), 10, lo=1)
    if patience > max_epochs:
        ck.fail(p + ("patience",), "must not exceed max_epochs")
    early = raw.get("early_stopping", True)
    if not isinstance(early, bool):
        ck.fail(p + ("early_stopping",), "expected true or false")
    return TrainConfig(
        lr=ck.real(raw, p + ("lr",), 0.1, lo=0.0, lo_open=True),
        batch_size=ck.integer(raw, p + ("batch_size",), 32, lo=1),
        max_epochs=max_epochs,
        patience=patience,
        alpha=ck.real(raw, p + ("alpha",), 0.0, lo=0.0),
        early_stopping=early,
    )


def _parse_unlearn(ck, raw):
    p = ("unlearn",)
    raw = ck.section(raw, p, ("ratio", "indices", "eta", "mode"))
    if "ratio" in raw and "indices" in raw:
        ck.fail(p, "give either ratio or indices, not both")
    indices = None
    ratio = None
    if "indices" in raw:
        idx = raw["indices"]
        if not isinstance(idx, list) or not idx or any(isinstance(i, bool) or not isinstance(i, int) or i < 0
                                                       for i in idx):
            ck.fail(p + ("indices",), "expected a nonempty list of nonnegative integers")
        indices = tuple(sorted(set(idx)))
    else:
        ratio = ck.real(raw, p + ("ratio",), 0.05, lo=0.0, lo_open=True, hi=1.0, hi_open=True)
    return UnlearnConfig(
        ratio=ratio,
        indices=indices,
        eta=ck.real(raw, p + ("eta",), None, lo=0.0, lo_open=True, optional=True),
        mode=ck.choice(raw, p + ("mode",), "iau", MODES),
    )


def _parse_eval(ck, raw):
    p = ("evaluation",)
    raw = ck.section(raw, p, ("shadows", "shadow_size", "attack"))
    attack = ck.section(raw.get("attack"), p + ("attack",), ("lr", "batch_size", "max_epochs", "patience"))
    pa = p + ("attack",)
    max_epochs = ck.integer(attack, pa + ("max_epochs",), 100, lo=1)
    patience = ck.integer(attack, pa + ("patience",), 10, lo=1)
    if patience > max_epochs:
        ck.fail(pa + ("patience",), "must not exceed max_epochs")
    size = raw.get("shadow_size")
    if size is not None:
        size = ck.integer(raw, p + ("shadow_size",), None, lo=1)
    return EvalConfig(
        shadows=ck.integer(raw, p + ("shadows",), 3, lo=1),
        shadow_size=size,
        attack_lr=ck.real(attack, pa + ("lr",), 0.05, lo=0.0, lo_open=True),
        attack_batch_size=ck.integer(attack, pa + ("batch_size",), 64, lo=1),
        attack_max_epochs=max_epochs,
        attack_patience=patience,
    )


def _parse_oracle(ck, raw):
    p = ("oracle",)
    raw = ck.section(raw, p, ("damping", "tol"))
    return OracleConfig(
        damping=ck.real(raw, p + ("damping",), 0.0, lo=0.0),
        tol=ck.real(raw, p + ("tol",), 1e-10, lo=0.0, lo_open=True),
    )


def from_dict(raw, base: Path = Path("."), lines=None) -> ExperimentConfig:
    """Validate a parsed mapping; relative paths resolve against ``base``."""
    base = Path(base)
    ck = _Checker(lines or {})
    raw = ck.section(raw, (), ("seed", "data", "model", "train", "unlearn", "evaluation", "oracle", "bench", "out"))
    if "seed" not in raw:
        ck.fail(("seed",), "an explicit seed is required")
    seed = ck.integer(raw, ("seed",), None, lo=0, hi=2 ** 32 - 1)
    bench = ck.section(raw.get("bench"), ("bench",), ("seeds",))
    seeds = bench.get("seeds", [seed])
    if (not isinstance(seeds, list) or not seeds
            or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds)):
        ck.fail(("bench", "seeds"), "expected a nonempty list of nonnegative integers")
    out = ck.string(raw, ("out",), "out")
    return ExperimentConfig(
        seed=seed,
        data=_parse_data(ck, raw.get("data"), base),
        model=_parse_model(ck, raw.get("model")),
        train=dataclasses.replace(_parse_train(ck, raw.get("train")), seed=seed),
        unlearn=_parse_unlearn(ck, raw.get("unlearn")),
        evaluation=_parse_eval(ck, raw.get("evaluation")),
        oracle=_parse_oracle(ck, raw.get("oracle")),
        bench_seeds=tuple(seeds),
        out=out if os.path.isabs(out) else str(base / out),
    )


def loads(text: str, base: Path = Path(".")) -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(e, 'problem', None) or e}",
                          line=None if mark is None else mark.line + 1) from None
    if node is None:
        raise ConfigError("configuration is empty")
    return from_dict(raw, base, _line_index(node))


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read configuration: {e.strerror or e}") from None
    return loads(text, base=path.parent)
