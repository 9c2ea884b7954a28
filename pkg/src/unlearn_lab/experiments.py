"""Train -> unlearn -> evaluate pipelines shared by the CLI and the benchmarks."""

import csv
import dataclasses
import io
from typing import Optional, Sequence

import numpy as np

from . import evaluation as ev
from .config import ExperimentConfig
from .datasets import Dataset, Partition, gen_blobs, gen_moons, load_csv, load_idx, make_partition, split, \
    with_label_noise
from .errors import ConfigError
from .models import Checkpoint, ModelSpec
from .numerics import cosine, rel_error
from .seeding import stream_seed
from .training import TrainHistory, fit_newton, train
from .unlearning import InfluenceQuery, UnlearnRequest, default_eta, influence_add_predict, influence_remove, \
    retrain_oracle, unlearn

STRATEGIES = ("iau", "incremental_only", "retrain")


@dataclasses.dataclass(frozen=True)
class ExperimentData:
    train: Dataset
    val: Dataset
    test: Dataset
    shadow_pool: Optional[Dataset]

    @property
    def classes(self) -> int:
        return max(d.classes for d in (self.train, self.val, self.test))


def prepare_data(cfg: ExperimentConfig, seed: int) -> ExperimentData:
    """Build train/val/test (and the shadow pool) from the ``data`` section.

    Synthetic parts are drawn independently from per-part streams; file
    sources are shuffled and cut by the configured fractions.
    """
    dc = cfg.data
    parts = {}
    if dc.synthetic:
        for part, size in dc.sizes:
            if size == 0:
                continue
            s = stream_seed(seed, f"{part}-data")
            if dc.source == "blobs":
                ds = gen_blobs(size, dc.d, dc.classes, dc.spread, s)
            else:
                ds = gen_moons(size, dc.noise, s)
            parts[part] = ds.subset(np.arange(ds.n), part)
    else:
        full = load_csv(dc.path, dc.label_column) if dc.source == "csv" else load_idx(dc.images, dc.labels)
        names = [p for p, f in dc.split if f > 0]
        pieces = split(full, [f for _, f in dc.split if f > 0], stream_seed(seed, "split"))
        parts = {name: ds.subset(np.arange(ds.n), name) for name, ds in zip(names, pieces)}
    train_set = parts["train"]
    if dc.label_noise > 0:
        train_set, _ = with_label_noise(train_set, dc.label_noise, stream_seed(seed, "label-noise"))
    return ExperimentData(train_set, parts["val"], parts["test"], parts.get("shadow"))


def model_for(cfg: ExperimentConfig, data: ExperimentData) -> ModelSpec:
    return cfg.model_spec(data.train.d, data.classes)


def partition_for(cfg: ExperimentConfig, n: int, seed: int) -> Partition:
    uc = cfg.unlearn
    if uc.indices is not None:
        if max(uc.indices) >= n:
            raise ConfigError(f"forget index {max(uc.indices)} outside the training set of {n}",
                              field="unlearn.indices")
        return make_partition(n, indices=uc.indices)
    return make_partition(n, ratio=uc.ratio, seed=seed)


def step_size(cfg: ExperimentConfig, n_train: int) -> float:
    return cfg.unlearn.eta if cfg.unlearn.eta is not None else default_eta(cfg.train.lr, n_train)


def train_target(cfg: ExperimentConfig, data: ExperimentData, seed: int):
    spec = model_for(cfg, data)
    return train(spec, data.train, cfg.train_config(seed), val=data.val)


def run_strategy(name: str, cfg: ExperimentConfig, target: Checkpoint, data: ExperimentData,
                 part: Partition, seed: int):
    """Returns ``(checkpoint, elapsed_ms)`` for one strategy."""
    if name == "retrain":
        remain = data.train.subset(part.remain_indices, "remain")
        return retrain_oracle(target.spec, remain, cfg.train_config(seed), val=data.val)
    request = UnlearnRequest(part, step_size(cfg, data.train.n), name)
    return unlearn(target, data.train, request)


def build_attack(cfg: ExperimentConfig, spec: ModelSpec, pool: Dataset, seed: int):
    ec = cfg.evaluation
    shadows = ev.train_shadows(spec, pool, ec.shadows, cfg.train_config(seed), ec.shadow_size, seed)
    attack_cfg = ev.AttackTrainConfig(lr=ec.attack_lr, batch_size=ec.attack_batch_size,
                                      max_epochs=ec.attack_max_epochs, patience=ec.attack_patience)
    return ev.train_attack(ev.build_attack_dataset(shadows, pool), seed=seed, config=attack_cfg)


@dataclasses.dataclass
class CellResult:
    seed: int
    target: Checkpoint
    history: TrainHistory
    partition: Partition
    outputs: dict
    reports: dict
    mu: dict


def run_cell(cfg: ExperimentConfig, seed: int, strategies: Sequence[str] = STRATEGIES,
             with_attack: bool = True) -> CellResult:
    """One bench cell: train, unlearn with every strategy, score against the retrain.

    ``reports`` (MU, Time, UE, Avg Rank) is filled only when ``with_attack``
    and a shadow pool exist; ``mu`` is always filled.
    """
    data = prepare_data(cfg, seed)
    target, history = train_target(cfg, data, seed)
    part = partition_for(cfg, data.train.n, seed)
    outputs = {"retrain": run_strategy("retrain", cfg, target, data, part, seed)}
    for name in strategies:
        if name != "retrain":
            outputs[name] = run_strategy(name, cfg, target, data, part, seed)
    gold = outputs["retrain"][0]
    mu = {name: ev.utility_gap(ck, gold, data.test) for name, (ck, _) in outputs.items()}
    reports = {}
    if with_attack:
        if data.shadow_pool is None:
            raise ConfigError("evaluation needs a shadow pool", field="data.sizes.shadow")
        attack = build_attack(cfg, target.spec, data.shadow_pool, seed)
        forget = data.train.subset(part.forget_indices, "forget")
        for name, (ck, ms) in outputs.items():
            reports[name] = ev.compute_metrics(ck, gold, data.test, forget, attack, ms, {"seed": seed})
        ranked = {k: v for k, v in reports.items() if k != "retrain"}
        if len(ranked) >= 2:
            ev.average_ranks(ranked)
    return CellResult(seed, target, history, part, outputs, reports, mu)


# ---------------------------------------------------------------------------
# tables


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def metrics_csv(cells: Sequence[CellResult]) -> str:
    """Timing-free metrics; identical across reruns."""
    rows = []
    for c in cells:
        for name, rep in c.reports.items():
            p = rep.provenance
            rows.append([c.seed, name, _fmt(rep.mu), _fmt(rep.ue), _fmt(p["acc_unlearned"]),
                         _fmt(p["acc_gold"]), _fmt(p["asr_unlearned"]), _fmt(p["asr_gold"])])
    return _csv(["seed", "strategy", "mu", "ue", "acc_unlearned", "acc_gold", "asr_unlearned", "asr_gold"], rows)


def timing_csv(cells: Sequence[CellResult]) -> str:
    """Wall times and the time-dependent average ranks."""
    rows = []
    for c in cells:
        for name, (_, ms) in c.outputs.items():
            rep = c.reports.get(name)
            rows.append([c.seed, name, _fmt(ms), _fmt(rep.avg_rank if rep else None)])
    return _csv(["seed", "strategy", "time_ms", "avg_rank"], rows)


def summary_text(cells: Sequence[CellResult]) -> str:
    names = list(cells[0].outputs)
    lines = [f"seeds: {', '.join(str(c.seed) for c in cells)}",
             f"{'strategy':<18}{'MU':>10}{'UE':>10}{'time_ms':>14}{'avg_rank':>10}"]
    for name in names:
        mu = np.mean([c.mu[name] for c in cells])
        ue = np.mean([c.reports[name].ue for c in cells]) if cells[0].reports else float("nan")
        ms = np.mean([c.outputs[name][1] for c in cells])
        ranks = [c.reports[name].avg_rank for c in cells if c.reports and c.reports[name].avg_rank is not None]
        rank = f"{np.mean(ranks):10.3f}" if ranks else f"{'-':>10}"
        lines.append(f"{name:<18}{mu:10.3f}{ue:10.3f}{ms:14.3f}{rank}")
    if "iau" in names:
        speed = np.mean([c.outputs["retrain"][1] / max(c.outputs["iau"][1], 1e-9) for c in cells])
        lines.append(f"retrain / iau wall time: {speed:.1f}x")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# influence oracle


@dataclasses.dataclass
class OracleResult:
    direction: str
    index: int
    base: np.ndarray
    predicted: np.ndarray
    retrained: np.ndarray

    @property
    def predicted_delta(self) -> np.ndarray:
        return self.predicted - self.base

    @property
    def actual_delta(self) -> np.ndarray:
        return self.retrained - self.base

    @property
    def cosine(self) -> float:
        return cosine(self.predicted_delta, self.actual_delta)

    @property
    def rel_error(self) -> float:
        return rel_error(self.predicted_delta, self.actual_delta)


def append_sample(ds: Dataset, x, y, name=None) -> Dataset:
    return Dataset(np.vstack([ds.features, np.asarray(x, dtype=np.float64)[None, :]]),
                   np.concatenate([ds.labels, [int(y)]]), name or ds.name, ds.provenance, ds.classes)


def influence_check(spec: ModelSpec, train_set: Dataset, direction: str, index: int,
                    extra: Optional[Dataset] = None, theta0=None, damping: float = 0.0,
                    tol: float = 1e-10) -> OracleResult:
    """Influence prediction vs Newton retraining for one removed or added point.

    ``index`` addresses ``train_set`` for removal and ``extra`` for addition.
    The base model is first brought to the training optimum.
    """
    if spec.kind != "logistic" or spec.l2 <= 0:
        raise ConfigError("the influence oracle needs l2-regularized logistic regression", field="model")
    base = fit_newton(spec, train_set.features, train_set.labels, theta0=theta0, tol=tol)
    ckpt = Checkpoint(spec, base)
    query = InfluenceQuery(damping=damping, tol=tol)
    if direction == "remove":
        predicted = influence_remove(ckpt, train_set, index, query)
        other = train_set.subset(np.setdiff1d(np.arange(train_set.n), [index]))
    elif direction == "add":
        x, y = extra.features[index], extra.labels[index]
        predicted = influence_add_predict(ckpt, train_set, x, y, query)
        other = append_sample(train_set, x, y)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    retrained = fit_newton(spec, other.features, other.labels, theta0=base, tol=tol)
    return OracleResult(direction, index, base, predicted, retrained)


def oracle_csv(result: OracleResult) -> str:
    return _csv(["direction", "index", "cosine", "rel_error", "predicted_norm", "actual_norm"],
                [[result.direction, result.index, _fmt(result.cosine), _fmt(result.rel_error),
                  _fmt(np.linalg.norm(result.predicted_delta)), _fmt(np.linalg.norm(result.actual_delta))]])
