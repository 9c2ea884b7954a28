"""Membership-inference evaluation and the utility/efficacy/rank metrics.

The attack follows the shadow-model recipe: ``k`` shadow models share the
target architecture and are trained on disjoint halves of a shadow pool;
their sorted posteriors on members (label 1) and non-members (label 0) train
a binary MLP that is then pointed at the target model's forget set.
"""

import csv
import dataclasses
import io
from typing import Optional, Sequence

import numpy as np

from . import numerics
from .datasets import Dataset
from .errors import PoolTooSmall, SpecMismatch
from .fileio import atomic_write
from .models import Checkpoint, ModelSpec, accuracy, forward, glorot_init
from .seeding import stream, stream_seed
from .training import TrainConfig, fit_sgd, train

DEFAULT_SHADOWS = 3


@dataclasses.dataclass(frozen=True)
class AttackModelSpec:
    hidden: tuple = (256, 128)
    activation: str = "relu"
    dropout: float = 0.5

    def net(self, input_dim: int) -> numerics.NetShape:
        return numerics.NetShape((input_dim, *self.hidden, 1), self.activation, head="sigmoid")


@dataclasses.dataclass(frozen=True)
class AttackTrainConfig:
    lr: float = 0.05
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    holdout_fraction: float = 0.2

    def sgd_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=seed)


@dataclasses.dataclass(frozen=True)
class Shadow:
    checkpoint: Checkpoint
    members: np.ndarray
    non_members: np.ndarray


@dataclasses.dataclass(frozen=True)
class AttackDataset:
    features: np.ndarray
    labels: np.ndarray
    shadow_ids: np.ndarray


@dataclasses.dataclass(frozen=True)
class AttackModel:
    spec: AttackModelSpec
    input_dim: int
    params: np.ndarray
    heldout_accuracy: float

    def member_probability(self, features) -> np.ndarray:
        X = np.asarray(features, dtype=np.float64)
        return numerics.probabilities(self.spec.net(self.input_dim), self.params, X)

    def predict_member(self, features) -> np.ndarray:
        return self.member_probability(features) > 0.5


@dataclasses.dataclass
class MetricsReport:
    mu: float
    time_ms: float
    ue: float
    avg_rank: Optional[float] = None
    provenance: dict = dataclasses.field(default_factory=dict)

    def to_record(self) -> str:
        """Flat ``key=value`` lines."""
        lines = [f"mu={self.mu!r}", f"time_ms={self.time_ms!r}", f"ue={self.ue!r}",
                 f"avg_rank={'' if self.avg_rank is None else repr(self.avg_rank)}"]
        lines += [f"{k}={v}" for k, v in sorted(self.provenance.items())]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shadows and attack data


def train_shadows(spec: ModelSpec, pool: Dataset, k: int, config: TrainConfig,
                  train_size: Optional[int] = None, seed: int = 0):
    """Train ``k`` shadow models on disjoint member/non-member halves of ``pool``.

    Shadow ``i`` takes ``2 * train_size`` pool points: the first half is its
    training (member) set and the second half its non-member set, which also
    drives its early stopping.
    """
    if k < 1:
        raise ValueError("need at least one shadow model")
    if train_size is None:
        train_size = pool.n // (2 * k)
    if train_size < 1 or 2 * k * train_size > pool.n:
        raise PoolTooSmall(f"pool of {pool.n} cannot supply {k} shadows of size {train_size}")
    perm = stream(seed, "shadow-pool").permutation(pool.n)
    shadows = []
    for i in range(k):
        chunk = perm[2 * i * train_size:2 * (i + 1) * train_size]
        members, non_members = np.sort(chunk[:train_size]), np.sort(chunk[train_size:])
        cfg = dataclasses.replace(config, seed=stream_seed(seed, f"shadow-{i}") % (2 ** 31))
        ckpt, _ = train(spec, pool.subset(members), cfg, val=pool.subset(non_members))
        shadows.append(Shadow(ckpt, members, non_members))
    return shadows


def attack_features(checkpoint: Checkpoint, X) -> np.ndarray:
    """Target posteriors sorted in descending order, one row per sample."""
    probs = forward(checkpoint.spec, checkpoint.params, np.atleast_2d(X))
    return -np.sort(-probs, axis=1)


def build_attack_dataset(shadows: Sequence[Shadow], pool: Dataset) -> AttackDataset:
    if not shadows:
        raise ValueError("no shadow models")
    feats, labels, ids = [], [], []
    for i, sh in enumerate(shadows):
        for idx, label in ((sh.members, 1), (sh.non_members, 0)):
            feats.append(attack_features(sh.checkpoint, pool.features[idx]))
            labels.append(np.full(idx.size, label))
            ids.append(np.full(idx.size, i))
    return AttackDataset(np.vstack(feats), np.concatenate(labels), np.concatenate(ids))


def _stratified_holdout(labels, fraction, rng):
    train_idx, hold_idx = [], []
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(fraction * idx.size))
        hold_idx.append(idx[:k])
        train_idx.append(idx[k:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(hold_idx))


def train_attack(data: AttackDataset, spec: AttackModelSpec = AttackModelSpec(), seed: int = 0,
                 config: AttackTrainConfig = AttackTrainConfig()) -> AttackModel:
    """Fit the attack MLP with SGD and dropout; report held-out accuracy.

    A stratified held-out split (``holdout_fraction``) is kept aside; early
    stopping uses a second stratified split of the remaining data.
    """
    rng = stream(seed, "attack")
    X, y = data.features, data.labels.astype(np.int64)
    fit_idx, hold_idx = _stratified_holdout(y, config.holdout_fraction, rng)
    tr_rel, val_rel = _stratified_holdout(y[fit_idx], config.holdout_fraction, rng)
    tr_idx, val_idx = fit_idx[tr_rel], fit_idx[val_rel]
    net = spec.net(X.shape[1])
    keep = 1.0 - spec.dropout
    dropout_rng = stream(seed, "attack-dropout")

    def batch_grad(theta, idx):
        Xb, yb = X[tr_idx[idx]], y[tr_idx[idx]]
        masks = None
        if spec.dropout > 0:
            masks = [(dropout_rng.random((Xb.shape[0], w)) < keep) / keep for w in spec.hidden]
        pres, inputs = numerics.net_forward(net, theta, Xb, masks)
        losses, delta = numerics.head_outputs(net, pres[-1], yb)
        g = numerics.net_backward(net, theta, pres, inputs, delta, masks)
        return float(losses.mean()), g / Xb.shape[0]

    def score(theta, idx=val_idx):
        p = numerics.probabilities(net, theta, X[idx])
        return float(np.mean((p > 0.5) == (y[idx] == 1)))

    theta0 = glorot_init(net, stream(seed, "attack-init"))
    result = fit_sgd(theta0, tr_idx.size, batch_grad, score, config.sgd_config(seed),
                     stream(seed, "attack-shuffle"))
    return AttackModel(spec, X.shape[1], result.theta, score(result.theta, hold_idx))


def attack_success_rate(attack, target: Checkpoint, forget: Dataset) -> float:
    """Percentage of ``forget`` the attack labels as training members."""
    if forget.n == 0:
        raise ValueError("forget set is empty")
    hits = np.asarray(attack.predict_member(attack_features(target, forget.features)))
    return 100.0 * float(np.mean(hits))


def attack_accuracy(attack, target: Checkpoint, members: Dataset, non_members: Dataset) -> float:
    """Balanced membership accuracy (percent) of ``attack`` against ``target``."""
    tpr = np.mean(attack.predict_member(attack_features(target, members.features)))
    tnr = 1.0 - np.mean(attack.predict_member(attack_features(target, non_members.features)))
    return 100.0 * float(0.5 * (tpr + tnr))


def shuffled_labels(data: AttackDataset, seed: int) -> AttackDataset:
    """Same features, membership labels permuted: a no-signal control."""
    labels = stream(seed, "label-shuffle").permutation(data.labels)
    return AttackDataset(data.features, labels, data.shadow_ids)


# ---------------------------------------------------------------------------
# metrics


def utility_gap(unlearned: Checkpoint, gold: Checkpoint, test_set: Dataset) -> float:
    """MU: absolute test-accuracy gap in percentage points."""
    if unlearned.spec != gold.spec:
        raise SpecMismatch("unlearned and gold checkpoints have different model specs")
    acc_u = accuracy(unlearned.spec, unlearned.params, test_set.features, test_set.labels)
    acc_g = accuracy(gold.spec, gold.params, test_set.features, test_set.labels)
    return abs(acc_u - acc_g) * 100.0


def compute_metrics(unlearned: Checkpoint, gold: Checkpoint, test_set: Dataset, forget: Dataset,
                    attack, time_ms: float, provenance: Optional[dict] = None) -> MetricsReport:
    """MU and UE are absolute gaps to the gold model, in percentage points."""
    if unlearned.spec != gold.spec:
        raise SpecMismatch("unlearned and gold checkpoints have different model specs")
    spec = gold.spec
    acc_u = accuracy(spec, unlearned.params, test_set.features, test_set.labels)
    acc_g = accuracy(spec, gold.params, test_set.features, test_set.labels)
    asr_u = attack_success_rate(attack, unlearned, forget)
    asr_g = attack_success_rate(attack, gold, forget)
    prov = {"acc_unlearned": acc_u, "acc_gold": acc_g, "asr_unlearned": asr_u, "asr_gold": asr_g}
    prov.update(provenance or {})
    return MetricsReport(mu=abs(acc_u - acc_g) * 100.0, time_ms=float(time_ms), ue=abs(asr_u - asr_g),
                         provenance=prov)


def competition_ranks(values: Sequence[float]) -> np.ndarray:
    """0-based ascending competition ranks: ties share the best rank."""
    v = np.asarray(values, dtype=np.float64)
    return np.array([int(np.sum(v < x)) for x in v])


def average_ranks(reports: dict) -> dict:
    """Mean of the MU, Time and UE ranks per strategy (needs two or more)."""
    if len(reports) < 2:
        raise ValueError("average rank needs at least two strategies")
    names = list(reports)
    per_metric = [competition_ranks([getattr(reports[n], m) for n in names]) for m in ("mu", "time_ms", "ue")]
    avg = np.mean(per_metric, axis=0)
    for name, r in zip(names, avg):
        reports[name].avg_rank = float(r)
    return {name: float(r) for name, r in zip(names, avg)}


def reports_csv(rows: Sequence[tuple]) -> str:
    """CSV for ``[(strategy, MetricsReport), ...]``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "mu", "time_ms", "ue", "avg_rank"])
    for name, rep in rows:
        w.writerow([name, repr(rep.mu), repr(rep.time_ms), repr(rep.ue),
                    "" if rep.avg_rank is None else repr(rep.avg_rank)])
    return buf.getvalue()


def save_report(report: MetricsReport, path) -> None:
    atomic_write(path, report.to_record().encode())
