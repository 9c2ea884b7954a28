import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unlearn_lab import evaluation as ev
from unlearn_lab.datasets import gen_blobs
from unlearn_lab.errors import PoolTooSmall, SpecMismatch
from unlearn_lab.models import Checkpoint, ModelSpec, init_params
from unlearn_lab.training import TrainConfig


class Always:
    def __init__(self, answer):
        self.answer = answer

    def predict_member(self, features):
        return np.full(np.atleast_2d(features).shape[0], self.answer)


@pytest.fixture(scope="module")
def pool():
    return gen_blobs(120, 4, 3, 1.0, seed=11)


@pytest.fixture(scope="module")
def spec():
    return ModelSpec.logistic(4, 3, 1e-3)


@pytest.fixture(scope="module")
def shadows(spec, pool):
    return ev.train_shadows(spec, pool, 3, TrainConfig(lr=0.3, max_epochs=10, patience=5), seed=0)


def test_attack_features_sorted_descending():
    spec = ModelSpec.logistic(1, 3)
    # zero weights, biases log(0.1), log(0.7), log(0.2) give posterior [0.1, 0.7, 0.2]
    theta = np.concatenate([np.zeros(3), np.log([0.1, 0.7, 0.2])])
    feats = ev.attack_features(Checkpoint(spec, theta), [[0.0]])
    np.testing.assert_allclose(feats, [[0.7, 0.2, 0.1]], rtol=1e-12)


def test_default_shadow_count():
    assert ev.DEFAULT_SHADOWS == 3


def test_shadows_disjoint_and_same_architecture(shadows, spec):
    assert len(shadows) == 3
    seen = np.concatenate([np.concatenate([s.members, s.non_members]) for s in shadows])
    assert np.unique(seen).size == seen.size
    for s in shadows:
        assert s.checkpoint.spec == spec
        assert s.members.size == s.non_members.size == 20


def test_single_shadow_even_split(spec):
    pool = gen_blobs(40, 4, 3, 1.0, seed=1)
    (sh,) = ev.train_shadows(spec, pool, 1, TrainConfig(max_epochs=3, patience=3), train_size=20)
    assert sh.members.size == 20 and sh.non_members.size == 20
    assert np.union1d(sh.members, sh.non_members).tolist() == list(range(40))


def test_pool_too_small(spec, pool):
    with pytest.raises(PoolTooSmall):
        ev.train_shadows(spec, pool, 3, TrainConfig(), train_size=21)


def test_attack_dataset_balanced_and_normalized(shadows, pool):
    data = ev.build_attack_dataset(shadows, pool)
    for i in range(3):
        labels = data.labels[data.shadow_ids == i]
        assert (labels == 1).sum() == (labels == 0).sum()
    np.testing.assert_allclose(data.features.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.diff(data.features, axis=1) <= 0)


def test_attack_training_deterministic(shadows, pool):
    data = ev.build_attack_dataset(shadows, pool)
    cfg = ev.AttackTrainConfig(max_epochs=5, patience=5)
    a = ev.train_attack(data, seed=3, config=cfg)
    b = ev.train_attack(data, seed=3, config=cfg)
    assert a.params.tobytes() == b.params.tobytes() and a.heldout_accuracy == b.heldout_accuracy
    assert 0.0 <= a.heldout_accuracy <= 1.0


def test_attack_architecture():
    net = ev.AttackModelSpec().net(3)
    assert net.sizes == (3, 256, 128, 1) and net.head == "sigmoid"
    assert ev.AttackModelSpec().dropout == 0.5


def test_shuffled_labels_keep_balance(shadows, pool):
    data = ev.build_attack_dataset(shadows, pool)
    shuffled = ev.shuffled_labels(data, seed=0)
    assert shuffled.labels.sum() == data.labels.sum()
    assert not np.array_equal(shuffled.labels, data.labels)


def test_success_rate_extremes(spec, pool):
    ck = Checkpoint(spec, init_params(spec, 0))
    assert ev.attack_success_rate(Always(True), ck, pool) == 100.0
    assert ev.attack_success_rate(Always(False), ck, pool) == 0.0


def test_balanced_attack_accuracy_of_constant_attack(spec, pool):
    ck = Checkpoint(spec, init_params(spec, 0))
    assert ev.attack_accuracy(Always(True), ck, pool, pool) == 50.0


def test_self_comparison_is_zero(spec, pool):
    ck = Checkpoint(spec, init_params(spec, 2))
    rep = ev.compute_metrics(ck, ck, pool, pool.subset([0, 1, 2]), Always(True), 1.0)
    assert rep.mu == 0.0 and rep.ue == 0.0


def test_spec_mismatch(spec, pool):
    other = ModelSpec.logistic(4, 3, 0.5)
    with pytest.raises(SpecMismatch):
        ev.compute_metrics(Checkpoint(spec, init_params(spec, 0)), Checkpoint(other, init_params(other, 0)),
                           pool, pool, Always(True), 0.0)


def test_dominating_strategy_ranks():
    reports = {"a": ev.MetricsReport(mu=0.1, time_ms=1.0, ue=0.5), "b": ev.MetricsReport(mu=0.2, time_ms=2.0, ue=0.9)}
    assert ev.average_ranks(reports) == {"a": 0.0, "b": 1.0}
    assert reports["a"].avg_rank == 0.0


def test_average_rank_needs_two():
    with pytest.raises(ValueError):
        ev.average_ranks({"a": ev.MetricsReport(0.0, 0.0, 0.0)})


def test_competition_ranks_ties():
    assert ev.competition_ranks([3.0, 1.0, 1.0, 2.0]).tolist() == [3, 0, 0, 2]


def test_report_outputs():
    rep = ev.MetricsReport(mu=1.5, time_ms=2.0, ue=0.25, avg_rank=0.5, provenance={"seed": 1})
    assert "mu=1.5" in rep.to_record() and "seed=1" in rep.to_record()
    assert ev.reports_csv([("iau", rep)]).splitlines() == ["strategy,mu,time_ms,ue,avg_rank", "iau,1.5,2.0,0.25,0.5"]


@settings(max_examples=20, deadline=None)
@given(s1=st.integers(0, 1000), s2=st.integers(0, 1000))
def test_metrics_symmetric(s1, s2):
    spec = ModelSpec.logistic(4, 3)
    data = gen_blobs(60, 4, 3, 1.0, seed=0)
    a, b = Checkpoint(spec, init_params(spec, s1)), Checkpoint(spec, init_params(spec, s2))

    class Threshold:
        def predict_member(self, features):
            return features[:, 0] > 0.5

    ab = ev.compute_metrics(a, b, data, data, Threshold(), 0.0)
    ba = ev.compute_metrics(b, a, data, data, Threshold(), 0.0)
    assert ab.mu == ba.mu and ab.ue == ba.ue and ab.mu >= 0 and ab.ue >= 0


@settings(max_examples=50, deadline=None)
@given(mus=st.lists(st.integers(0, 100), min_size=2, max_size=6), shift=st.integers(0, 50),
       seed=st.integers(0, 1000))
def test_avg_rank_invariant_to_mu_shift(mus, shift, seed):
    r = np.random.default_rng(seed)
    times, ues = r.uniform(0, 10, len(mus)), r.uniform(0, 10, len(mus))

    def ranks(offset):
        reps = {str(i): ev.MetricsReport(float(m + offset), t, u) for i, (m, t, u) in enumerate(zip(mus, times, ues))}
        return ev.average_ranks(reps)

    assert ranks(0) == ranks(shift)
