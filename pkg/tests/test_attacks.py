import inspect

import numpy as np
import pytest

import kgmia.attacks as attacks
from kgmia.attacks import (CORRECT, CORRUPTED, AttackClassifier, AttackError, make_queries, pca_infer,
                           pla_decide, pla_infer, pla_losses, ta_build_attack_set, ta_fit, ta_infer,
                           ta_train_shadow)
from kgmia.data import make_split, synthetic_kg
from kgmia.evaluation import compute_metrics
from kgmia.models import LOGISTIC, MARGIN, TRANSE, TrainConfig, train
from kgmia.oracle import NotCalibrated, TargetOracle


@pytest.fixture(scope="module")
def setup():
    store = synthetic_kg(150, 4, 1600, seed=5)
    plan = make_split(store, 1)
    cfg = TrainConfig(TRANSE, epochs=60, dim=16, seed=2)
    target = TargetOracle(train(plan.target_train, store.n_entities, store.n_relations, cfg).model)
    target.calibrate(plan.shadow_test[:200], np.random.default_rng(0))
    return store, plan, cfg, target


class StubOracle:
    """Only the black-box surface; scores are a fixed function of the ids."""

    n_entities, n_relations, calibrated = 50, 3, True

    def __init__(self):
        self.calls = 0

    def query_scores(self, triples):
        self.calls += 1
        t = np.asarray(triples)
        return (t[:, 0] * 7 + t[:, 2] * 3 + t[:, 1]) % 11 / 2.0

    def query_labels(self, triples):
        return self.query_scores(triples) <= 2.5


def test_attacks_run_against_a_stub_oracle():
    stub = StubOracle()
    queries = make_queries([(1, 0, 2), (3, 1, 4), (5, 2, 6), (7, 0, 8)])
    clf = ta_fit([0.0, 0.5, 4.0, 5.0], [1, 1, 0, 0], seed=0)
    for decisions in (ta_infer(clf, stub, queries),
                      pla_infer(stub, queries, LOGISTIC),
                      pla_infer(stub, queries, MARGIN, rng=np.random.default_rng(0)),
                      pca_infer(stub, queries)):
        assert len(decisions) == 4
        assert all(d.predicted_member in (0, 1) for d in decisions)
    assert stub.calls >= 4


def test_attack_code_never_touches_model_internals():
    src = inspect.getsource(attacks)
    body = src.split('"""', 2)[2]  # skip the module docstring
    for forbidden in ("score_batch", "._model", ".entity", ".relation", "KgeModel", "._scores(", "._labels("):
        assert forbidden not in body


def test_attack_set_counts(setup):
    store, plan, _, target = setup
    rng = np.random.default_rng(0)
    scores, labels = ta_build_attack_set(target, plan.shadow_train[:100], plan.shadow_test[:100], rng)
    assert len(scores) == 200 and labels.sum() == 100
    scores, labels = ta_build_attack_set(target, plan.shadow_train[:150], plan.shadow_test[:100], rng)
    assert len(scores) == 200 and labels.sum() == 100
    assert np.all(labels[:100] == 1)
    with pytest.raises(AttackError):
        ta_build_attack_set(target, plan.shadow_train[:0], plan.shadow_test[:10], rng)


def test_shadow_with_target_recipe_is_the_target(setup):
    store, plan, cfg, target = setup
    shadow = ta_train_shadow(plan.target_train, store.n_entities, store.n_relations, cfg)
    assert np.array_equal(shadow.query_scores(store.triples), target.query_scores(store.triples))


def test_overfit_shadow_separates_train_from_test():
    store = synthetic_kg(150, 4, 1600, seed=5)
    plan = make_split(store, 1)
    shadow = ta_train_shadow(plan.shadow_train, store.n_entities, store.n_relations,
                             TrainConfig(TRANSE, epochs=300, dim=32, seed=0))
    s_train, s_test = shadow.query_scores(plan.shadow_train), shadow.query_scores(plan.shadow_test)
    assert np.all(np.isfinite(s_train)) and np.all(np.isfinite(s_test))
    assert s_test.mean() - s_train.mean() > 0


def test_separable_scores_are_learned_perfectly():
    rng = np.random.default_rng(0)
    scores = np.concatenate([rng.uniform(0, 1, 200), rng.uniform(9, 10, 200)])
    labels = np.repeat([1, 0], 200)
    clf = ta_fit(scores, labels, seed=3)
    assert np.mean(clf.predict(scores) == labels) == 1.0
    assert np.isfinite(clf.final_loss)
    grid = np.linspace(-1, 11, 241)
    pred = clf.predict(grid)
    assert np.all(pred[grid <= 1] == 1) and np.all(pred[grid >= 9] == 0)
    flips = np.flatnonzero(np.diff(pred) != 0)
    assert len(flips) == 1 and 1 < grid[flips[0]] < 9


@pytest.mark.parametrize("seed", range(5))
def test_indistinguishable_scores_give_chance(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=1000)
    labels = rng.permutation(np.repeat([0, 1], 500))
    clf = ta_fit(scores, labels, seed=seed)
    assert abs(np.mean(clf.predict(scores) == labels) - 0.5) <= 0.05


def test_single_class_attack_set_is_rejected():
    with pytest.raises(AttackError):
        ta_fit([1.0, 2.0], [1, 1])


def test_classifier_output_range_and_tie_rule(setup):
    _, plan, _, target = setup
    clf = AttackClassifier(seed=0)
    p = clf.predict_proba(np.linspace(-50, 50, 101))
    assert np.all((p > 0) & (p < 1))
    for w in clf.weights:
        w[:] = 0.0
    assert clf.predict_proba([3.0])[0] == 0.5
    decisions = ta_infer(clf, target, make_queries(plan.target_test[:3]))
    assert [d.predicted_member for d in decisions] == [1, 1, 1]
    assert [d.evidence for d in decisions] == [0.5] * 3


def test_classifier_is_deterministic():
    x, y = np.arange(20.0), np.repeat([1, 0], 10)
    a, b = ta_fit(x, y, seed=4), ta_fit(x, y, seed=4)
    assert np.array_equal(a.predict_proba(x), b.predict_proba(x))


def test_high_probability_means_member():
    clf = AttackClassifier(seed=0)
    for w in clf.weights:
        w[:] = 0.0
    clf.biases[-1][:] = np.log(9.0)  # sigmoid -> 0.9
    assert clf.predict([0.0])[0] == 1
    assert clf.predict_proba([0.0])[0] == pytest.approx(0.9)


def test_pla_threshold_examples():
    pred, delta = pla_decide([0.0, 2.0])
    assert delta == 1.0 and pred.tolist() == [1, 0]
    pred, delta = pla_decide([0.1] * 7)
    assert pred.tolist() == [1] * 7
    with pytest.raises(AttackError):
        pla_decide([])


@pytest.mark.parametrize("shift", [-3.0, 0.5, 1e3])
def test_pla_shift_only_moves_delta(shift):
    losses = np.random.default_rng(0).exponential(size=500)
    pred, delta = pla_decide(losses)
    pred2, delta2 = pla_decide(losses + shift)
    assert np.array_equal(pred, pred2)
    assert delta2 == pytest.approx(delta + shift)


def test_pla_losses_follow_definitions(setup):
    store, plan, _, target = setup
    trip = plan.target_test[:50]
    s = target.query_scores(trip)
    assert np.allclose(pla_losses(target, trip, LOGISTIC), np.log1p(np.exp(s)))
    margin = pla_losses(target, trip, MARGIN, margin=4.0, rng=np.random.default_rng(0))
    assert np.all(margin >= 0)
    with pytest.raises(AttackError):
        pla_losses(target, trip, MARGIN)
    with pytest.raises(AttackError):
        pla_infer(target, [])


def test_pca_rules(setup):
    _, plan, _, target = setup
    t = tuple(plan.target_train[0])
    said = target.query_label(t)
    d_true, d_false = pca_infer(target, make_queries([t], CORRECT) + make_queries([t], CORRUPTED))
    assert d_true.predicted_member == int(said == CORRECT)
    assert d_false.predicted_member == int(said == CORRUPTED)


def test_pca_needs_calibration(setup):
    store, plan, _, _ = setup
    bare = TargetOracle(train(plan.target_train[:50], store.n_entities, store.n_relations,
                              TrainConfig(TRANSE, epochs=1, dim=4)).model)
    with pytest.raises(NotCalibrated):
        pca_infer(bare, make_queries(plan.target_train[:2]))


def test_pca_accuracy_identity(setup):
    _, plan, _, target = setup
    n = min(len(plan.target_train), len(plan.target_test))
    members, non_members = plan.target_train[:n], plan.target_test[:n]
    decisions = pca_infer(target, make_queries(members) + make_queries(non_members))
    truth = [1] * n + [0] * n
    m = compute_metrics(decisions, truth)
    r_m = target.query_labels(members).mean()
    r_n = target.query_labels(non_members).mean()
    assert abs(m.accuracy - (r_m + 1 - r_n) / 2) <= 1e-12
    assert abs(m.recall - r_m) <= 1e-12
