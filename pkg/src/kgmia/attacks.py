"""Transfer, prediction-loss and prediction-correctness membership attacks.

Attacks only talk to a target through its oracle: ``query_scores``,
``query_labels`` and the public vocabulary sizes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import as_triple_array, corrupt_batch
from .models import LOGISTIC, MARGIN, TrainConfig, train
from .oracle import CORRECT, CORRUPTED, NotCalibrated, TargetOracle
from .rng import make_rng

TA, PLA, PCA = "TA", "PLA", "PCA"
ATTACK_KINDS = (TA, PLA, PCA)


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class MembershipQuery:
    triple: tuple[int, int, int]
    true_label_for_pca: str = CORRECT


@dataclass(frozen=True)
class AttackDecision:
    triple: tuple[int, int, int]
    predicted_member: int
    evidence: float


def make_queries(triples, label: str = CORRECT) -> list[MembershipQuery]:
    return [MembershipQuery(tuple(t), label) for t in as_triple_array(triples).tolist()]


def _query_triples(candidates) -> np.ndarray:
    return as_triple_array([q.triple for q in candidates])


def _decisions(triples: np.ndarray, predicted, evidence) -> list[AttackDecision]:
    return [AttackDecision(tuple(t), int(p), float(e))
            for t, p, e in zip(triples.tolist(), np.asarray(predicted).tolist(), np.asarray(evidence).tolist())]


# --------------------------------------------------------------------------
# attack classifier

_P_LO, _P_HI = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class AttackClassifier:
    """1 -> 64 -> 64 -> 1 ReLU network with a sigmoid output."""

    def __init__(self, hidden: int = 64, seed: int = 0, standardize: bool = False):
        rng = make_rng(seed, "attack-mlp")
        sizes = [1, hidden, hidden, 1]
        self.weights = [rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
                        for fan_in, fan_out in zip(sizes[:-1], sizes[1:])]
        self.biases = [np.zeros(n) for n in sizes[1:]]
        self.standardize = standardize
        self.shift, self.scale = 0.0, 1.0
        self.final_loss = float("nan")

    def _prepare(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        return (x - self.shift) / self.scale

    def _forward(self, x):
        acts = [x]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(np.maximum(z, 0.0) if i < len(self.weights) - 1 else z)
        return acts

    def predict_proba(self, scores) -> np.ndarray:
        logits = self._forward(self._prepare(scores))[-1][:, 0]
        # keep the output strictly inside (0, 1) even where float sigmoid saturates
        return np.clip(_sigmoid(logits), _P_LO, _P_HI)

    def predict(self, scores) -> np.ndarray:
        return (self.predict_proba(scores) >= 0.5).astype(np.int64)

    def fit(self, scores, labels, *, epochs: int = 200, lr: float = 0.01, batch_size: int = 128,
            seed: int = 0) -> "AttackClassifier":
        """Mini-batch gradient descent on binary cross-entropy."""
        x_raw = np.asarray(scores, dtype=np.float64).reshape(-1, 1)
        y = np.asarray(labels, dtype=np.float64).reshape(-1)
        if self.standardize:
            self.shift = float(x_raw.mean())
            self.scale = float(x_raw.std()) or 1.0
        x = self._prepare(x_raw)
        rng = make_rng(seed, "attack-mlp-batches")
        n = len(x)
        for _ in range(epochs):
            order = rng.permutation(n)
            for s in range(0, n, batch_size):
                idx = order[s:s + batch_size]
                acts = self._forward(x[idx])
                # d(BCE)/d(logit) = sigmoid(logit) - y
                delta = (_sigmoid(acts[-1][:, 0]) - y[idx])[:, None] / len(idx)
                for i in range(len(self.weights) - 1, -1, -1):
                    gw = acts[i].T @ delta
                    gb = delta.sum(axis=0)
                    if i > 0:
                        delta = (delta @ self.weights[i].T) * (acts[i] > 0)
                    self.weights[i] -= lr * gw
                    self.biases[i] -= lr * gb
        self.final_loss = bce(self.predict_proba(x_raw[:, 0]), y)
        return self


def bce(prob, y) -> float:
    p = np.clip(np.asarray(prob, dtype=np.float64), 1e-12, 1 - 1e-12)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


# --------------------------------------------------------------------------
# transfer attack

def ta_train_shadow(shadow_train, n_entities: int, n_relations: int, config: TrainConfig) -> TargetOracle:
    """Train a shadow model with the target's declared recipe and wrap it."""
    result = train(shadow_train, n_entities, n_relations, config)
    return TargetOracle(result.model)


def ta_build_attack_set(shadow_oracle: TargetOracle, shadow_train, shadow_test,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shadow scores labelled 1 (trained on) or 0 (held out), class-balanced."""
    shadow_train, shadow_test = as_triple_array(shadow_train), as_triple_array(shadow_test)
    if len(shadow_train) == 0 or len(shadow_test) == 0:
        raise AttackError("attack set needs both shadow members and non-members")
    n = min(len(shadow_train), len(shadow_test))
    members = shadow_train[np.sort(rng.choice(len(shadow_train), n, replace=False))]
    non_members = shadow_test[np.sort(rng.choice(len(shadow_test), n, replace=False))]
    scores = np.concatenate([shadow_oracle.query_scores(members), shadow_oracle.query_scores(non_members)])
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
    return scores, labels


def ta_fit(scores, labels, *, seed: int = 0, standardize: bool = False, epochs: int = 200,
           lr: float = 0.01, batch_size: int = 128) -> AttackClassifier:
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise AttackError("attack set must contain both membership labels")
    clf = AttackClassifier(seed=seed, standardize=standardize)
    return clf.fit(scores, labels, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)


def ta_infer(classifier: AttackClassifier, target_oracle: TargetOracle, candidates) -> list[AttackDecision]:
    triples = _query_triples(candidates)
    prob = classifier.predict_proba(target_oracle.query_scores(triples))
    return _decisions(triples, prob >= 0.5, prob)


# --------------------------------------------------------------------------
# prediction-loss attack

def pla_losses(target_oracle: TargetOracle, triples, loss_metric: str = LOGISTIC, margin: float = 4.0,
               rng: np.random.Generator | None = None, k: int = 1) -> np.ndarray:
    triples = as_triple_array(triples)
    s = target_oracle.query_scores(triples)
    if loss_metric == LOGISTIC:
        return np.logaddexp(0.0, s)
    if loss_metric != MARGIN:
        raise AttackError(f"unknown loss metric {loss_metric!r}")
    if rng is None:
        raise AttackError("the margin metric needs an rng for corruptions")
    total = np.zeros(len(triples))
    for _ in range(k):
        neg = corrupt_batch(triples, target_oracle.n_entities, rng)
        total += np.maximum(margin + s - target_oracle.query_scores(neg), 0.0)
    return total / k


def pla_decide(losses) -> tuple[np.ndarray, float]:
    """Member iff loss <= mean loss over the queried candidates."""
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) == 0:
        raise AttackError("no candidates")
    delta = float(losses.mean())
    # the mean of identical values can drift by an ulp
    if np.all(losses == losses[0]):
        delta = float(losses[0])
    return (losses <= delta).astype(np.int64), delta


def pla_infer(target_oracle: TargetOracle, candidates, loss_metric: str = LOGISTIC, margin: float = 4.0,
              rng: np.random.Generator | None = None, k: int = 1) -> list[AttackDecision]:
    triples = _query_triples(candidates)
    if len(triples) == 0:
        raise AttackError("no candidates")
    losses = pla_losses(target_oracle, triples, loss_metric, margin, rng, k)
    predicted, _ = pla_decide(losses)
    return _decisions(triples, predicted, losses)


# --------------------------------------------------------------------------
# prediction-correctness attack

def pca_infer(target_oracle: TargetOracle, candidates) -> list[AttackDecision]:
    """Member iff the oracle's hard label matches the candidate's true label."""
    if not target_oracle.calibrated:
        raise NotCalibrated("prediction-correctness attack needs a calibrated oracle")
    triples = _query_triples(candidates)
    said_correct = target_oracle.query_labels(triples)
    truth = np.array([q.true_label_for_pca == CORRECT for q in candidates], dtype=bool)
    hit = said_correct == truth
    return _decisions(triples, hit, hit.astype(np.float64))


__all__ = [
    "TA", "PLA", "PCA", "ATTACK_KINDS", "AttackError", "MembershipQuery", "AttackDecision",
    "AttackClassifier", "make_queries", "ta_train_shadow", "ta_build_attack_set", "ta_fit",
    "ta_infer", "pla_losses", "pla_decide", "pla_infer", "pca_infer", "CORRECT", "CORRUPTED",
]
