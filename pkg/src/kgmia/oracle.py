"""Black-box access to a trained model: scores, hard labels, diagnostics."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import as_triple_array, corrupt_batch
from .models import KgeModel, ModelError, score_batch

CORRECT, CORRUPTED = "correct", "corrupted"
SCORE, LABEL = "score", "label"


class OracleError(RuntimeError):
    pass


class NotCalibrated(OracleError):
    pass


class QueryBudgetExceeded(OracleError):
    pass


@dataclass
class ClassifierCalibration:
    global_threshold: float
    global_accuracy: float
    thresholds: dict[int, float] = field(default_factory=dict)
    accuracies: dict[int, float] = field(default_factory=dict)
    per_relation: bool = True

    def threshold_for(self, relations) -> np.ndarray:
        relations = np.asarray(relations, dtype=np.int64)
        out = np.full(relations.shape, self.global_threshold, dtype=np.float64)
        if self.per_relation:
            for rel, thr in self.thresholds.items():
                out[relations == rel] = thr
        return out

    def save(self, path) -> None:
        lines = [f"# global_threshold\t{self.global_threshold!r}\t{self.global_accuracy!r}\t"
                 f"{'per_relation' if self.per_relation else 'global'}",
                 "relation\tthreshold\tvalidation_accuracy"]
        for rel in sorted(self.thresholds):
            lines.append(f"{rel}\t{self.thresholds[rel]!r}\t{self.accuracies[rel]!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ClassifierCalibration":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# global_threshold"):
            raise OracleError(f"{path}: missing global threshold header")
        head = lines[0].split("\t")
        calib = cls(float(head[1]), float(head[2]), per_relation=head[3] != "global")
        for line in lines[2:]:
            if line.strip():
                rel, thr, acc = line.split("\t")
                calib.thresholds[int(rel)] = float(thr)
                calib.accuracies[int(rel)] = float(acc)
        return calib


def best_threshold(pos_scores, neg_scores) -> tuple[float, float]:
    """Accuracy-maximising cut among midpoints of the distinct pooled scores.

    A triple is labelled correct iff its score <= threshold. Ties in
    accuracy go to the smallest threshold. Returns (threshold, accuracy),
    where accuracy is the mean of the two per-class accuracies.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise OracleError("threshold search needs positives and negatives")
    sv = np.unique(np.concatenate([pos, neg]))
    if len(sv) == 1:
        candidates = sv.copy()
    else:
        candidates = (sv[:-1] + sv[1:]) / 2.0
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    tp = np.searchsorted(pos_sorted, candidates, side="right")
    fp = np.searchsorted(neg_sorted, candidates, side="right")
    acc = 0.5 * (tp / len(pos) + (len(neg) - fp) / len(neg))
    best = float(acc.max())
    ok = np.flatnonzero(acc >= best - 1e-12)
    i = ok[np.argmin(candidates[ok])]
    return float(candidates[i]), float(acc[i])


class TargetOracle:
    """Score and label queries against a hidden model.

    The wrapped model is never returned. Query counts are kept per mode;
    ``max_queries`` turns the count into a hard budget.
    """

    __slots__ = ("_model", "_calibration", "_counts", "_invalid", "_lock", "max_queries")

    def __init__(self, model: KgeModel, calibration: ClassifierCalibration | None = None,
                 max_queries: int | None = None):
        self._model = model
        self._calibration = calibration
        self._counts = {SCORE: 0, LABEL: 0}
        self._invalid = 0
        self._lock = threading.Lock()
        self.max_queries = max_queries

    @property
    def n_entities(self) -> int:
        return self._model.n_entities

    @property
    def n_relations(self) -> int:
        return self._model.n_relations

    @property
    def calibrated(self) -> bool:
        return self._calibration is not None

    @property
    def calibration(self) -> ClassifierCalibration | None:
        return self._calibration

    def query_count(self, mode: str = SCORE) -> int:
        return self._counts[mode]

    @property
    def invalid_queries(self) -> int:
        return self._invalid

    def _charge(self, mode: str, n: int) -> None:
        with self._lock:
            if self.max_queries is not None and sum(self._counts.values()) + n > self.max_queries:
                raise QueryBudgetExceeded(f"query budget of {self.max_queries} exhausted")
            self._counts[mode] += n

    def _scores(self, triples, mode: str | None) -> np.ndarray:
        # mode None: owner-side evaluation, not charged to the query budget
        triples = as_triple_array(triples)
        try:
            out = score_batch(self._model, triples)
        except ModelError:
            with self._lock:
                self._invalid += len(triples)
            raise
        if mode is not None:
            self._charge(mode, len(triples))
        return out

    def query_scores(self, triples) -> np.ndarray:
        return self._scores(triples, SCORE)

    def query_score(self, triple) -> float:
        return float(self.query_scores([tuple(triple)])[0])

    def _labels(self, triples, mode: str | None) -> np.ndarray:
        if self._calibration is None:
            raise NotCalibrated("oracle has not been calibrated")
        triples = as_triple_array(triples)
        s = self._scores(triples, mode)
        return s <= self._calibration.threshold_for(triples[:, 1])

    def query_labels(self, triples) -> np.ndarray:
        """Boolean array, True meaning the oracle answers ``correct``."""
        return self._labels(triples, LABEL)

    def query_label(self, triple) -> str:
        return CORRECT if self.query_labels([tuple(triple)])[0] else CORRUPTED

    def calibrate(self, validation, rng: np.random.Generator, per_relation: bool = True) -> ClassifierCalibration:
        self._calibration = calibrate_scores(self, validation, rng, per_relation)
        return self._calibration

    def set_calibration(self, calibration: ClassifierCalibration) -> None:
        self._calibration = calibration

    def __repr__(self) -> str:
        return f"TargetOracle(calibrated={self.calibrated}, queries={dict(self._counts)})"


def calibrate_scores(oracle: TargetOracle, validation, rng: np.random.Generator,
                     per_relation: bool = True) -> ClassifierCalibration:
    """Pick triple-classification thresholds from the owner's validation facts.

    Every validation positive is paired with one corruption; thresholds are
    chosen per relation, with a pooled threshold as fallback for relations
    absent from validation.
    """
    validation = as_triple_array(validation)
    if len(validation) == 0:
        raise OracleError("calibration needs a non-empty validation set")
    negatives = corrupt_batch(validation, oracle.n_entities, rng)
    sp = oracle._scores(validation, None)
    sn = oracle._scores(negatives, None)
    gthr, gacc = best_threshold(sp, sn)
    calib = ClassifierCalibration(gthr, gacc, per_relation=per_relation)
    rels = validation[:, 1]
    for rel in np.unique(rels).tolist():
        mask = rels == rel
        thr, acc = best_threshold(sp[mask], sn[mask])
        calib.thresholds[rel] = thr
        calib.accuracies[rel] = acc
    return calib


def calibrate(oracle: TargetOracle, validation, rng: np.random.Generator,
              per_relation: bool = True) -> ClassifierCalibration:
    return oracle.calibrate(validation, rng, per_relation)


def query_score(oracle: TargetOracle, triple) -> float:
    return oracle.query_score(triple)


def query_label(oracle: TargetOracle, triple) -> str:
    return oracle.query_label(triple)


def classification_accuracy(oracle: TargetOracle, positives, rng: np.random.Generator) -> float:
    """Balanced accuracy on positives plus one corruption each."""
    positives = as_triple_array(positives)
    if len(positives) == 0:
        raise OracleError("accuracy needs a non-empty positive set")
    negatives = corrupt_batch(positives, oracle.n_entities, rng)
    pos_ok = oracle._labels(positives, None).mean()
    neg_ok = 1.0 - oracle._labels(negatives, None).mean()
    return float(0.5 * (pos_ok + neg_ok))


def overfit_level(oracle: TargetOracle, train_positives, test_positives, rng: np.random.Generator) -> float:
    """Train accuracy minus test accuracy on triple classification."""
    if not oracle.calibrated:
        raise NotCalibrated("overfit level needs a calibrated oracle")
    train_acc = classification_accuracy(oracle, train_positives, rng)
    test_acc = classification_accuracy(oracle, test_positives, rng)
    return train_acc - test_acc
