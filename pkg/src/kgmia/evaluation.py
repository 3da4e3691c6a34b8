"""Attack metrics, the end-to-end experiment pipeline and ablation grids."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks
from .attacks import PCA, PLA, TA, AttackDecision
from .data import (SplitPlan, TripleStore, as_triple_array, carve_validation, make_split,
                   triples_checksum)
from .models import L1, LOGISTIC, MARGIN, KgeModel, TrainConfig, TrainResult, train
from .oracle import ClassifierCalibration, TargetOracle, classification_accuracy
from .rng import derive_seed, make_rng

logger = logging.getLogger(__name__)

REGIMES = {"early-stop": 0.1, "default": 1.0, "overfit": 5.0}
DATASET_AXIS, MODEL_AXIS = "shadow_dataset", "shadow_model"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    f1: float
    precision: float
    recall: float


def confusion(predicted, truth) -> tuple[int, int, int, int]:
    p = np.asarray(predicted).astype(bool)
    y = np.asarray(truth).astype(bool)
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    tn = int(np.sum(~p & ~y))
    return tp, fp, fn, tn


def metrics_from_confusion(tp: int, fp: int, fn: int, tn: int) -> Metrics:
    total = tp + fp + fn + tn
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics((tp + tn) / total, f1, precision, recall)


def compute_metrics(decisions, truth) -> Metrics:
    """Accuracy, F1, precision and recall of membership predictions.

    ``decisions`` may be AttackDecision objects or plain 0/1 predictions.
    """
    decisions = list(decisions)
    truth = list(truth)
    if not decisions:
        raise EvaluationError("no decisions to score")
    if len(decisions) != len(truth):
        raise EvaluationError(f"{len(decisions)} decisions but {len(truth)} truth bits")
    predicted = [d.predicted_member if isinstance(d, AttackDecision) else int(d) for d in decisions]
    return metrics_from_confusion(*confusion(predicted, truth))


# --------------------------------------------------------------------------
# experiment pipeline

@dataclass(frozen=True)
class ExperimentConfig:
    """Everything besides the dataset and seed that determines a run.

    ``learning_rate`` and ``loss_kind`` left as None follow the model
    family, so one config serves targets and shadows of different kinds.
    ``epochs`` is the default-regime budget; the regime scales it.
    """

    epochs: int = 100
    dim: int = 50
    learning_rate: float | None = None
    margin: float = 4.0
    negatives_per_positive: int = 1
    batch_size: int = 128
    norm: str = L1
    loss_kind: str | None = None
    regime: str = "default"
    pla_metric: str = LOGISTIC
    pla_k: int = 1
    per_relation: bool = True
    validation_fraction: float = 0.1
    ta_standardize: bool = False
    ta_epochs: int = 200
    ta_lr: float = 0.01
    ta_batch_size: int = 128
    shadow_model_kind: str | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise EvaluationError(f"unknown regime {self.regime!r}; expected one of {', '.join(REGIMES)}")
        if self.pla_metric not in (LOGISTIC, MARGIN):
            raise EvaluationError(f"unknown PLA metric {self.pla_metric!r}")

    def train_config(self, model_kind: str, seed: int) -> TrainConfig:
        cfg = TrainConfig(model_kind=model_kind, epochs=self.epochs, dim=self.dim,
                          learning_rate=self.learning_rate, margin=self.margin,
                          negatives_per_positive=self.negatives_per_positive,
                          batch_size=self.batch_size, seed=seed, loss_kind=self.loss_kind, norm=self.norm)
        return cfg.scaled(REGIMES[self.regime])

    def target_train_config(self, model_kind: str, seed: int) -> TrainConfig:
        return self.train_config(model_kind, derive_seed(seed, "target-model"))

    def shadow_train_config(self, model_kind: str, seed: int) -> TrainConfig:
        return self.train_config(self.shadow_model_kind or model_kind, derive_seed(seed, "shadow-model"))

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackReport:
    attack_kind: str
    model_kind: str
    dataset_name: str
    accuracy: float
    f1: float
    precision: float
    recall: float
    overfit_level: float
    config_fingerprint: str
    seed: int
    shadow_model_kind: str = ""
    shadow_dataset_name: str = ""
    pla_metric: str = ""
    regime: str = ""
    n_members: int = 0
    n_non_members: int = 0
    target_train_accuracy: float = float("nan")
    target_test_accuracy: float = float("nan")
    score_queries: int = 0
    label_queries: int = 0
    decisions_path: str = ""
    notes: str = ""

    def metrics(self) -> Metrics:
        return Metrics(self.accuracy, self.f1, self.precision, self.recall)


REPORT_FIELDS = list(AttackReport.__dataclass_fields__)


@dataclass
class TargetContext:
    """A trained and calibrated target plus its balanced evaluation set."""

    dataset_name: str
    store: TripleStore
    plan: SplitPlan
    model_kind: str
    seed: int
    config: ExperimentConfig
    result: TrainResult
    fit: np.ndarray
    validation: np.ndarray
    members: np.ndarray
    non_members: np.ndarray
    calibration: ClassifierCalibration
    overfit: float
    train_accuracy: float
    test_accuracy: float

    def oracle(self) -> TargetOracle:
        """A fresh oracle (zeroed query counters) over the target model."""
        return TargetOracle(self.result.model, self.calibration)


def fingerprint(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _balanced(members: np.ndarray, non_members: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    n = min(len(members), len(non_members))
    if n == 0:
        raise EvaluationError("evaluation needs members and non-members")
    m = members[np.sort(rng.choice(len(members), n, replace=False))]
    nm = non_members[np.sort(rng.choice(len(non_members), n, replace=False))]
    return m, nm


class ModelCache:
    """Memoises training runs by (data checksum, config)."""

    def __init__(self):
        self._runs: dict[tuple, TrainResult] = {}

    def train(self, triples, n_entities: int, n_relations: int, config: TrainConfig) -> TrainResult:
        key = (triples_checksum(triples), n_entities, n_relations, json.dumps(config.as_dict(), sort_keys=True))
        if key not in self._runs:
            self._runs[key] = train(triples, n_entities, n_relations, config)
        return self._runs[key]


def _train(cache, triples, n_e, n_r, cfg) -> TrainResult:
    if cache is None:
        return train(triples, n_e, n_r, cfg)
    return cache.train(triples, n_e, n_r, cfg)


def prepare_target(store: TripleStore, model_kind: str, config: ExperimentConfig, seed: int,
                   dataset_name: str = "dataset", cache: ModelCache | None = None) -> TargetContext:
    """Split, train and calibrate the target; build the balanced evaluation set."""
    plan = make_split(store, seed)
    fit, _ = target_fit_split(plan, seed, config.validation_fraction)
    tcfg = config.target_train_config(model_kind, seed)
    result = _train(cache, fit, store.n_entities, store.n_relations, tcfg)
    return build_context(store, plan, result, config, seed, dataset_name)


def target_fit_split(plan: SplitPlan, seed: int, fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    return carve_validation(plan.target_train, derive_seed(seed, "target-validation"), fraction)


def shadow_fit_split(plan: SplitPlan, seed: int, fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    return carve_validation(plan.shadow_train, derive_seed(seed, "shadow-validation"), fraction)


def build_context(store: TripleStore, plan: SplitPlan, result: TrainResult, config: ExperimentConfig,
                  seed: int, dataset_name: str = "dataset",
                  calibration: ClassifierCalibration | None = None) -> TargetContext:
    """Calibrate an already trained target (unless given a calibration) and fix its evaluation set."""
    fit, valid = target_fit_split(plan, seed, config.validation_fraction)
    oracle = TargetOracle(result.model, calibration)
    if calibration is None:
        calibration = oracle.calibrate(valid, make_rng(seed, "calibrate"), per_relation=config.per_relation)
    train_acc = classification_accuracy(oracle, fit, make_rng(seed, "overfit"))
    test_acc = classification_accuracy(oracle, plan.target_test, make_rng(seed, "overfit", "test"))
    members, non_members = _balanced(fit, plan.target_test, make_rng(seed, "eval-balance"))
    return TargetContext(dataset_name, store, plan, result.model.kind, seed, config, result, fit, valid,
                         members, non_members, calibration, train_acc - test_acc, train_acc, test_acc)


def attack_target(ctx: TargetContext, attack_kind: str, *, shadow_store: TripleStore | None = None,
                  shadow_dataset_name: str | None = None, shadow_model_kind: str | None = None,
                  cache: ModelCache | None = None, shadow_model: KgeModel | None = None,
                  ) -> tuple[AttackReport, list[AttackDecision], np.ndarray]:
    """Mount one attack on a prepared target. Returns (report, decisions, truth).

    TA trains its shadow unless a ready ``shadow_model`` is passed in.
    """
    config = ctx.config
    if shadow_model_kind is not None:
        config = replace(config, shadow_model_kind=shadow_model_kind)
    seed = ctx.seed
    oracle = ctx.oracle()
    candidates = attacks.make_queries(np.concatenate([ctx.members, ctx.non_members]))
    truth = np.concatenate([np.ones(len(ctx.members), dtype=np.int64),
                            np.zeros(len(ctx.non_members), dtype=np.int64)])
    shadow_kind = ""
    shadow_name = ""
    if attack_kind == TA:
        sstore = shadow_store if shadow_store is not None else ctx.store
        splan = ctx.plan if shadow_store is None else make_split(sstore, seed)
        sfit, _ = shadow_fit_split(splan, seed, config.validation_fraction)
        scfg = config.shadow_train_config(ctx.model_kind, seed)
        if shadow_model is None:
            shadow_model = _train(cache, sfit, sstore.n_entities, sstore.n_relations, scfg).model
        shadow = TargetOracle(shadow_model)
        scores, labels = attacks.ta_build_attack_set(shadow, sfit, splan.shadow_test,
                                                     make_rng(seed, "attack-set"))
        clf = attacks.ta_fit(scores, labels, seed=derive_seed(seed, "attack-model"),
                             standardize=config.ta_standardize, epochs=config.ta_epochs,
                             lr=config.ta_lr, batch_size=config.ta_batch_size)
        decisions = attacks.ta_infer(clf, oracle, candidates)
        shadow_kind = shadow_model.kind
        shadow_name = shadow_dataset_name or ctx.dataset_name
    elif attack_kind == PLA:
        decisions = attacks.pla_infer(oracle, candidates, config.pla_metric, config.margin,
                                      make_rng(seed, "pla"), config.pla_k)
    elif attack_kind == PCA:
        decisions = attacks.pca_infer(oracle, candidates)
    else:
        raise EvaluationError(f"unknown attack kind {attack_kind!r}")
    m = compute_metrics(decisions, truth)
    fp_payload = {
        "attack": attack_kind, "model": ctx.model_kind, "dataset": ctx.dataset_name,
        "data": triples_checksum(ctx.store.triples), "seed": seed,
        # the effective shadow kind is recorded below; an explicit default must not change the hash
        "config": replace(config, shadow_model_kind=None).as_dict(),
        "shadow_model": shadow_kind, "shadow_dataset": shadow_name,
        "shadow_data": triples_checksum(shadow_store.triples) if shadow_store is not None else "",
    }
    report = AttackReport(
        attack_kind=attack_kind, model_kind=ctx.model_kind, dataset_name=ctx.dataset_name,
        accuracy=m.accuracy, f1=m.f1, precision=m.precision, recall=m.recall,
        overfit_level=ctx.overfit, config_fingerprint=fingerprint(fp_payload), seed=seed,
        shadow_model_kind=shadow_kind, shadow_dataset_name=shadow_name,
        pla_metric=config.pla_metric if attack_kind == PLA else "", regime=config.regime,
        n_members=len(ctx.members), n_non_members=len(ctx.non_members),
        target_train_accuracy=ctx.train_accuracy, target_test_accuracy=ctx.test_accuracy,
        score_queries=oracle.query_count("score"), label_queries=oracle.query_count("label"),
        notes="PLA threshold is the mean loss over the queried candidates" if attack_kind == PLA else "",
    )
    return report, decisions, truth


def run_experiment(dataset: TripleStore, model_kind: str, attack_kind: str, config: ExperimentConfig,
                   seed: int, *, dataset_name: str = "dataset", shadow_dataset: TripleStore | None = None,
                   shadow_dataset_name: str | None = None, shadow_model_kind: str | None = None,
                   out_dir=None, cache: ModelCache | None = None) -> AttackReport:
    """split -> target training -> calibration -> attack -> metrics.

    With ``out_dir`` the decisions CSV and a one-row report CSV are written
    there, only after the whole run succeeded.
    """
    ctx = prepare_target(dataset, model_kind, config, seed, dataset_name, cache)
    report, decisions, truth = attack_target(ctx, attack_kind, shadow_store=shadow_dataset,
                                             shadow_dataset_name=shadow_dataset_name,
                                             shadow_model_kind=shadow_model_kind, cache=cache)
    if out_dir is not None:
        write_run_outputs(report, decisions, truth, out_dir)
    return report


# --------------------------------------------------------------------------
# ablation grids

@dataclass
class GridSpec:
    """Targets x shadows grid for transfer attacks.

    Dataset axis: ``rows`` and ``columns`` are dataset names (keys of
    ``datasets``) and ``model_kind`` is fixed. Model axis: rows and columns
    are model kinds and ``dataset`` names the single dataset.
    """

    axis: str
    rows: list[str]
    columns: list[str]
    datasets: dict[str, TripleStore]
    config: ExperimentConfig
    seed: int = 0
    model_kind: str = "ComplEx"
    dataset: str | None = None
    jobs: int = 1


@dataclass
class AblationGrid:
    axis: str
    rows: list[str]
    columns: list[str]
    cells: list[list[AttackReport | None]]
    errors: dict[tuple[int, int], str] = field(default_factory=dict)

    def accuracy_matrix(self) -> np.ndarray:
        return np.array([[c.accuracy if c is not None else np.nan for c in row] for row in self.cells])


def cell_seed(grid_seed: int, row: int, col: int) -> int:
    return derive_seed(grid_seed, "cell", row, col)


def _run_cell(spec: GridSpec, i: int, j: int) -> AttackReport:
    seed = cell_seed(spec.seed, i, j)
    if spec.axis == DATASET_AXIS:
        target_name, shadow_name = spec.rows[i], spec.columns[j]
        return run_experiment(spec.datasets[target_name], spec.model_kind, TA, spec.config, seed,
                              dataset_name=target_name, shadow_dataset=spec.datasets[shadow_name],
                              shadow_dataset_name=shadow_name)
    if spec.axis == MODEL_AXIS:
        name = spec.dataset or next(iter(spec.datasets))
        return run_experiment(spec.datasets[name], spec.rows[i], TA, spec.config, seed,
                              dataset_name=name, shadow_model_kind=spec.columns[j])
    raise EvaluationError(f"unknown ablation axis {spec.axis!r}")


def _cell_task(args):
    spec, i, j = args
    try:
        return i, j, _run_cell(spec, i, j), None
    except Exception as exc:  # a failed cell must not sink the grid
        return i, j, None, f"{type(exc).__name__}: {exc}"


def run_ablation(spec: GridSpec) -> AblationGrid:
    tasks = [(spec, i, j) for i in range(len(spec.rows)) for j in range(len(spec.columns))]
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(_cell_task, tasks))
    else:
        results = [_cell_task(t) for t in tasks]
    cells: list[list[AttackReport | None]] = [[None] * len(spec.columns) for _ in spec.rows]
    grid = AblationGrid(spec.axis, list(spec.rows), list(spec.columns), cells)
    for i, j, report, err in results:
        cells[i][j] = report
        if err:
            logger.warning("ablation cell (%s, %s) failed: %s", spec.rows[i], spec.columns[j], err)
            grid.errors[(i, j)] = err
    return grid


def write_grid(grid: AblationGrid, out_dir) -> tuple[Path, Path]:
    """Accuracy matrix CSV plus a plain-text heat table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"ablation_{grid.axis}.csv"
    mat = grid.accuracy_matrix()
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target \\ shadow"] + grid.columns)
        for name, row in zip(grid.rows, mat):
            w.writerow([name] + ["failed" if np.isnan(v) else f"{v:.6f}" for v in row])
    txt_path = out_dir / f"ablation_{grid.axis}.txt"
    txt_path.write_text(heat_table(grid) + "\n")
    with open(out_dir / f"ablation_{grid.axis}_cells.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["row", "column"] + REPORT_FIELDS)
        w.writeheader()
        for name, row in zip(grid.rows, grid.cells):
            for col, cell in zip(grid.columns, row):
                if cell is not None:
                    w.writerow({"row": name, "column": col, **asdict(cell)})
    return csv_path, txt_path


_SHADES = " .:-=+*#%@"


def heat_table(grid: AblationGrid) -> str:
    """Fixed-width accuracy table; the glyph darkens from 0.5 towards 1.0."""
    mat = grid.accuracy_matrix()
    width = max(10, *(len(c) + 2 for c in grid.columns))
    label_w = max(16, *(len(r) + 2 for r in grid.rows))
    corner = "target \\ shadow"
    lines = [f"{corner:<{label_w}}" + "".join(f"{c:>{width}}" for c in grid.columns)]
    for name, row in zip(grid.rows, mat):
        cells = []
        for v in row:
            if np.isnan(v):
                cells.append(f"{'failed':>{width}}")
                continue
            level = int(np.clip((v - 0.5) / 0.5, 0, 0.999) * len(_SHADES))
            cells.append(f"{v * 100:>{width - 2}.2f} {_SHADES[level]}")
        lines.append(f"{name:<{label_w}}" + "".join(cells))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# score histograms

@dataclass
class ScoreHistogram:
    edges: np.ndarray
    member_counts: np.ndarray
    non_member_counts: np.ndarray

    def overlap(self) -> int:
        return int(np.minimum(self.member_counts, self.non_member_counts).sum())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "members", "non_members"])
            for lo, hi, a, b in zip(self.edges[:-1], self.edges[1:], self.member_counts, self.non_member_counts):
                w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(a), int(b)])


def score_histogram(oracle: TargetOracle, member_set, non_member_set, bins: int = 20) -> ScoreHistogram:
    """Binned oracle scores of members and non-members over shared edges."""
    a = oracle.query_scores(as_triple_array(member_set))
    b = oracle.query_scores(as_triple_array(non_member_set))
    if len(a) == 0 or len(b) == 0:
        raise EvaluationError("histogram needs non-empty member and non-member sets")
    lo, hi = float(min(a.min(), b.min())), float(max(a.max(), b.max()))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return ScoreHistogram(edges, np.histogram(a, edges)[0], np.histogram(b, edges)[0])


# --------------------------------------------------------------------------
# report files

def write_decisions_csv(decisions, truth, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["head", "relation", "tail", "evidence", "predicted_member", "member"])
        for d, y in zip(decisions, truth):
            h, r, t = d.triple
            w.writerow([h, r, t, repr(float(d.evidence)), d.predicted_member, int(y)])


def write_reports_csv(reports, path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        if new:
            w.writeheader()
        for r in reports:
            w.writerow(asdict(r))


def read_reports_csv(path) -> list[AttackReport]:
    out = []
    types = {name: f.type for name, f in AttackReport.__dataclass_fields__.items()}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types.get(k)
                if t in ("float", float):
                    kw[k] = float(v)
                elif t in ("int", int):
                    kw[k] = int(v)
                else:
                    kw[k] = v
            out.append(AttackReport(**kw))
    return out


def write_run_outputs(report: AttackReport, decisions, truth, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{report.attack_kind}_{report.model_kind}_{report.dataset_name}_{report.config_fingerprint}"
    dec_path = out_dir / f"decisions_{stem}.csv"
    tmp = dec_path.with_suffix(".csv.tmp")
    write_decisions_csv(decisions, truth, tmp)
    os.replace(tmp, dec_path)
    report.decisions_path = str(dec_path)
    write_reports_csv([report], out_dir / f"report_{stem}.csv")
    return dec_path


def markdown_summary(reports) -> str:
    """One table per attack: models as rows, dataset blocks of Acc/F1/Precision/Recall."""
    reports = list(reports)
    blocks = []
    for attack in sorted({r.attack_kind for r in reports}, key=lambda a: (a not in (TA, PLA, PCA), a)):
        for metric in sorted({r.pla_metric for r in reports if r.attack_kind == attack}):
            rs = [r for r in reports if r.attack_kind == attack and r.pla_metric == metric]
            datasets = list(dict.fromkeys(r.dataset_name for r in rs))
            models = list(dict.fromkeys(r.model_kind for r in rs))
            title = attack + (f" ({metric} metric)" if metric else "")
            head = "| Model | " + " | ".join(f"{d} Acc | F1 | Precision | Recall" for d in datasets) + " |"
            sep = "|---|" + "---|" * (4 * len(datasets))
            lines = [f"### {title}", "", head, sep]
            for m in models:
                cells = []
                for d in datasets:
                    sel = [r for r in rs if r.model_kind == m and r.dataset_name == d]
                    if not sel:
                        cells += ["-"] * 4
                        continue
                    vals = np.array([[r.accuracy, r.f1, r.precision, r.recall] for r in sel]) * 100
                    mean = vals.mean(axis=0)
                    if len(sel) > 1:
                        rng_ = vals.max(axis=0) - vals.min(axis=0)
                        cells += [f"{a:.2f} (±{b / 2:.2f})" for a, b in zip(mean, rng_)]
                    else:
                        cells += [f"{a:.2f}" for a in mean]
                lines.append(f"| {m} | " + " | ".join(cells) + " |")
            avg = ["Average accuracy"]
            for d in datasets:
                accs = [r.accuracy for r in rs if r.dataset_name == d]
                avg.append(f"{100 * np.mean(accs):.2f}%")
            lines.append("")
            lines.append(" / ".join(f"{d}: {a}" for d, a in zip(datasets, avg[1:])))
            blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
