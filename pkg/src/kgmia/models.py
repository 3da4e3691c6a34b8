"""TransE, TransH, DistMult and ComplEx: scoring, losses, SGD training, model files.

Scores follow one convention for every model: lower means more plausible.
Translation models score the raw distance; bilinear models score the
negated product.
"""
from __future__ import annotations

import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import as_triple_array, corrupt_batch
from .rng import make_rng

logger = logging.getLogger(__name__)

TRANSE, TRANSH, DISTMULT, COMPLEX = "TransE", "TransH", "DistMult", "ComplEx"
MODEL_KINDS = (TRANSE, TRANSH, DISTMULT, COMPLEX)
TRANSLATIONAL = (TRANSE, TRANSH)
MARGIN, LOGISTIC = "margin", "logistic"
L1, L2 = "L1", "L2"


class ModelError(ValueError):
    pass


class ModelFormatError(ModelError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss or gradient at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def canonical_kind(kind: str) -> str:
    for k in MODEL_KINDS:
        if k.lower() == str(kind).lower():
            return k
    raise ModelError(f"unknown model kind {kind!r}; expected one of {', '.join(MODEL_KINDS)}")


def default_loss(kind: str) -> str:
    return MARGIN if canonical_kind(kind) in TRANSLATIONAL else LOGISTIC


DEFAULT_LEARNING_RATE = {MARGIN: 0.5, LOGISTIC: 0.5}


def default_learning_rate(loss_kind: str) -> float:
    return DEFAULT_LEARNING_RATE[loss_kind]


@dataclass
class KgeModel:
    kind: str
    dim: int
    entity: np.ndarray
    relation: np.ndarray
    norm: str | None = None
    normal: np.ndarray | None = None        # TransH hyperplane normals w_r
    entity_im: np.ndarray | None = None     # ComplEx imaginary parts
    relation_im: np.ndarray | None = None

    @property
    def n_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation.shape[0]

    def blocks(self) -> dict[str, np.ndarray]:
        """Parameter blocks in file order."""
        out = {"entity": self.entity, "relation": self.relation}
        if self.kind == TRANSH:
            out["normal"] = self.normal
        if self.kind == COMPLEX:
            out["entity_im"] = self.entity_im
            out["relation_im"] = self.relation_im
        return out

    def copy(self, dtype=None) -> "KgeModel":
        kw = {name: np.array(arr, dtype=dtype or arr.dtype) for name, arr in self.blocks().items()}
        return replace(self, **kw)

    def frozen(self) -> "KgeModel":
        """float32 read-only copy; what training returns and model files hold."""
        m = self.copy(np.float32)
        for arr in m.blocks().values():
            arr.setflags(write=False)
        return m


def _validate(model: KgeModel, triples: np.ndarray) -> None:
    if len(triples) == 0:
        return
    if triples.min() < 0:
        raise ModelError("negative id in triple")
    if max(triples[:, 0].max(), triples[:, 2].max()) >= model.n_entities:
        raise ModelError("entity id out of range for model")
    if triples[:, 1].max() >= model.n_relations:
        raise ModelError("relation id out of range for model")


def _rows(arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return arr[idx].astype(np.float64, copy=False)


def _distance(diff: np.ndarray, norm: str) -> np.ndarray:
    if norm == L1:
        return np.abs(diff).sum(axis=1)
    return np.sqrt((diff * diff).sum(axis=1))


def _distance_grad(diff: np.ndarray, norm: str) -> np.ndarray:
    if norm == L1:
        return np.sign(diff)
    d = np.sqrt((diff * diff).sum(axis=1, keepdims=True))
    return diff / np.maximum(d, 1e-12)


def _translation_diff(model: KgeModel, h, r, t):
    e = _rows(model.entity, h) - _rows(model.entity, t)
    rel = _rows(model.relation, r)
    if model.kind == TRANSE:
        return e + rel, e, None
    w = _rows(model.normal, r)
    proj = (w * e).sum(axis=1, keepdims=True)
    return e - proj * w + rel, e, w


def score_batch(model: KgeModel, triples) -> np.ndarray:
    """Scores of an (n, 3) id array as float64."""
    triples = as_triple_array(triples)
    _validate(model, triples)
    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    if model.kind in TRANSLATIONAL:
        diff, _, _ = _translation_diff(model, h, r, t)
        return _distance(diff, model.norm)
    if model.kind == DISTMULT:
        return -(_rows(model.entity, h) * _rows(model.relation, r) * _rows(model.entity, t)).sum(axis=1)
    hr, hi = _rows(model.entity, h), _rows(model.entity_im, h)
    rr, ri = _rows(model.relation, r), _rows(model.relation_im, r)
    tr, ti = _rows(model.entity, t), _rows(model.entity_im, t)
    return -(hr * rr * tr + hi * rr * ti + hr * ri * ti - hi * ri * tr).sum(axis=1)


def score(model: KgeModel, triple) -> float:
    return float(score_batch(model, [tuple(triple)])[0])


def score_gradients(model: KgeModel, triples, upstream) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Row-wise gradients of ``sum(upstream * score(triples))``.

    Returns ``{block: (row_ids, row_grads)}``; rows may repeat and must be
    accumulated (``np.add.at``).
    """
    triples = as_triple_array(triples)
    g = np.asarray(upstream, dtype=np.float64)[:, None]
    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    ents = np.concatenate([h, t])
    if model.kind in TRANSLATIONAL:
        diff, e, w = _translation_diff(model, h, r, t)
        u = g * _distance_grad(diff, model.norm)
        if model.kind == TRANSE:
            return {"entity": (ents, np.concatenate([u, -u])), "relation": (r, u)}
        pu = u - (w * u).sum(axis=1, keepdims=True) * w
        gw = -((u * w).sum(axis=1, keepdims=True) * e + (w * e).sum(axis=1, keepdims=True) * u)
        return {"entity": (ents, np.concatenate([pu, -pu])), "relation": (r, u), "normal": (r, gw)}
    if model.kind == DISTMULT:
        hv, rv, tv = _rows(model.entity, h), _rows(model.relation, r), _rows(model.entity, t)
        return {"entity": (ents, np.concatenate([-g * rv * tv, -g * hv * rv])), "relation": (r, -g * hv * tv)}
    hr, hi = _rows(model.entity, h), _rows(model.entity_im, h)
    rr, ri = _rows(model.relation, r), _rows(model.relation_im, r)
    tr, ti = _rows(model.entity, t), _rows(model.entity_im, t)
    return {
        "entity": (ents, np.concatenate([-g * (rr * tr + ri * ti), -g * (hr * rr - hi * ri)])),
        "entity_im": (ents, np.concatenate([-g * (rr * ti - ri * tr), -g * (hi * rr + hr * ri)])),
        "relation": (r, -g * (hr * tr + hi * ti)),
        "relation_im": (r, -g * (hr * ti - hi * tr)),
    }


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def margin_terms(pos_scores, neg_scores, margin: float):
    """Per-pair hinge loss and its derivatives w.r.t. both scores."""
    raw = margin + np.asarray(pos_scores) - np.asarray(neg_scores)
    active = (raw > 0).astype(np.float64)
    return np.maximum(raw, 0.0), active, -active


def logistic_terms(pos_scores, neg_scores):
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    loss = softplus(pos_scores) + softplus(-neg_scores)
    return loss, _sigmoid(pos_scores), -_sigmoid(-neg_scores)


def loss_margin(model: KgeModel, positive, negative, margin: float) -> float:
    if margin <= 0:
        raise ModelError("margin must be positive")
    loss, _, _ = margin_terms(score(model, positive), score(model, negative), margin)
    return float(loss)


def loss_logistic(model: KgeModel, positive, negative) -> float:
    loss, _, _ = logistic_terms(score(model, positive), score(model, negative))
    return float(loss)


def pair_loss_and_grads(model: KgeModel, positives, negatives, loss_kind: str, margin: float = 1.0):
    """Summed loss over aligned (positive, negative) pairs and dense gradients."""
    positives, negatives = as_triple_array(positives), as_triple_array(negatives)
    sp, sn = score_batch(model, positives), score_batch(model, negatives)
    if loss_kind == MARGIN:
        loss, gp, gn = margin_terms(sp, sn, margin)
    else:
        loss, gp, gn = logistic_terms(sp, sn)
    grads = {name: np.zeros(arr.shape) for name, arr in model.blocks().items()}
    for trip, up in ((positives, gp), (negatives, gn)):
        for name, (rows, vals) in score_gradients(model, trip, up).items():
            np.add.at(grads[name], rows, vals)
    return float(loss.sum()), grads


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = TRANSE
    epochs: int = 100
    dim: int = 50
    learning_rate: float | None = None
    margin: float = 4.0
    negatives_per_positive: int = 1
    batch_size: int = 128
    seed: int = 0
    loss_kind: str | None = None
    norm: str = L1
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "model_kind", canonical_kind(self.model_kind))
        if self.loss_kind is None:
            object.__setattr__(self, "loss_kind", default_loss(self.model_kind))
        if self.loss_kind not in (MARGIN, LOGISTIC):
            raise ModelError(f"unknown loss kind {self.loss_kind!r}")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", default_learning_rate(self.loss_kind))
        if self.norm not in (L1, L2):
            raise ModelError(f"unknown norm {self.norm!r}")
        for name in ("epochs", "dim", "negatives_per_positive", "batch_size", "workers"):
            if int(getattr(self, name)) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.margin <= 0:
            raise ModelError("learning_rate and margin must be positive")

    def scaled(self, epoch_factor: float) -> "TrainConfig":
        return replace(self, epochs=max(1, int(round(self.epochs * epoch_factor))))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainResult:
    model: KgeModel
    loss_curve: list[float] = field(default_factory=list)
    deterministic: bool = True


def init_model(n_entities: int, n_relations: int, config: TrainConfig) -> KgeModel:
    """Seeded uniform init.

    Translation models draw from [-6/sqrt(dim), 6/sqrt(dim)]; bilinear models
    use the Xavier range sqrt(6 / (rows + dim)) of each table.
    """
    rng = make_rng(config.seed, "init")
    kind = config.model_kind

    def block(n):
        if kind in TRANSLATIONAL:
            bound = 6.0 / np.sqrt(config.dim)
        else:
            bound = np.sqrt(6.0 / (n + config.dim))
        return rng.uniform(-bound, bound, size=(n, config.dim))

    model = KgeModel(kind, config.dim, block(n_entities), block(n_relations),
                     norm=config.norm if kind in TRANSLATIONAL else None)
    if kind == TRANSH:
        model.normal = _unit_rows(block(n_relations))
    if kind == COMPLEX:
        model.entity_im = block(n_entities)
        model.relation_im = block(n_relations)
    if kind in TRANSLATIONAL:
        model.relation = _unit_rows(model.relation)
        _project_entities(model)
    return model


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)


def _project_entities(model: KgeModel) -> None:
    norms = np.linalg.norm(model.entity, axis=1, keepdims=True)
    model.entity /= np.maximum(norms, 1.0)


def _sum_rows(rows: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group-by-row sums; much faster than ``np.add.at`` for wide rows."""
    order = np.argsort(rows, kind="stable")
    rows = rows[order]
    starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    return rows[starts], np.add.reduceat(vals[order], starts, axis=0)


def _sgd_step(model: KgeModel, pos: np.ndarray, neg: np.ndarray, config: TrainConfig) -> float:
    """One mini-batch update on the mean pair loss; returns the summed loss."""
    sp, sn = score_batch(model, pos), score_batch(model, neg)
    if config.loss_kind == MARGIN:
        loss, gp, gn = margin_terms(sp, sn, config.margin)
    else:
        loss, gp, gn = logistic_terms(sp, sn)
    total = float(loss.sum())
    if not np.isfinite(total):
        return total
    step = config.learning_rate / len(pos)
    pending: dict[str, list] = {}
    for trip, up in ((pos, gp), (neg, gn)):
        for name, (rows, vals) in score_gradients(model, trip, up).items():
            pending.setdefault(name, []).append((rows, vals))
    updates = {}
    for name, parts in pending.items():
        rows = np.concatenate([p[0] for p in parts])
        vals = np.concatenate([p[1] for p in parts])
        if not np.all(np.isfinite(vals)):
            return float("nan")
        updates[name] = _sum_rows(rows, vals)
    blocks = model.blocks()
    for name, (rows, sums) in updates.items():
        blocks[name][rows] -= step * sums
    if model.kind == TRANSH:
        touched = np.unique(pos[:, 1])
        model.normal[touched] = _unit_rows(model.normal[touched])
    return total


def train(triples, n_entities: int, n_relations: int, config: TrainConfig) -> TrainResult:
    """Mini-batch SGD with unfiltered head/tail corruptions.

    Each epoch shuffles the positives, draws ``negatives_per_positive``
    corruptions per positive and trains the last short batch too.
    Translation models have entity rows projected into the unit ball after
    every epoch.
    """
    triples = as_triple_array(triples)
    if len(triples) == 0:
        raise ModelError("cannot train on an empty triple list")
    model = init_model(n_entities, n_relations, config)
    _validate(model, triples)
    rng = make_rng(config.seed, "train")
    k = config.negatives_per_positive
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(triples))
        pos_all = np.repeat(triples[order], k, axis=0)
        neg_all = corrupt_batch(pos_all, n_entities, rng)
        bs = config.batch_size * k
        starts = range(0, len(pos_all), bs)
        if config.workers > 1:
            total = _hogwild_epoch(model, pos_all, neg_all, starts, bs, config, epoch)
        else:
            total = 0.0
            for b, s in enumerate(starts):
                batch_loss = _sgd_step(model, pos_all[s:s + bs], neg_all[s:s + bs], config)
                if not np.isfinite(batch_loss):
                    raise TrainingDiverged(epoch, b)
                total += batch_loss
        if model.kind in TRANSLATIONAL:
            _project_entities(model)
        for arr in model.blocks().values():
            if not np.all(np.isfinite(arr)):
                raise TrainingDiverged(epoch, len(starts) - 1)
        curve.append(total / len(pos_all))
    return TrainResult(model.frozen(), curve, deterministic=config.workers <= 1)


def _hogwild_epoch(model, pos_all, neg_all, starts, bs, config, epoch) -> float:
    # lock-free shared updates; determinism is given up in this mode
    starts = list(starts)
    shards = [starts[i::config.workers] for i in range(config.workers)]

    def run(shard):
        total = 0.0
        for s in shard:
            batch_loss = _sgd_step(model, pos_all[s:s + bs], neg_all[s:s + bs], config)
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(epoch, starts.index(s))
            total += batch_loss
        return total

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return sum(pool.map(run, shards))


# --------------------------------------------------------------------------
# model files
#
#   magic "KGEM" | version u16 | kind u8 | norm u8 | dim u32 | |E| u32 | |R| u32
#   float32 little-endian row-major blocks:
#     entity (|E| x dim), relation (|R| x dim),
#     TransH: normal (|R| x dim), ComplEx: entity_im (|E| x dim), relation_im (|R| x dim)
#   CRC32 (u32) of every preceding byte

MAGIC = b"KGEM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBIII")
_KIND_TAGS = {TRANSE: 0, TRANSH: 1, DISTMULT: 2, COMPLEX: 3}
_NORM_TAGS = {None: 0, L1: 1, L2: 2}


def _block_layout(kind: str, n_ent: int, n_rel: int) -> list[tuple[str, int]]:
    layout = [("entity", n_ent), ("relation", n_rel)]
    if kind == TRANSH:
        layout.append(("normal", n_rel))
    if kind == COMPLEX:
        layout += [("entity_im", n_ent), ("relation_im", n_rel)]
    return layout


def save_model(model: KgeModel, path) -> None:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, _KIND_TAGS[model.kind], _NORM_TAGS[model.norm],
                          model.dim, model.n_entities, model.n_relations)
    body = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in model.blocks().values())
    payload = header + body
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def load_model(path) -> KgeModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise ModelFormatError(f"{path}: file too short for a model header", "header")
    magic, version, kind_tag, norm_tag, dim, n_ent, n_rel = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}", "magic")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}", "version")
    kinds = {v: k for k, v in _KIND_TAGS.items()}
    norms = {v: k for k, v in _NORM_TAGS.items()}
    if kind_tag not in kinds or norm_tag not in norms:
        raise ModelFormatError(f"{path}: unknown kind/norm tag {kind_tag}/{norm_tag}", "kind")
    kind = kinds[kind_tag]
    layout = _block_layout(kind, n_ent, n_rel)
    expected = _HEADER.size + 4 * dim * sum(n for _, n in layout) + 4
    if len(data) != expected:
        # name the first block that the file cannot hold
        offset = _HEADER.size
        missing = "crc32"
        for name, n in layout:
            offset += 4 * dim * n
            if offset > len(data) - 4:
                missing = name
                break
        raise ModelFormatError(
            f"{path}: {kind} file is {len(data)} bytes, expected {expected}; block {missing!r} incomplete",
            missing)
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ModelFormatError(f"{path}: checksum mismatch", "crc32")
    blocks = {}
    offset = _HEADER.size
    for name, n in layout:
        size = 4 * dim * n
        arr = np.frombuffer(data, dtype="<f4", count=dim * n, offset=offset).reshape(n, dim).astype(np.float32)
        arr.setflags(write=False)
        blocks[name] = arr
        offset += size
    return KgeModel(kind, dim, norm=norms[norm_tag], **blocks)
