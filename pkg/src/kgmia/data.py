"""Triple datasets: TSV loading, experimental splits, corruption sampling."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .rng import SplitMix64, make_rng

logger = logging.getLogger(__name__)

SPLIT_PARTS = ("target_train", "target_test", "shadow_train", "shadow_test")
HEAD, RELATION, TAIL = "head", "relation", "tail"
_SLOT_COLUMN = {HEAD: 0, RELATION: 1, TAIL: 2}


class DataError(ValueError):
    pass


class TsvParseError(DataError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def as_triple_array(triples) -> np.ndarray:
    arr = np.asarray(triples, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim == 1:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"expected an (n, 3) triple array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class TripleStore:
    """Immutable integer-indexed set of facts with string vocabularies."""

    entity_vocab: tuple[str, ...]
    relation_vocab: tuple[str, ...]
    triples: np.ndarray
    duplicates_dropped: int = 0
    membership_index: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        arr = as_triple_array(self.triples).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "triples", arr)
        if len(arr):
            if arr.min() < 0:
                raise DataError("negative id in triples")
            if max(arr[:, 0].max(), arr[:, 2].max()) >= len(self.entity_vocab):
                raise DataError("entity id out of vocabulary range")
            if arr[:, 1].max() >= len(self.relation_vocab):
                raise DataError("relation id out of vocabulary range")
        index = frozenset(map(tuple, arr.tolist()))
        if len(index) != len(arr):
            raise DataError("duplicate triples in store")
        object.__setattr__(self, "membership_index", index)

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        for h, r, t in self.triples.tolist():
            yield Triple(h, r, t)

    def __contains__(self, triple) -> bool:
        return tuple(int(x) for x in triple) in self.membership_index

    @property
    def n_entities(self) -> int:
        return len(self.entity_vocab)

    @property
    def n_relations(self) -> int:
        return len(self.relation_vocab)

    def entity_id(self, name: str) -> int:
        return self._entity_lookup()[name]

    def relation_id(self, name: str) -> int:
        return self._relation_lookup()[name]

    def _entity_lookup(self) -> dict[str, int]:
        cached = self.__dict__.get("_ent_lookup")
        if cached is None:
            cached = {name: i for i, name in enumerate(self.entity_vocab)}
            object.__setattr__(self, "_ent_lookup", cached)
        return cached

    def _relation_lookup(self) -> dict[str, int]:
        cached = self.__dict__.get("_rel_lookup")
        if cached is None:
            cached = {name: i for i, name in enumerate(self.relation_vocab)}
            object.__setattr__(self, "_rel_lookup", cached)
        return cached

    def encode(self, rows: Iterable[tuple[str, str, str]]) -> np.ndarray:
        """Map string triples to ids under this store's vocabularies."""
        ents, rels = self._entity_lookup(), self._relation_lookup()
        out = []
        for h, r, t in rows:
            try:
                out.append((ents[h], rels[r], ents[t]))
            except KeyError as exc:
                raise DataError(f"unknown symbol {exc.args[0]!r}") from None
        return as_triple_array(out)

    def decode(self, triples) -> list[tuple[str, str, str]]:
        ev, rv = self.entity_vocab, self.relation_vocab
        return [(ev[h], rv[r], ev[t]) for h, r, t in as_triple_array(triples).tolist()]


def build_store(rows: Iterable[tuple[str, str, str]]) -> TripleStore:
    """Build a store from string triples; vocab ids follow first appearance."""
    ents: dict[str, int] = {}
    rels: dict[str, int] = {}
    seen: set[tuple[int, int, int]] = set()
    triples = []
    dups = 0
    for h, r, t in rows:
        key = (ents.setdefault(h, len(ents)), rels.setdefault(r, len(rels)),
               ents.setdefault(t, len(ents)))
        if key in seen:
            dups += 1
            continue
        seen.add(key)
        triples.append(key)
    return TripleStore(tuple(ents), tuple(rels), as_triple_array(triples), dups)


def _read_rows(path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TsvParseError(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}")
            rows.append((fields[0], fields[1], fields[2]))
    return rows


def load_tsv(*paths) -> TripleStore:
    """Load one or more head/relation/tail TSV files into a single store.

    Several paths are concatenated in order, which is how the pre-split
    benchmark distributions (train/valid/test) are re-merged.
    """
    if not paths:
        raise DataError("no input files")
    rows = []
    for path in paths:
        rows.extend(_read_rows(path))
    if not rows:
        raise DataError(f"no triples in {', '.join(map(str, paths))}")
    store = build_store(rows)
    if store.duplicates_dropped:
        logger.info("dropped %d duplicate triples", store.duplicates_dropped)
    return store


def write_triples_tsv(store: TripleStore, triples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in store.decode(triples):
            fh.write(f"{h}\t{r}\t{t}\n")


def save_tsv(store: TripleStore, path) -> None:
    write_triples_tsv(store, store.triples, path)


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def triples_checksum(triples) -> str:
    arr = as_triple_array(triples).astype("<i8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


# --------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SplitPlan:
    seed: int
    target_train: np.ndarray
    target_test: np.ndarray
    shadow_train: np.ndarray
    shadow_test: np.ndarray

    def parts(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in SPLIT_PARTS}

    def sizes(self) -> dict[str, int]:
        return {name: len(arr) for name, arr in self.parts().items()}

    def equals(self, other: "SplitPlan") -> bool:
        return self.seed == other.seed and all(
            np.array_equal(a, b) for a, b in zip(self.parts().values(), other.parts().values()))


def _halve(n: int) -> int:
    return (n + 1) // 2


def make_split(store: TripleStore, seed: int) -> SplitPlan:
    """Shuffle under ``seed`` and halve twice: D_T/D_S, then train/test in each."""
    return split_triples(store.triples, seed)


def split_triples(triples, seed: int) -> SplitPlan:
    triples = as_triple_array(triples)
    n = len(triples)
    if n < 4:
        raise DataError(f"need at least 4 triples to split, got {n}")
    shuffled = triples[SplitMix64(seed).permutation(n)]
    n_target = _halve(n)
    target, shadow = shuffled[:n_target], shuffled[n_target:]
    kt, ks = _halve(len(target)), _halve(len(shadow))
    return SplitPlan(seed, target[:kt], target[kt:], shadow[:ks], shadow[ks:])


def split_presplit(target, shadow, seed: int) -> SplitPlan:
    """Split user-supplied target/shadow subgraphs into train/test halves."""
    target, shadow = as_triple_array(target), as_triple_array(shadow)
    if len(target) < 2 or len(shadow) < 2:
        raise DataError("target and shadow parts need at least 2 triples each")
    target = target[SplitMix64(seed).permutation(len(target))]
    shadow = shadow[SplitMix64(seed ^ 0x5DEECE66D).permutation(len(shadow))]
    kt, ks = _halve(len(target)), _halve(len(shadow))
    return SplitPlan(seed, target[:kt], target[kt:], shadow[:ks], shadow[ks:])


def carve_validation(train, seed: int, fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``fraction`` of a training split as the owner's validation set.

    Returns ``(fit, valid)``; at least one triple lands on each side.
    """
    train = as_triple_array(train)
    if len(train) < 2:
        raise DataError("need at least 2 triples to carve a validation set")
    n_valid = min(max(1, int(round(fraction * len(train)))), len(train) - 1)
    order = SplitMix64(seed ^ 0x76616C6964).permutation(len(train))
    shuffled = train[order]
    return shuffled[n_valid:], shuffled[:n_valid]


def save_split(plan: SplitPlan, store: TripleStore, directory, source_checksum: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in plan.parts().items():
        write_triples_tsv(store, arr, directory / f"{name}.tsv")
    (directory / "entities.txt").write_text("".join(f"{e}\n" for e in store.entity_vocab), encoding="utf-8")
    (directory / "relations.txt").write_text("".join(f"{r}\n" for r in store.relation_vocab), encoding="utf-8")
    manifest = {
        "seed": plan.seed,
        "sizes": plan.sizes(),
        "source_checksum": source_checksum or triples_checksum(store.triples),
        "n_entities": store.n_entities,
        "n_relations": store.n_relations,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_split(directory) -> tuple[TripleStore, SplitPlan, dict]:
    """Reload a split written by :func:`save_split`.

    Returns the store (vocabularies plus the union of all parts), the plan
    and the manifest.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing split manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    ents = (directory / "entities.txt").read_text(encoding="utf-8").split("\n")[:-1]
    rels = (directory / "relations.txt").read_text(encoding="utf-8").split("\n")[:-1]
    vocab_store = TripleStore(tuple(ents), tuple(rels), np.zeros((0, 3), dtype=np.int64))
    parts = {name: vocab_store.encode(_read_rows(directory / f"{name}.tsv")) for name in SPLIT_PARTS}
    for name, size in manifest["sizes"].items():
        if len(parts[name]) != size:
            raise DataError(f"split part {name} has {len(parts[name])} triples, manifest says {size}")
    store = TripleStore(tuple(ents), tuple(rels), np.concatenate(list(parts.values())))
    return store, SplitPlan(int(manifest["seed"]), **parts), manifest


# --------------------------------------------------------------------------
# corruption

@dataclass(frozen=True)
class CorruptionSample:
    original: Triple
    corrupted: Triple
    corrupted_slot: str
    fell_back: bool = False


def _other_value(rng: np.random.Generator, n: int, original: int) -> int:
    x = int(rng.integers(n - 1))
    return x + (x >= original)


def sample_corruption(store: TripleStore, triple, rng: np.random.Generator, *,
                      filtered: bool = False, corrupt_relation: bool = False,
                      max_attempts: int = 100) -> CorruptionSample:
    """Replace the head or the tail (probability 1/2 each) with another entity.

    With ``corrupt_relation`` the slot is drawn uniformly from head, relation
    and tail. In filtered mode candidates that are known facts are rejected;
    after ``max_attempts`` rejections the last unfiltered draw is returned
    with ``fell_back`` set.
    """
    if store.n_entities < 2:
        raise DataError("corruption needs at least 2 entities")
    original = Triple(*(int(x) for x in triple))
    slots = (HEAD, RELATION, TAIL) if corrupt_relation and store.n_relations >= 2 else (HEAD, TAIL)
    candidate = None
    slot = HEAD
    for _ in range(max_attempts):
        slot = slots[int(rng.integers(len(slots)))]
        col = _SLOT_COLUMN[slot]
        values = list(original)
        n = store.n_relations if slot == RELATION else store.n_entities
        values[col] = _other_value(rng, n, values[col])
        candidate = Triple(*values)
        if not filtered or candidate not in store:
            return CorruptionSample(original, candidate, slot)
    logger.warning("filtered corruption of %s fell back to an unfiltered sample", original)
    return CorruptionSample(original, candidate, slot, fell_back=True)


def corrupt_batch(triples, n_entities: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised unfiltered head-or-tail corruption of every row."""
    triples = as_triple_array(triples)
    if n_entities < 2:
        raise DataError("corruption needs at least 2 entities")
    n = len(triples)
    out = triples.copy()
    cols = np.where(rng.random(n) < 0.5, 0, 2)
    rows = np.arange(n)
    draw = rng.integers(0, n_entities - 1, size=n)
    orig = out[rows, cols]
    out[rows, cols] = draw + (draw >= orig)
    return out


# --------------------------------------------------------------------------
# synthetic graphs

def synthetic_kg(n_entities: int = 1000, n_relations: int = 10, n_triples: int = 20000,
                 seed: int = 0, n_clusters: int | None = None, exponent: float = 1.0) -> TripleStore:
    """Generate a clustered KG with power-law entity degrees.

    Entities are spread over ``n_clusters`` latent types (default: one per
    ten entities, at most 20). Each relation maps
    every head type to one tail type, so facts carry learnable regularity.
    Within a type, entity k is chosen with weight (k + 1) ** -exponent.
    """
    if n_clusters is None:
        n_clusters = min(20, n_entities // 10)
    n_clusters = max(1, min(n_clusters, n_entities))
    capacity = n_entities * n_relations * max(1, n_entities // n_clusters)
    if n_triples > capacity // 2:
        raise DataError(f"requested {n_triples} triples exceeds the generator's capacity for this size")
    rng = make_rng(seed, "synthetic-kg")
    cluster_of = np.arange(n_entities) % n_clusters
    rng.shuffle(cluster_of)
    members = [np.flatnonzero(cluster_of == c) for c in range(n_clusters)]
    weights = []
    for m in members:
        w = (np.arange(len(m)) + 1.0) ** -exponent
        rng.shuffle(w)
        weights.append(w / w.sum())
    global_w = np.empty(n_entities)
    for m, w in zip(members, weights):
        global_w[m] = w / n_clusters
    global_w /= global_w.sum()
    tail_cluster = rng.integers(0, n_clusters, size=(n_relations, n_clusters))

    seen: set[tuple[int, int, int]] = set()
    out: list[tuple[int, int, int]] = []
    while len(out) < n_triples:
        batch = max(1024, 2 * (n_triples - len(out)))
        heads = rng.choice(n_entities, size=batch, p=global_w)
        rels = rng.integers(0, n_relations, size=batch)
        tcl = tail_cluster[rels, cluster_of[heads]]
        for h, r, c in zip(heads.tolist(), rels.tolist(), tcl.tolist()):
            m = members[c]
            t = int(m[rng.choice(len(m), p=weights[c])])
            key = (h, r, t)
            if key in seen:
                continue
            seen.add(key)
            out.append(key)
            if len(out) == n_triples:
                break
    # re-index in first-appearance order so a TSV round trip keeps the ids
    return build_store((f"e{h}", f"r{r}", f"e{t}") for h, r, t in out)


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
