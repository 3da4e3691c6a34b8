import numpy as np
import pytest

from kgmia.data import build_store, corrupt_batch, synthetic_kg
from kgmia.models import (COMPLEX, DISTMULT, L1, L2, LOGISTIC, MARGIN, MODEL_KINDS, TRANSE, TRANSH,
                          KgeModel, ModelError, ModelFormatError, TrainConfig, TrainingDiverged,
                          _sgd_step, init_model, load_model, loss_logistic, loss_margin,
                          margin_terms, logistic_terms, save_model, score, score_batch, train)

from oracles import gradient_check_cases, random_model


def tiny(kind, ent, rel, norm=L1, **extra):
    ent, rel = np.asarray(ent, float), np.asarray(rel, float)
    return KgeModel(kind, ent.shape[1], ent, rel, norm=norm, **extra)


def test_transe_exact_translation_scores_zero():
    m = tiny(TRANSE, [[1, 2], [1.5, 1]], [[0.5, -1]])
    assert score(m, (0, 0, 1)) == 0.0


def test_transe_norms():
    m = tiny(TRANSE, [[0, 0], [3, 4]], [[0, 0]], norm=L2)
    assert score(m, (0, 0, 1)) == pytest.approx(5.0)
    m.norm = L1
    assert score(m, (0, 0, 1)) == pytest.approx(7.0)


def test_transh_projects_onto_hyperplane():
    # normal along x: only y components survive
    m = tiny(TRANSH, [[5, 1], [-3, 2]], [[0, 1]], norm=L1, normal=np.array([[1.0, 0.0]]))
    assert score(m, (0, 0, 1)) == pytest.approx(0.0)
    assert score(m, (1, 0, 0)) == pytest.approx(2.0)


def test_distmult_negated_trilinear():
    m = tiny(DISTMULT, [[1, 0]], [[1, 1]], norm=None)
    assert score(m, (0, 0, 0)) == -1.0


def test_complex_hand_value():
    # h = 1+i, r = i, t = 1: Re(h * r * conj(t)) = Re(i - 1) = -1
    m = KgeModel(COMPLEX, 1, np.array([[1.0], [1.0]]), np.array([[0.0]]),
                 entity_im=np.array([[1.0], [0.0]]), relation_im=np.array([[1.0]]))
    assert score(m, (0, 0, 1)) == pytest.approx(1.0)


def test_complex_with_zero_imaginary_parts_is_distmult():
    rng = np.random.default_rng(0)
    ent, rel = rng.normal(size=(50, 8)), rng.normal(size=(7, 8))
    cx = KgeModel(COMPLEX, 8, ent, rel, entity_im=np.zeros_like(ent), relation_im=np.zeros_like(rel))
    dm = KgeModel(DISTMULT, 8, ent, rel)
    trip = np.stack([rng.integers(0, 50, 1000), rng.integers(0, 7, 1000), rng.integers(0, 50, 1000)], 1)
    assert np.max(np.abs(score_batch(cx, trip) - score_batch(dm, trip))) <= 1e-9


def test_out_of_range_ids():
    m = tiny(TRANSE, [[0, 0]], [[0, 0]])
    with pytest.raises(ModelError):
        score(m, (0, 0, 3))
    with pytest.raises(ModelError):
        score(m, (0, 2, 0))


@pytest.mark.parametrize("sp, sn, margin, expected", [(0, 2, 1, 0), (2, 0, 1, 3)])
def test_margin_loss_values(sp, sn, margin, expected):
    loss, _, _ = margin_terms(np.array([sp]), np.array([sn]), margin)
    assert loss[0] == expected


def test_margin_loss_through_model():
    m = tiny(TRANSE, [[0.0], [2.0]], [[0.0]])
    # score(pos)=0, score(neg)=2
    assert loss_margin(m, (0, 0, 0), (0, 0, 1), 1.0) == 0.0
    assert loss_margin(m, (0, 0, 1), (0, 0, 0), 1.0) == 3.0
    with pytest.raises(ModelError):
        loss_margin(m, (0, 0, 1), (0, 0, 0), 0.0)


def test_logistic_loss_values():
    loss, _, _ = logistic_terms(np.array([0.0]), np.array([0.0]))
    assert loss[0] == pytest.approx(2 * np.log(2), abs=1e-12)
    loss, gp, gn = logistic_terms(np.array([-100.0, 800.0]), np.array([100.0, -800.0]))
    assert np.all(np.isfinite(loss)) and np.all(np.isfinite(gp)) and np.all(np.isfinite(gn))
    assert loss[0] == pytest.approx(0.0, abs=1e-40)
    assert loss[1] == pytest.approx(1600.0)


def test_logistic_loss_through_model():
    m = tiny(DISTMULT, [[0.0]], [[0.0]], norm=None)
    assert loss_logistic(m, (0, 0, 0), (0, 0, 0)) == pytest.approx(1.3862943611198906)


@pytest.mark.parametrize("kind", MODEL_KINDS)
@pytest.mark.parametrize("loss_kind", [MARGIN, LOGISTIC])
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(kind, loss_kind, seed):
    errs = [e for e, *_ in gradient_check_cases(kind, loss_kind, 25, seed=seed)]
    assert max(errs) < 1e-4


@pytest.mark.parametrize("kind", [TRANSE, TRANSH])
def test_l2_norm_gradients(kind):
    errs = [e for e, *_ in gradient_check_cases(kind, MARGIN, 15, seed=5, norm=L2)]
    assert max(errs) < 1e-4


def test_init_is_deterministic_and_in_range():
    cfg = TrainConfig(DISTMULT, dim=16, seed=42)
    a, b = init_model(30, 4, cfg), init_model(30, 4, cfg)
    for x, y in zip(a.blocks().values(), b.blocks().values()):
        assert np.array_equal(x, y)
    assert np.abs(a.entity).max() <= np.sqrt(6 / (30 + 16))
    t = init_model(30, 4, TrainConfig(TRANSE, dim=16, seed=42))
    assert np.all(np.linalg.norm(t.entity, axis=1) <= 1 + 1e-9)
    assert np.allclose(np.linalg.norm(t.relation, axis=1), 1.0)


def test_one_epoch_models_are_reproducible():
    store = synthetic_kg(60, 3, 300, seed=0)
    cfg = TrainConfig(TRANSH, epochs=1, dim=8, seed=9)
    a = train(store.triples, store.n_entities, store.n_relations, cfg)
    b = train(store.triples, store.n_entities, store.n_relations, cfg)
    for x, y in zip(a.model.blocks().values(), b.model.blocks().values()):
        assert np.array_equal(x, y)
    assert a.loss_curve == b.loss_curve


def _cycle():
    return build_store([("a", "r", "b"), ("b", "r", "c"), ("c", "r", "a")])


def _all_corruptions(store):
    out = []
    for h, r, t in store.triples.tolist():
        for e in range(store.n_entities):
            if e != h:
                out.append((e, r, t))
            if e != t:
                out.append((h, r, e))
    return np.array(out)


def test_cycle_kg_separates_facts_from_every_corruption():
    store = _cycle()
    corruptions = _all_corruptions(store)
    assert len(corruptions) == 12
    # the default step size assumes batches of many positives; three facts need a smaller one
    for seed in range(3):
        cfg = TrainConfig(TRANSE, epochs=200, dim=8, learning_rate=0.01, seed=seed)
        res = train(store.triples, 3, 1, cfg)
        assert score_batch(res.model, store.triples).mean() < score_batch(res.model, corruptions).mean()


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_training_loss_decreases(kind):
    store = synthetic_kg(100, 4, 400, seed=1)
    drops = []
    for seed in range(3):
        res = train(store.triples, store.n_entities, store.n_relations,
                    TrainConfig(kind, epochs=60, dim=16, seed=seed))
        drops.append(res.loss_curve[0] - res.loss_curve[-1])
    assert np.mean(drops) > 0


@pytest.fixture(scope="module")
def small_kg():
    return synthetic_kg(200, 4, 1500, seed=2)


@pytest.fixture(scope="module")
def trained(small_kg):
    out = {}
    for kind in MODEL_KINDS:
        cfg = TrainConfig(kind, epochs=150, dim=24, seed=3)
        out[kind] = train(small_kg.triples, small_kg.n_entities, small_kg.n_relations, cfg)
    return out


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_trained_models_satisfy_invariants(kind, trained, small_kg):
    model = trained[kind].model
    for arr in model.blocks().values():
        assert np.all(np.isfinite(arr))
    if kind in (TRANSE, TRANSH):
        assert np.all(np.linalg.norm(model.entity.astype(float), axis=1) <= 1 + 1e-6)
    if kind == TRANSH:
        assert np.allclose(np.linalg.norm(model.normal.astype(float), axis=1), 1.0, atol=1e-6)
    neg = corrupt_batch(small_kg.triples, small_kg.n_entities, np.random.default_rng(0))
    pos_s, neg_s = score_batch(model, small_kg.triples), score_batch(model, neg)
    assert pos_s.mean() < neg_s.mean()
    if kind in (TRANSE, TRANSH):
        assert np.all(pos_s > 0) and np.all(neg_s > 0)
    else:
        assert pos_s.mean() < 0


def test_transh_normals_stay_unit_after_every_step():
    store = synthetic_kg(60, 3, 300, seed=0)
    cfg = TrainConfig(TRANSH, dim=8, batch_size=32, seed=1)
    model = init_model(store.n_entities, store.n_relations, cfg)
    rng = np.random.default_rng(0)
    for s in range(0, 300, 32):
        pos = store.triples[s:s + 32]
        _sgd_step(model, pos, corrupt_batch(pos, store.n_entities, rng), cfg)
        assert np.allclose(np.linalg.norm(model.normal, axis=1), 1.0, atol=1e-6)


def test_divergence_is_reported():
    store = synthetic_kg(60, 3, 300, seed=0)
    cfg = TrainConfig(DISTMULT, epochs=50, dim=8, learning_rate=1e9, seed=0)
    with pytest.raises(TrainingDiverged) as err:
        train(store.triples, store.n_entities, store.n_relations, cfg)
    assert err.value.epoch >= 0 and err.value.batch >= 0


def test_training_rejects_empty_input():
    with pytest.raises(ModelError):
        train(np.zeros((0, 3), dtype=int), 3, 1, TrainConfig())


def test_config_validation():
    with pytest.raises(ModelError):
        TrainConfig(epochs=0)
    with pytest.raises(ModelError):
        TrainConfig("RotatE")
    assert TrainConfig("complex").loss_kind == LOGISTIC
    assert TrainConfig("transh").loss_kind == MARGIN


def test_parallel_mode_forfeits_determinism_flag():
    store = synthetic_kg(60, 3, 300, seed=0)
    res = train(store.triples, store.n_entities, store.n_relations,
                TrainConfig(TRANSE, epochs=3, dim=8, workers=2))
    assert not res.deterministic
    assert all(np.isfinite(res.loss_curve))


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_model_file_round_trip(kind, tmp_path, trained):
    model = trained[kind].model
    save_model(model, tmp_path / "m.kgem")
    back = load_model(tmp_path / "m.kgem")
    assert (back.kind, back.dim, back.norm) == (model.kind, model.dim, model.norm)
    for name, arr in model.blocks().items():
        assert back.blocks()[name].tobytes() == arr.tobytes()


def test_model_file_header_layout(tmp_path):
    model = random_model(TRANSE, np.random.default_rng(0)).frozen()
    save_model(model, tmp_path / "m.kgem")
    raw = (tmp_path / "m.kgem").read_bytes()
    assert raw[:4] == b"KGEM"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert raw[6] == 0 and raw[7] == 1
    assert [int.from_bytes(raw[i:i + 4], "little") for i in (8, 12, 16)] == [4, 5, 3]
    assert len(raw) == 20 + 4 * 4 * (5 + 3) + 4


def test_truncated_file_is_rejected(tmp_path):
    model = random_model(COMPLEX, np.random.default_rng(0)).frozen()
    save_model(model, tmp_path / "m.kgem")
    raw = (tmp_path / "m.kgem").read_bytes()
    (tmp_path / "t.kgem").write_bytes(raw[:-10])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "t.kgem")


def test_corrupted_payload_fails_checksum(tmp_path):
    model = random_model(DISTMULT, np.random.default_rng(0)).frozen()
    save_model(model, tmp_path / "m.kgem")
    raw = bytearray((tmp_path / "m.kgem").read_bytes())
    raw[30] ^= 0xFF
    (tmp_path / "m.kgem").write_bytes(bytes(raw))
    with pytest.raises(ModelFormatError) as err:
        load_model(tmp_path / "m.kgem")
    assert err.value.field == "crc32"


def test_version_mismatch(tmp_path):
    model = random_model(DISTMULT, np.random.default_rng(0)).frozen()
    save_model(model, tmp_path / "m.kgem")
    raw = bytearray((tmp_path / "m.kgem").read_bytes())
    raw[4] = 9
    (tmp_path / "m.kgem").write_bytes(bytes(raw))
    with pytest.raises(ModelFormatError) as err:
        load_model(tmp_path / "m.kgem")
    assert err.value.field == "version"


def test_transh_without_normal_block_is_a_structured_error(tmp_path):
    import struct
    import zlib
    model = random_model(TRANSE, np.random.default_rng(0)).frozen()
    save_model(model, tmp_path / "m.kgem")
    raw = bytearray((tmp_path / "m.kgem").read_bytes()[:-4])
    raw[6] = 1  # relabel as TransH; the w_r block is absent
    payload = bytes(raw)
    (tmp_path / "h.kgem").write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    with pytest.raises(ModelFormatError) as err:
        load_model(tmp_path / "h.kgem")
    assert err.value.field == "normal"
