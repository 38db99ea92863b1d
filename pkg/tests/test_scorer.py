import numpy as np
import pytest

from conftest import make_dataset, make_triplet
from qa_adapt.adaptation import ResidualTransform
from qa_adapt.data import Triplet, VqaDataset
from qa_adapt.nn import DimensionError, Mlp
from qa_adapt.scorer import (
    InputMode,
    ScorerModel,
    ScorerTrainConfig,
    build_input,
    candidate_accuracy,
    load_scorer,
    save_scorer,
    segment_argmax,
    train_scorer,
)


def test_build_input_iqc_order():
    v = build_input(InputMode.IQC, [1, 2, 3, 4], [5, 6, 7], [8, 9, 10], 4, 3)
    assert np.array_equal(v, np.arange(1, 11))


def test_build_input_c_ignores_image_and_question():
    v = build_input(InputMode.C, None, None, [1.0, 2.0, 3.0], 4, 3)
    assert np.array_equal(v, [1.0, 2.0, 3.0])
    assert np.array_equal(build_input(InputMode.C, [9] * 4, [9] * 3, [1, 2, 3], 4, 3), [1, 2, 3])


def test_build_input_qc_zero_question():
    v = build_input(InputMode.QC, None, np.zeros(3), [1.0, 2.0, 3.0], 4, 3)
    assert not v[:3].any() and len(v) == 6


def test_build_input_checks_dims():
    with pytest.raises(DimensionError):
        build_input(InputMode.QC, None, np.zeros(2), np.zeros(3), 4, 3)
    with pytest.raises(DimensionError):
        build_input(InputMode.IQC, None, np.zeros(3), np.zeros(3), 4, 3)


def separable_dataset(n=60, dim=3, k=3, seed=0):
    rng = np.random.default_rng(seed)
    triplets = []
    for i in range(n):
        a = rng.standard_normal(dim)
        a[0] = 1.0 + abs(a[0])
        d = rng.standard_normal((k, dim))
        d[:, 0] = -1.0 - np.abs(d[:, 0])
        triplets.append(Triplet(f"s{i}", i, "what?", rng.standard_normal(dim), f"a{i}", a,
                                tuple(f"d{i}_{j}" for j in range(k)), d))
    return make_dataset(triplets, image_dim=2)


def test_separable_training_accuracy():
    ds = separable_dataset()
    model = train_scorer(ds, "C", ScorerTrainConfig(epochs=60, batch_size=20, lr=1e-2, hidden_dim=16))
    assert candidate_accuracy(model, ds.arrays("train")) > 0.95


def test_duplicated_dataset_equals_doubled_epochs():
    ds = separable_dataset(n=10)
    copies = [Triplet(t.id + "b", t.image_id, t.question, t.question_feat, t.answer, t.answer_feat,
                      t.decoys, t.decoy_feats) for t in ds["train"]]
    dup = VqaDataset("dup", {"train": list(ds["train"]) + copies}, ds.images)
    cfg = dict(batch_size=8, lr=1e-2, hidden_dim=6, seed=4, shuffle=False)
    # 40 candidates per copy, a multiple of the batch size, so batches line up
    a = train_scorer(dup, "IQC", ScorerTrainConfig(epochs=3, **cfg))
    b = train_scorer(ds, "IQC", ScorerTrainConfig(epochs=6, **cfg))
    for k in a.net.params():
        assert np.array_equal(a.net.params()[k], b.net.params()[k])


def test_training_is_deterministic():
    ds = separable_dataset(n=20)
    cfg = ScorerTrainConfig(epochs=2, batch_size=7, lr=1e-3, hidden_dim=5, seed=9)
    a, b = train_scorer(ds, "QC", cfg), train_scorer(ds, "QC", cfg)
    for k in a.net.params():
        assert np.array_equal(a.net.params()[k], b.net.params()[k])


def test_zero_model_scores_half():
    m = ScorerModel.untrained("IQC", 2, 3, hidden_dim=4, zero_output=True)
    assert m.score([1, 2], [3, 4, 5], [6, 7, 8]) == 0.5


def test_score_is_forward_of_build_input():
    m = ScorerModel.untrained("QC", 2, 3, hidden_dim=5, seed=1)
    q, c = np.array([0.1, -0.2, 0.3]), np.array([1.0, 0.5, -0.5])
    expected = m.net(build_input(InputMode.QC, None, q, c, 2, 3)[None])[0, 0]
    assert m.score(None, q, c) == expected


def test_score_monotone_in_single_weight_net():
    net = Mlp(np.array([[1.0]]), np.array([0.0]), np.array([[2.0]]), np.array([-1.0]))
    m = ScorerModel(InputMode.C, net, 1, 1)
    scores = [m.score(None, None, [x]) for x in (0.0, 0.5, 1.0, 3.0)]
    assert all(a < b for a, b in zip(scores, scores[1:]))


def test_predict_single_candidate():
    t = Triplet("x", 1, "q", np.zeros(3), "a", np.ones(3), ("b",), np.zeros((1, 3)))
    m = ScorerModel.untrained("QC", 2, 3, hidden_dim=4, seed=0)
    assert m.predict(t, candidates=t.answer_feat[None]) == 0


def test_predict_identical_candidates_tie_to_first():
    v = np.array([0.3, -0.1, 2.0])
    t = Triplet("x", 1, "q", np.zeros(3), "a", v, ("b", "c"), np.vstack([v, v]))
    m = ScorerModel.untrained("IQC", 2, 3, hidden_dim=4, seed=0)
    assert m.predict(t, image_feat=np.ones(2)) == 0


def test_identity_transforms_do_not_change_predictions():
    ds = make_dataset([make_triplet(i, decoys=("b", "c", "d")) for i in range(1, 41)])
    m = ScorerModel.untrained("IQC", 4, 3, hidden_dim=16, seed=2)
    rng = np.random.default_rng(0)
    gq = ResidualTransform.identity(3, hidden_dim=8, rng=rng)
    ga = ResidualTransform.identity(3, hidden_dim=8, rng=rng)
    for t in ds["train"]:
        img = ds.images[t.image_id]
        assert m.predict(t, img, gq, ga) == m.predict(t, img)
    arrays = ds.arrays("train")
    assert np.array_equal(m.predict_arrays(arrays, gq, ga), m.predict_arrays(arrays))


def test_predict_arrays_matches_per_triplet_predict():
    ds = make_dataset([make_triplet(i, decoys=("b", "c", "d")) for i in range(1, 21)])
    m = ScorerModel.untrained("IQC", 4, 3, hidden_dim=16, seed=5)
    batch = m.predict_arrays(ds.arrays("train"))
    single = [m.predict(t, ds.images[t.image_id]) for t in ds["train"]]
    assert list(batch) == single


def test_segment_argmax_ties_and_keys():
    scores = np.array([1.0, 1.0, 0.0, 2.0, 5.0, 5.0])
    starts = np.array([0, 3, 6])
    assert list(segment_argmax(scores, starts)) == [0, 1]
    keys = np.array([0.9, 0.1, 0.0, 0.0, 0.8, 0.2])
    assert list(segment_argmax(scores, starts, keys)) == [1, 2]


def test_scorer_checkpoint_round_trip(tmp_path):
    m = ScorerModel.untrained("QC", 2, 3, hidden_dim=4, seed=0)
    m.config = ScorerTrainConfig(epochs=3)
    save_scorer(tmp_path / "m.ckpt", m)
    loaded = load_scorer(tmp_path / "m.ckpt")
    assert loaded.mode is InputMode.QC and loaded.config == m.config
    assert np.array_equal(loaded.net.W1, m.net.W1)


def test_model_rejects_mismatched_net():
    with pytest.raises(DimensionError):
        ScorerModel(InputMode.IQC, Mlp.init(5, 3, 1), 4, 3)
