import json

import numpy as np
import pytest

from conftest import make_dataset, make_triplet, small_spec
from qa_adapt.adaptation import weighted_source_sampler
from qa_adapt.data import (
    AffineShift,
    DatasetError,
    dataset_stats,
    filter_yes_no,
    generate_synthetic_pair,
    load_dataset,
    load_saved_dataset,
    save_dataset,
    spec_from_dict,
    subsample,
    text_key,
)
from qa_adapt.features import EmbeddingTable, ImageFeatureStore, QuestionType, embed_text


@pytest.fixture
def table():
    return EmbeddingTable(2, {"red": [1.0, 0.0], "blue": [0.0, 1.0], "what": [2.0, 2.0], "color": [1.0, 1.0]})


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_load_two_records(tmp_path, table):
    store = ImageFeatureStore(3, {1: np.zeros(3), 2: np.ones(3)})
    write_jsonl(tmp_path / "d.jsonl", [
        {"id": "a", "image_id": 1, "question": "What color?", "answer": "red", "decoys": ["blue"], "split": "train"},
        {"id": "b", "image_id": 2, "question": "what", "answer": "blue", "decoys": ["red", "red blue"], "split": "test"},
    ])
    ds = load_dataset(tmp_path / "d.jsonl", store, table)
    assert len(ds) == 2
    a = ds["train"][0]
    assert np.array_equal(a.question_feat, embed_text(table, "What color?"))
    assert np.array_equal(a.answer_feat, [1.0, 0.0])
    assert np.array_equal(ds["test"][0].decoy_feats[1], [0.5, 0.5])


@pytest.mark.parametrize(
    "record,match",
    [
        ({"id": "x", "image_id": 1, "question": "q", "answer": "a"}, "x.*decoys"),
        ({"id": "x", "image_id": 1, "question": "q", "answer": "a", "decoys": []}, "x.*decoy"),
        ({"id": "x", "image_id": 99, "question": "q", "answer": "a", "decoys": ["b"]}, "x.*image 99"),
        ({"id": "x", "image_id": 1, "question": "q", "answer": "a", "decoys": ["A"]}, "x.*duplicates"),
    ],
)
def test_bad_records_name_the_id(tmp_path, table, record, match):
    write_jsonl(tmp_path / "d.jsonl", [record])
    with pytest.raises(DatasetError, match=match):
        load_dataset(tmp_path / "d.jsonl", ImageFeatureStore(3, {1: np.zeros(3)}), table)


def test_malformed_json_line(tmp_path, table):
    (tmp_path / "d.jsonl").write_text("{not json\n")
    with pytest.raises(DatasetError, match=":1:"):
        load_dataset(tmp_path / "d.jsonl", ImageFeatureStore(3, {1: np.zeros(3)}), table)


def test_save_load_round_trip(tmp_path):
    source, _ = generate_synthetic_pair(small_spec(n_train=20, n_val=5, n_test=5))
    save_dataset(source, tmp_path)
    assert load_saved_dataset(tmp_path, "source") == source


def test_text_key_distinguishes_roles():
    keys = {text_key("r1", r) for r in ("q", "t", "d0", "d1")} | {text_key("r2", "q")}
    assert len(keys) == 5


def test_split_ids_must_be_disjoint():
    t = make_triplet(1)
    store = ImageFeatureStore(4, {1: np.zeros(4)})
    from qa_adapt.data import VqaDataset

    with pytest.raises(DatasetError, match="twice"):
        VqaDataset("x", {"train": [t], "test": [t]}, store)


def test_split_arrays_layout(toy_dataset):
    arr = toy_dataset.arrays("train")
    assert len(arr) == 5
    assert list(arr.cand_start) == [0, 3, 6, 9, 12, 15]
    assert arr.cand_label.sum() == 5 and all(arr.cand_label[arr.cand_start[:-1]] == 1)
    t = toy_dataset["train"][2]
    assert np.array_equal(arr.cand_feat[6], t.answer_feat)
    assert np.array_equal(arr.cand_feat[7:9], t.decoy_feats)
    assert np.array_equal(arr.image[2], toy_dataset.images[t.image_id])


def yes_no_fixture():
    answers = ["yes", "red", "No", "two", "yes.", "cat", "dog", "blue", "green", "tree"]
    return make_dataset([make_triplet(i, answer=a, decoys=("zzz",)) for i, a in enumerate(answers, start=1)])


def test_filter_yes_no_enumerated():
    out = filter_yes_no(yes_no_fixture())
    assert [t.id for t in out["train"]] == ["r2", "r4", "r6", "r7", "r8", "r9", "r10"]


def test_filter_yes_no_identity_and_empty():
    plain = make_dataset([make_triplet(i, answer="red", decoys=("x",)) for i in range(1, 4)])
    assert filter_yes_no(plain) == plain
    only = make_dataset([make_triplet(i, answer=a, decoys=("x",)) for i, a in enumerate(["yes", "no"], start=1)])
    assert len(filter_yes_no(only)) == 0


def test_filter_yes_no_idempotent():
    once = filter_yes_no(yes_no_fixture())
    assert filter_yes_no(once) == once


def test_subsample_fraction_one_is_identity(toy_dataset):
    assert subsample(toy_dataset, 1.0, 0) == toy_dataset


def test_subsample_sixteenth_of_160():
    ds = make_dataset([make_triplet(i, dim=2) for i in range(1, 161)] +
                      [make_triplet(i, dim=2, split="test") for i in range(161, 171)])
    out = subsample(ds, 1 / 16, seed=3)
    assert len(out["train"]) == 10
    assert out["test"] == ds["test"] and out["val"] == ds["val"]


def test_subsample_determinism():
    ds = make_dataset([make_triplet(i, dim=2) for i in range(1, 161)])
    ids = lambda d: [t.id for t in d["train"]]
    assert ids(subsample(ds, 0.25, 1)) == ids(subsample(ds, 0.25, 1))
    assert ids(subsample(ds, 0.25, 1)) != ids(subsample(ds, 0.25, 2))


@pytest.mark.parametrize("fraction", [0.0, -0.5, 1.5])
def test_subsample_rejects_bad_fraction(toy_dataset, fraction):
    with pytest.raises(ValueError):
        subsample(toy_dataset, fraction, 0)


def test_subsample_rejects_empty_result(toy_dataset):
    with pytest.raises(DatasetError):
        subsample(toy_dataset, 0.01, 0)


def test_stats_empty():
    from qa_adapt.data import VqaDataset

    stats = dataset_stats(VqaDataset("e", {}, ImageFeatureStore(2)))
    assert all(s["count"] == 0 for s in stats["splits"].values())


def test_stats_type_frequencies_exact():
    qs = ["what a"] * 6 + ["where b"] * 4
    ds = make_dataset([make_triplet(i, question=q) for i, q in enumerate(qs, start=1)])
    freq = dataset_stats(ds)["splits"]["train"]["type_frequencies"]
    assert freq["What"] == 0.6 and freq["Where"] == 0.4 and freq["When"] == 0.0
    assert dataset_stats(ds)["splits"]["train"]["decoy_counts"] == {2: 10}


def test_stats_feed_sampler_weights():
    src_qs = ["what a"] * 6 + ["where b"] * 4
    tgt_qs = ["what a"] * 2 + ["where b"] * 8
    src = make_dataset([make_triplet(i, question=q) for i, q in enumerate(src_qs, start=1)])
    tgt = make_dataset([make_triplet(i, question=q) for i, q in enumerate(tgt_qs, start=1)])
    fs = dataset_stats(src)["splits"]["train"]["type_frequencies"]
    ft = dataset_stats(tgt)["splits"]["train"]["type_frequencies"]
    expected = np.array([ft[t.qtype.value] / fs[t.qtype.value] for t in src["train"]])
    sampler = weighted_source_sampler(src, tgt, seed=0)
    assert np.allclose(sampler.weights, expected / expected.sum(), rtol=1e-14)


# --- synthetic generator


def test_generator_deterministic():
    spec = small_spec(answer_shift=AffineShift.random(6, 0.5, 1.0, 3))
    a = generate_synthetic_pair(spec)
    b = generate_synthetic_pair(spec)
    assert a[0] == b[0] and a[1] == b[1]


def test_generator_shapes_and_types():
    spec = small_spec(type_distribution={QuestionType.WHEN: 1.0})
    src, tgt = generate_synthetic_pair(spec)
    assert len(src["train"]) == 300 and len(tgt["test"]) == 200
    assert src.text_dim == 6 and src.image_dim == 5
    assert all(t.qtype is QuestionType.WHEN and t.num_decoys == 3 for t in src["train"])


def test_generator_target_is_shifted_source_law():
    # with zero noise every feature is an exact (shifted) prototype
    shift = AffineShift.random(6, 0.5, 1.5, 4)
    spec = small_spec(answer_shift=shift, phrasing_noise=0.0, n_train=200, n_val=0, n_test=0)
    src, tgt = generate_synthetic_pair(spec)
    protos = {t.answer: t.answer_feat for t in src["train"]}
    for t in tgt["train"]:
        if t.answer in protos:
            assert np.allclose(t.answer_feat, shift(protos[t.answer]), atol=1e-5)


def test_generator_rejects_invalid_spec():
    with pytest.raises(ValueError):
        generate_synthetic_pair(small_spec(type_distribution={QuestionType.WHAT: 0.5}))
    with pytest.raises(ValueError):
        generate_synthetic_pair(small_spec(answer_shift=AffineShift.identity(3)))
    with pytest.raises(ValueError):
        generate_synthetic_pair(small_spec(num_decoys=20))


def test_affine_inverse():
    s = AffineShift.random(5, 0.7, 2.0, 0)
    x = np.random.default_rng(1).standard_normal((10, 5))
    assert np.allclose(s.inverse()(s(x)), x, atol=1e-12)


def test_spec_from_dict():
    spec = spec_from_dict({
        "n_train": 10, "text_dim": 4, "answer_shift": {"mix": 0.5, "offset": 1.0, "seed": 2},
        "question_shift": {"matrix": np.eye(4).tolist(), "bias": [1, 0, 0, 0]},
        "type_distribution": {"What": 0.5, "Where": 0.5},
    })
    assert spec.n_train == 10
    assert np.array_equal(spec.question_shift.bias, [1, 0, 0, 0])
    assert spec.type_distribution[QuestionType.WHAT] == 0.5
    with pytest.raises(ValueError, match="unknown"):
        spec_from_dict({"bogus": 1})
