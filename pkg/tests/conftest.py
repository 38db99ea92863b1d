import numpy as np
import pytest

from qa_adapt.data import AffineShift, SyntheticBiasSpec, Triplet, VqaDataset, generate_synthetic_pair
from qa_adapt.features import ImageFeatureStore
from qa_adapt.nn import Mlp
from qa_adapt.scorer import InputMode, ScorerModel


def make_triplet(i, answer="a", decoys=("b", "c"), question="what is it?", split="train", dim=3, rng=None,
                 gt=None, image_id=None):
    rng = rng or np.random.default_rng(i)
    return Triplet(
        id=f"r{i}",
        image_id=i if image_id is None else image_id,
        question=question,
        question_feat=rng.standard_normal(dim),
        answer=answer,
        answer_feat=rng.standard_normal(dim),
        decoys=tuple(decoys),
        decoy_feats=rng.standard_normal((len(decoys), dim)),
        gt_answers=gt,
        split=split,
    )


def make_dataset(triplets, name="toy", image_dim=4):
    ids = sorted({t.image_id for t in triplets})
    rng = np.random.default_rng(123)
    store = ImageFeatureStore(image_dim, {i: rng.standard_normal(image_dim) for i in ids})
    splits = {"train": [], "val": [], "test": []}
    for t in triplets:
        splits[t.split].append(t)
    return VqaDataset(name, splits, store)


def marked_dataset(n=30, k=6, dim=3, seed=0, gt=None, question="what?", split="test"):
    """Correct answers carry a 1 in coordinate 0, decoys a 0."""
    rng = np.random.default_rng(seed)
    triplets = []
    for i in range(n):
        a = rng.standard_normal(dim)
        a[0] = 1.0
        d = rng.standard_normal((k, dim))
        d[:, 0] = 0.0
        triplets.append(Triplet(f"m{i}", i, question if isinstance(question, str) else question[i], np.zeros(dim),
                                f"ans{i}", a, tuple(f"dec{i}_{j}" for j in range(k)), d,
                                gt_answers=None if gt is None else gt[i], split=split))
    return make_dataset(triplets, image_dim=2)


def oracle_model(dim=3):
    w1 = np.zeros((1, dim))
    w1[0, 0] = 1.0
    return ScorerModel(InputMode.C, Mlp(w1, np.zeros(1), np.array([[10.0]]), np.array([-5.0])), 2, dim)


@pytest.fixture
def toy_dataset():
    return make_dataset([make_triplet(i) for i in range(1, 6)])


def small_spec(**kw):
    base = dict(n_train=300, n_val=50, n_test=200, text_dim=6, image_dim=5, num_decoys=3, concept_count=14,
                phrasing_noise=0.5, image_noise=1.0, seed=0)
    base.update(kw)
    return SyntheticBiasSpec(**base)


@pytest.fixture(scope="session")
def shifted_pair():
    spec = small_spec(question_shift=AffineShift.random(6, 0.6, 2.0, 1), answer_shift=AffineShift.random(6, 0.6, 2.0, 2))
    return generate_synthetic_pair(spec)


# Verdicts recorded by the acceptance suite, echoed after the test summary.
ACCEPTANCE: dict[str, str] = {}


def record_verdict(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
