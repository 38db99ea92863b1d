"""Triplet datasets: model, JSONL ingestion, filtering, sub-sampling and a
synthetic generator of source/target pairs with a known feature shift."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import (
    EmbeddingTable,
    ImageFeatureStore,
    QuestionType,
    embed_text,
    load_image_features,
    question_type,
    read_feature_file,
    save_image_features,
    tokenize,
    write_feature_file,
)
from .nn import FormatError

SPLITS = ("train", "val", "test")
QUESTION_TYPES = tuple(QuestionType)


class DatasetError(ValueError):
    """Invalid record or dataset-level invariant violation."""


@dataclass(eq=False)
class Triplet:
    """One image/question record with its correct answer and K decoys."""

    id: str
    image_id: int
    question: str
    question_feat: np.ndarray
    answer: str
    answer_feat: np.ndarray
    decoys: tuple[str, ...]
    decoy_feats: np.ndarray
    gt_answers: tuple[str, ...] | None = None
    split: str = "train"

    def __post_init__(self):
        self.question_feat = np.asarray(self.question_feat, dtype=np.float64)
        self.answer_feat = np.asarray(self.answer_feat, dtype=np.float64)
        self.decoy_feats = np.asarray(self.decoy_feats, dtype=np.float64)
        self.decoys = tuple(self.decoys)
        if self.gt_answers is not None:
            self.gt_answers = tuple(self.gt_answers)
        if not self.decoys:
            raise DatasetError(f"record {self.id}: needs at least one decoy")
        dim = self.answer_feat.shape[0]
        if self.question_feat.shape != (dim,) or self.decoy_feats.shape != (len(self.decoys), dim):
            raise DatasetError(f"record {self.id}: inconsistent text feature dimensions")
        if normalize_answer(self.answer) in {normalize_answer(d) for d in self.decoys}:
            raise DatasetError(f"record {self.id}: decoy duplicates the correct answer")
        if self.split not in SPLITS:
            raise DatasetError(f"record {self.id}: unknown split {self.split!r}")

    @property
    def num_decoys(self) -> int:
        return len(self.decoys)

    @property
    def qtype(self) -> QuestionType:
        return question_type(self.question)

    def __eq__(self, other):
        if not isinstance(other, Triplet):
            return NotImplemented
        return (
            (self.id, self.image_id, self.question, self.answer, self.decoys, self.gt_answers, self.split)
            == (other.id, other.image_id, other.question, other.answer, other.decoys, other.gt_answers, other.split)
            and np.array_equal(self.question_feat, other.question_feat)
            and np.array_equal(self.answer_feat, other.answer_feat)
            and np.array_equal(self.decoy_feats, other.decoy_feats)
        )


def normalize_answer(text: str) -> str:
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class SplitArrays:
    """Stacked features of one split.

    Candidates are flattened as [T, D1..DK] per triplet; ``cand_start[i]``
    indexes triplet i's first candidate (its correct answer).
    """

    ids: tuple[str, ...]
    image: np.ndarray
    question: np.ndarray
    answer: np.ndarray
    qtypes: tuple[QuestionType, ...]
    cand_feat: np.ndarray
    cand_owner: np.ndarray
    cand_label: np.ndarray
    cand_start: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def decoy_mask(self) -> np.ndarray:
        return self.cand_label == 0


class VqaDataset:
    def __init__(self, name: str, splits: Mapping[str, Sequence[Triplet]], images: ImageFeatureStore):
        self.name = name
        self.images = images
        self.splits: dict[str, tuple[Triplet, ...]] = {s: tuple(splits.get(s, ())) for s in SPLITS}
        unknown = set(splits) - set(SPLITS)
        if unknown:
            raise DatasetError(f"unknown splits {sorted(unknown)}")
        seen: set[str] = set()
        dims = set()
        for s, triplets in self.splits.items():
            for t in triplets:
                if t.id in seen:
                    raise DatasetError(f"record {t.id}: id appears twice")
                seen.add(t.id)
                if t.image_id not in images:
                    raise DatasetError(f"record {t.id}: image {t.image_id} not in feature store")
                dims.add(t.answer_feat.shape[0])
        if len(dims) > 1:
            raise DatasetError(f"mixed text feature dimensions {sorted(dims)}")
        self._text_dim = dims.pop() if dims else None
        self._arrays: dict[str, SplitArrays] = {}

    def __getitem__(self, split: str) -> tuple[Triplet, ...]:
        return self.splits[split]

    def __len__(self) -> int:
        return sum(len(v) for v in self.splits.values())

    def __eq__(self, other):
        if not isinstance(other, VqaDataset):
            return NotImplemented
        if self.name != other.name or self.splits != other.splits:
            return False
        ids = sorted(self.images.ids())
        return ids == sorted(other.images.ids()) and all(
            np.array_equal(self.images[i], other.images[i]) for i in ids
        )

    def __repr__(self) -> str:
        sizes = ", ".join(f"{s}={len(v)}" for s, v in self.splits.items())
        return f"VqaDataset({self.name!r}, {sizes})"

    @property
    def text_dim(self) -> int:
        if self._text_dim is None:
            raise DatasetError(f"dataset {self.name} is empty")
        return self._text_dim

    @property
    def image_dim(self) -> int:
        return self.images.dim

    def with_splits(self, name: str | None = None, **splits: Sequence[Triplet]) -> "VqaDataset":
        merged = {**self.splits, **splits}
        return VqaDataset(name or self.name, merged, self.images)

    def arrays(self, split: str) -> SplitArrays:
        if split not in self._arrays:
            self._arrays[split] = _stack(self.splits[split], self.images, self._text_dim or 0)
        return self._arrays[split]


def _stack(triplets: Sequence[Triplet], images: ImageFeatureStore, dim: int) -> SplitArrays:
    n = len(triplets)
    if n == 0:
        empty = np.zeros((0, dim))
        return SplitArrays((), np.zeros((0, images.dim)), empty, empty, (), empty,
                           np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(1, dtype=np.int64))
    counts = np.array([1 + t.num_decoys for t in triplets])
    cand_start = np.concatenate([[0], np.cumsum(counts)])
    cand_feat = np.concatenate([np.vstack([t.answer_feat[None], t.decoy_feats]) for t in triplets])
    cand_label = np.zeros(cand_start[-1])
    cand_label[cand_start[:-1]] = 1.0
    return SplitArrays(
        ids=tuple(t.id for t in triplets),
        image=images.gather(t.image_id for t in triplets),
        question=np.vstack([t.question_feat for t in triplets]),
        answer=np.vstack([t.answer_feat for t in triplets]),
        qtypes=tuple(t.qtype for t in triplets),
        cand_feat=cand_feat,
        cand_owner=np.repeat(np.arange(n), counts),
        cand_label=cand_label,
        cand_start=cand_start,
    )


# ---------------------------------------------------------------------------
# JSONL ingestion


def text_key(record_id: str, role: str) -> int:
    """u64 sidecar key for one text field of a record (role: q, t, d0, d1, ...)."""
    digest = hashlib.blake2b(f"{record_id}\x00{role}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def load_text_features(path: str | Path) -> tuple[int, dict[int, np.ndarray]]:
    dim, ids, matrix = read_feature_file(path)
    return dim, {k: matrix[r].astype(np.float64) for r, k in enumerate(ids)}


def load_dataset(
    jsonl_path: str | Path,
    feature_store: ImageFeatureStore,
    embedding_table: EmbeddingTable | None = None,
    text_features: Mapping[int, np.ndarray] | None = None,
    name: str | None = None,
) -> VqaDataset:
    """Parse JSONL records into a dataset.

    Text features come from ``text_features`` (sidecar, keyed by ``text_key``)
    when the key is present, otherwise from ``embed_text`` over the table.
    """
    if embedding_table is None and text_features is None:
        raise DatasetError("need an embedding table or precomputed text features")

    def feat(rid: str, role: str, text: str) -> np.ndarray:
        if text_features is not None:
            key = text_key(rid, role)
            if key in text_features:
                return np.asarray(text_features[key], dtype=np.float64)
        if embedding_table is None:
            raise DatasetError(f"record {rid}: no precomputed feature for {role}")
        return embed_text(embedding_table, text)

    splits: dict[str, list[Triplet]] = {s: [] for s in SPLITS}
    with open(jsonl_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{jsonl_path}:{lineno}: invalid JSON ({exc.msg})") from None
            rid = str(rec.get("id", f"<line {lineno}>"))
            for key in ("id", "image_id", "question", "answer", "decoys"):
                if key not in rec:
                    raise DatasetError(f"record {rid}: missing field {key!r}")
            decoys = rec["decoys"]
            if not isinstance(decoys, list) or not decoys:
                raise DatasetError(f"record {rid}: needs at least one decoy")
            try:
                image_id = int(rec["image_id"])
            except (TypeError, ValueError):
                raise DatasetError(f"record {rid}: image_id must be an integer") from None
            if image_id not in feature_store:
                raise DatasetError(f"record {rid}: image {image_id} not in feature store")
            split = rec.get("split", "train")
            if split not in SPLITS:
                raise DatasetError(f"record {rid}: unknown split {split!r}")
            gt = rec.get("gt_answers")
            splits[split].append(
                Triplet(
                    id=rid,
                    image_id=image_id,
                    question=rec["question"],
                    question_feat=feat(rid, "q", rec["question"]),
                    answer=rec["answer"],
                    answer_feat=feat(rid, "t", rec["answer"]),
                    decoys=tuple(decoys),
                    decoy_feats=np.array([feat(rid, f"d{j}", d) for j, d in enumerate(decoys)]),
                    gt_answers=tuple(gt) if gt is not None else None,
                    split=split,
                )
            )
    return VqaDataset(name or Path(jsonl_path).stem, splits, feature_store)


def triplet_record(t: Triplet) -> dict:
    rec = {"id": t.id, "image_id": t.image_id, "question": t.question, "answer": t.answer,
           "decoys": list(t.decoys), "split": t.split}
    if t.gt_answers is not None:
        rec["gt_answers"] = list(t.gt_answers)
    return rec


@dataclass(frozen=True)
class DatasetFiles:
    jsonl: Path
    images: Path
    text: Path


def dataset_paths(directory: str | Path, stem: str) -> DatasetFiles:
    d = Path(directory)
    return DatasetFiles(d / f"{stem}.jsonl", d / f"{stem}.images.qafv", d / f"{stem}.text.qafv")


def save_dataset(dataset: VqaDataset, directory: str | Path, stem: str | None = None) -> DatasetFiles:
    """Write JSONL records, the image-feature file and the text-feature sidecar."""
    paths = dataset_paths(directory, stem or dataset.name)
    paths.jsonl.parent.mkdir(parents=True, exist_ok=True)
    text_records = []
    with open(paths.jsonl, "w", encoding="utf-8") as fh:
        for split in SPLITS:
            for t in dataset.splits[split]:
                fh.write(json.dumps(triplet_record(t), sort_keys=True) + "\n")
                text_records.append((text_key(t.id, "q"), t.question_feat))
                text_records.append((text_key(t.id, "t"), t.answer_feat))
                for j, vec in enumerate(t.decoy_feats):
                    text_records.append((text_key(t.id, f"d{j}"), vec))
    save_image_features(paths.images, dataset.images)
    write_feature_file(paths.text, dataset.text_dim, text_records)
    return paths


def load_saved_dataset(directory: str | Path, stem: str, embedding_table: EmbeddingTable | None = None) -> VqaDataset:
    """Inverse of ``save_dataset``."""
    paths = dataset_paths(directory, stem)
    if not paths.jsonl.exists():
        raise FileNotFoundError(paths.jsonl)
    store = load_image_features(paths.images)
    text = load_text_features(paths.text)[1] if paths.text.exists() else None
    return load_dataset(paths.jsonl, store, embedding_table, text, name=stem)


# ---------------------------------------------------------------------------
# transformations


def filter_yes_no(dataset: VqaDataset) -> VqaDataset:
    """Drop triplets whose correct answer normalizes to exactly "yes" or "no"."""
    keep = {
        s: [t for t in ts if normalize_answer(t.answer) not in ("yes", "no")]
        for s, ts in dataset.splits.items()
    }
    return VqaDataset(dataset.name, keep, dataset.images)


def subsample(dataset: VqaDataset, fraction: float, seed: int) -> VqaDataset:
    """Uniformly keep ``fraction`` of the train split; val/test are untouched."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    train = dataset.splits["train"]
    count = int(round(fraction * len(train)))
    if count < 1:
        raise DatasetError(f"fraction {fraction} leaves no training triplets")
    if count == len(train):
        return dataset
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(train), size=count, replace=False))
    return dataset.with_splits(train=[train[i] for i in keep])


def type_frequencies(triplets: Iterable[Triplet]) -> dict[QuestionType, float]:
    counts = Counter(t.qtype for t in triplets)
    total = sum(counts.values())
    return {q: (counts[q] / total if total else 0.0) for q in QUESTION_TYPES}


def dataset_stats(dataset: VqaDataset) -> dict:
    report = {
        "name": dataset.name,
        "image_dim": dataset.image_dim,
        "text_dim": dataset._text_dim,
        "splits": {},
    }
    for split, ts in dataset.splits.items():
        counts = Counter(t.qtype for t in ts)
        report["splits"][split] = {
            "count": len(ts),
            "decoy_counts": dict(sorted(Counter(t.num_decoys for t in ts).items())),
            "type_counts": {q.value: counts[q] for q in QUESTION_TYPES},
            "type_frequencies": {q.value: f for q, f in type_frequencies(ts).items()},
        }
    return report


# ---------------------------------------------------------------------------
# synthetic source/target pairs

_TYPE_WORDS = {
    QuestionType.WHAT: "what",
    QuestionType.WHERE: "where",
    QuestionType.HOW: "how",
    QuestionType.WHEN: "when",
    QuestionType.WHY: "why",
    QuestionType.WHO: "who",
    QuestionType.OTHER: "is",
}


@dataclass(frozen=True)
class AffineShift:
    matrix: np.ndarray
    bias: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "AffineShift":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def random(cls, dim: int, mix: float, offset: float, seed: int) -> "AffineShift":
        """I + mix * G / sqrt(dim) with Gaussian G, and a bias of norm ``offset``."""
        rng = np.random.default_rng(seed)
        matrix = np.eye(dim) + mix * rng.standard_normal((dim, dim)) / np.sqrt(dim)
        direction = rng.standard_normal(dim)
        bias = offset * direction / np.linalg.norm(direction)
        return cls(matrix, bias)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.matrix.T + self.bias

    def inverse(self) -> "AffineShift":
        inv = np.linalg.inv(self.matrix)
        return AffineShift(inv, -inv @ self.bias)

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(len(self.bias))) and not self.bias.any())


def _uniform_types() -> dict[QuestionType, float]:
    return {q: 1.0 / len(QUESTION_TYPES) for q in QUESTION_TYPES}


@dataclass
class SyntheticBiasSpec:
    """Generative law of a synthetic source/target pair.

    Each question type owns ``concept_count // 7`` latent concepts (at least
    one). A triplet draws a type, then a concept of that type; its image,
    question and answer features are the concept's prototypes plus Gaussian
    noise, and its decoys are prototypes of K other concepts. Target features
    go through ``squash(shift(x))`` where squash is optional ``tanh`` scaling.
    """

    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 1000
    text_dim: int = 16
    image_dim: int = 16
    num_decoys: int = 6
    concept_count: int = 28
    question_shift: AffineShift | None = None
    answer_shift: AffineShift | None = None
    type_distribution: Mapping[QuestionType, float] = field(default_factory=_uniform_types)
    target_type_distribution: Mapping[QuestionType, float] | None = None
    phrasing_noise: float = 0.5
    image_noise: float = 1.0
    type_scale: float = 0.5
    squash: float | None = None
    target_n_train: int | None = None
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_train", "n_val", "n_test", "text_dim", "image_dim", "num_decoys", "concept_count"):
            if getattr(self, name) < (0 if name.startswith("n_") else 1):
                raise ValueError(f"{name} must be positive")
        if self.num_decoys >= self.concept_count:
            raise ValueError("need more concepts than decoys")
        for shift in (self.question_shift, self.answer_shift):
            if shift is not None and (
                shift.matrix.shape != (self.text_dim, self.text_dim) or shift.bias.shape != (self.text_dim,)
            ):
                raise ValueError("affine shifts must be square of text_dim")
        for dist in (self.type_distribution, self.target_type_distribution):
            if dist is None:
                continue
            probs = np.array([dist.get(q, 0.0) for q in QUESTION_TYPES])
            if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
                raise ValueError("type distribution must be non-negative and sum to 1")
        if self.phrasing_noise < 0 or self.image_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if self.squash is not None and self.squash <= 0:
            raise ValueError("squash scale must be positive")


def _f32(x: np.ndarray) -> np.ndarray:
    # generated features are f32-representable so the binary files round-trip exactly
    return x.astype(np.float32).astype(np.float64)


def _type_probs(dist: Mapping[QuestionType, float]) -> np.ndarray:
    return np.array([float(dist.get(q, 0.0)) for q in QUESTION_TYPES])


def generate_synthetic_pair(spec: SyntheticBiasSpec) -> tuple[VqaDataset, VqaDataset]:
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    law_ss, src_ss, tgt_ss = root.spawn(3)
    law = np.random.default_rng(law_ss)

    n_types = len(QUESTION_TYPES)
    per_type = max(1, spec.concept_count // n_types)
    concept_type = np.repeat(np.arange(n_types), per_type)
    n_concepts = len(concept_type)
    if spec.num_decoys >= n_concepts:
        raise ValueError("need more concepts than decoys")
    img_proto = law.standard_normal((n_concepts, spec.image_dim))
    q_proto = law.standard_normal((n_concepts, spec.text_dim))
    a_proto = law.standard_normal((n_concepts, spec.text_dim))
    type_vec = spec.type_scale * law.standard_normal((n_types, spec.text_dim))

    def text_map(shift: AffineShift | None, target: bool):
        def apply(x):
            if not target:
                return x
            if shift is not None:
                x = shift(x)
            if spec.squash is not None:
                x = spec.squash * np.tanh(x / spec.squash)
            return x
        return apply

    def build(name: str, ss, dist, target: bool, n_train: int) -> VqaDataset:
        rng = np.random.default_rng(ss)
        qmap = text_map(spec.question_shift, target)
        amap = text_map(spec.answer_shift, target)
        probs = _type_probs(dist)
        images = {}
        splits = {}
        next_image = 1
        for split, n in (("train", n_train), ("val", spec.n_val), ("test", spec.n_test)):
            types = rng.choice(n_types, size=n, p=probs)
            concepts = types * per_type + rng.integers(0, per_type, size=n)
            img = img_proto[concepts] + spec.image_noise * rng.standard_normal((n, spec.image_dim))
            q = q_proto[concepts] + type_vec[types] + spec.phrasing_noise * rng.standard_normal((n, spec.text_dim))
            a = a_proto[concepts] + spec.phrasing_noise * rng.standard_normal((n, spec.text_dim))
            decoy_ids = np.empty((n, spec.num_decoys), dtype=np.int64)
            for i in range(n):
                others = rng.choice(n_concepts - 1, size=spec.num_decoys, replace=False)
                decoy_ids[i] = others + (others >= concepts[i])
            d = a_proto[decoy_ids] + spec.phrasing_noise * rng.standard_normal((n, spec.num_decoys, spec.text_dim))
            q, a, d = _f32(qmap(q)), _f32(amap(a)), _f32(amap(d))
            img = _f32(img)
            triplets = []
            for i in range(n):
                image_id = next_image
                next_image += 1
                images[image_id] = img[i]
                word = _TYPE_WORDS[QUESTION_TYPES[types[i]]]
                triplets.append(
                    Triplet(
                        id=f"{name}-{split}-{i:06d}",
                        image_id=image_id,
                        question=f"{word} about concept {concepts[i]}?",
                        question_feat=q[i],
                        answer=f"answer {concepts[i]}",
                        answer_feat=a[i],
                        decoys=tuple(f"answer {c}" for c in decoy_ids[i]),
                        decoy_feats=d[i],
                        gt_answers=(f"answer {concepts[i]}",) * 10,
                        split=split,
                    )
                )
            splits[split] = triplets
        return VqaDataset(name, splits, ImageFeatureStore(spec.image_dim, images))

    source = build("source", src_ss, spec.type_distribution, False, spec.n_train)
    target_dist = spec.target_type_distribution or spec.type_distribution
    target_train = spec.n_train if spec.target_n_train is None else spec.target_n_train
    target = build("target", tgt_ss, target_dist, True, target_train)
    return source, target


def spec_from_dict(cfg: Mapping) -> SyntheticBiasSpec:
    """Build a spec from a parsed config mapping (e.g. a TOML file).

    Shifts are given either explicitly (``matrix``/``bias``) or as random
    draws (``mix``/``offset``/``seed``); type distributions map type names
    (What, Where, ..., Other) to probabilities.
    """
    cfg = dict(cfg)
    text_dim = int(cfg.get("text_dim", 16))
    kwargs = {}
    for key in ("n_train", "n_val", "n_test", "text_dim", "image_dim", "num_decoys", "concept_count",
                "seed", "target_n_train"):
        if key in cfg:
            kwargs[key] = int(cfg.pop(key))
    for key in ("phrasing_noise", "image_noise", "type_scale", "squash"):
        if key in cfg:
            kwargs[key] = float(cfg.pop(key))
    for key in ("question_shift", "answer_shift"):
        if key in cfg:
            s = cfg.pop(key)
            if "matrix" in s:
                kwargs[key] = AffineShift(np.array(s["matrix"], dtype=float), np.array(s.get("bias", [0.0] * text_dim), dtype=float))
            else:
                kwargs[key] = AffineShift.random(text_dim, float(s.get("mix", 0.0)), float(s.get("offset", 0.0)), int(s.get("seed", 0)))
    for key in ("type_distribution", "target_type_distribution"):
        if key in cfg:
            kwargs[key] = {QuestionType(k): float(v) for k, v in cfg.pop(key).items()}
    if cfg:
        raise ValueError(f"unknown synthetic spec keys: {sorted(cfg)}")
    return SyntheticBiasSpec(**kwargs)
