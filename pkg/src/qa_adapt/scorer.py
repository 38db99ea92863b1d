"""Multiple-choice scorer: a one-hidden-layer MLP over concatenated
image/question/candidate features, trained as a binary classifier on
(correct, decoy) candidates and used through argmax at inference."""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import DatasetError, SplitArrays, Triplet, VqaDataset
from .nn import Adam, DimensionError, Mlp, bce_loss, mlp_arrays, mlp_from_arrays, read_container, write_container

log = logging.getLogger(__name__)

FeatureMap = Callable[[np.ndarray], np.ndarray]


class InputMode(str, enum.Enum):
    IQC = "IQC"
    QC = "QC"
    C = "C"

    @property
    def uses_image(self) -> bool:
        return self is InputMode.IQC

    @property
    def uses_question(self) -> bool:
        return self is not InputMode.C

    def input_dim(self, image_dim: int, text_dim: int) -> int:
        return (image_dim if self.uses_image else 0) + (text_dim if self.uses_question else 0) + text_dim


@dataclass
class ScorerTrainConfig:
    epochs: int = 20
    batch_size: int = 100
    lr: float = 1e-4
    seed: int = 0
    hidden_dim: int = 8192
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.hidden_dim <= 0:
            raise ValueError("epochs, batch_size, lr and hidden_dim must be positive")


def build_input(mode: InputMode, f_i, f_q, f_c, image_dim: int, text_dim: int) -> np.ndarray:
    """Concatenate the parts ``mode`` uses, in image, question, candidate order."""
    parts = []
    if mode.uses_image:
        if f_i is None:
            raise DimensionError("IQC mode needs an image feature")
        parts.append(_check_vec(f_i, image_dim, "image"))
    if mode.uses_question:
        if f_q is None:
            raise DimensionError(f"{mode.value} mode needs a question feature")
        parts.append(_check_vec(f_q, text_dim, "question"))
    if f_c is None:
        raise DimensionError("candidate feature is required")
    parts.append(_check_vec(f_c, text_dim, "candidate"))
    return np.concatenate(parts)


def _check_vec(v, dim: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (dim,):
        raise DimensionError(f"{what} feature has shape {v.shape}, expected ({dim},)")
    return v


def build_inputs(mode: InputMode, image: np.ndarray | None, question: np.ndarray | None, cand: np.ndarray) -> np.ndarray:
    """Row-wise ``build_input`` for aligned matrices."""
    parts = []
    if mode.uses_image:
        parts.append(image)
    if mode.uses_question:
        parts.append(question)
    parts.append(cand)
    return np.hstack(parts)


def segment_argmax(scores: np.ndarray, starts: np.ndarray, tiebreak: np.ndarray | None = None) -> np.ndarray:
    """Per-segment argmax (relative to the segment start).

    Ties go to the lowest index, or to the lowest ``tiebreak`` key when given.
    """
    n = len(starts) - 1
    owner = np.repeat(np.arange(n), np.diff(starts))
    order_key = np.arange(len(scores)) if tiebreak is None else tiebreak
    order = np.lexsort((order_key, -scores, owner))
    first = order[starts[:-1]]
    return first - starts[:-1]


@dataclass
class ScorerModel:
    mode: InputMode
    net: Mlp
    image_dim: int
    text_dim: int
    config: Optional[ScorerTrainConfig] = None

    def __post_init__(self):
        self.mode = InputMode(self.mode)
        expected = self.mode.input_dim(self.image_dim, self.text_dim)
        if self.net.in_dim != expected or self.net.out_dim != 1 or self.net.output != "sigmoid":
            raise DimensionError(
                f"{self.mode.value} scorer needs a sigmoid net {expected}->1, got {self.net.in_dim}->{self.net.out_dim}"
            )

    @classmethod
    def untrained(cls, mode: InputMode, image_dim: int, text_dim: int, hidden_dim: int = 8192,
                  seed: int = 0, zero_output: bool = False) -> "ScorerModel":
        mode = InputMode(mode)
        net = Mlp.init(mode.input_dim(image_dim, text_dim), hidden_dim, 1, "sigmoid",
                       np.random.default_rng(seed), zero_output=zero_output)
        return cls(mode, net, image_dim, text_dim)

    def score(self, f_i, f_q, f_c) -> float:
        x = build_input(self.mode, f_i, f_q, f_c, self.image_dim, self.text_dim)
        return float(self.net(x[None])[0, 0])

    def candidate_inputs(self, arrays: SplitArrays, gq: FeatureMap | None = None,
                         ga: FeatureMap | None = None) -> np.ndarray:
        owner = arrays.cand_owner
        question = arrays.question if gq is None else gq(arrays.question)
        cand = arrays.cand_feat if ga is None else ga(arrays.cand_feat)
        image = arrays.image[owner] if self.mode.uses_image else None
        return build_inputs(self.mode, image, question[owner] if self.mode.uses_question else None, cand)

    def candidate_logits(self, arrays: SplitArrays, gq: FeatureMap | None = None,
                         ga: FeatureMap | None = None) -> np.ndarray:
        """Pre-sigmoid scores of every flattened candidate of a split."""
        if len(arrays.cand_feat) == 0:
            return np.zeros(0)
        return self.net.logits(self.candidate_inputs(arrays, gq, ga))[:, 0]

    def predict_arrays(self, arrays: SplitArrays, gq: FeatureMap | None = None,
                       ga: FeatureMap | None = None, tiebreak: np.ndarray | None = None) -> np.ndarray:
        """Chosen candidate position (0 = correct answer) for every triplet."""
        return segment_argmax(self.candidate_logits(arrays, gq, ga), arrays.cand_start, tiebreak)

    def predict(self, triplet: Triplet, image_feat: np.ndarray | None = None,
                gq: FeatureMap | None = None, ga: FeatureMap | None = None,
                candidates: np.ndarray | None = None) -> int:
        """Index of the best candidate among [T, D1..DK] (or ``candidates``).

        Argmax runs on logits so saturation of the sigmoid never creates
        spurious ties; exact ties go to the lowest index.
        """
        cand = np.vstack([triplet.answer_feat[None], triplet.decoy_feats]) if candidates is None else np.asarray(candidates, dtype=np.float64)
        if len(cand) == 0:
            raise DatasetError(f"record {triplet.id}: no candidates")
        q = triplet.question_feat[None]
        if gq is not None:
            q = gq(q)
        if ga is not None:
            cand = ga(cand)
        if self.mode.uses_image:
            if image_feat is None:
                raise DimensionError("IQC scorer needs the image feature")
            image = np.repeat(_check_vec(image_feat, self.image_dim, "image")[None], len(cand), axis=0)
        else:
            image = None
        x = build_inputs(self.mode, image, np.repeat(q, len(cand), axis=0), cand)
        return int(np.argmax(self.net.logits(x)[:, 0]))


def training_batches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def train_scorer(dataset: VqaDataset, mode: InputMode, cfg: ScorerTrainConfig | None = None,
                 split: str = "train") -> ScorerModel:
    """Fit a scorer on every (triplet, candidate) pair of ``split``.

    Each epoch visits one positive per triplet and one negative per decoy.
    """
    cfg = cfg or ScorerTrainConfig()
    mode = InputMode(mode)
    triplets = dataset[split]
    if not triplets:
        raise DatasetError(f"dataset {dataset.name}: split {split!r} is empty")
    arrays = dataset.arrays(split)
    rng = np.random.default_rng(cfg.seed)
    model = ScorerModel.untrained(mode, dataset.image_dim, dataset.text_dim, cfg.hidden_dim, seed=int(rng.integers(2**63)))
    model.config = cfg
    inputs = model.candidate_inputs(arrays)
    labels = arrays.cand_label[:, None]
    opt = Adam(lr=cfg.lr)
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in training_batches(len(inputs), cfg.batch_size, rng, cfg.shuffle):
            out, cache = model.net.forward(inputs[idx])
            loss, grad = bce_loss(out, labels[idx])
            grads, _ = model.net.backward(cache, grad)
            opt.step(model.net, grads)
            total += loss * len(idx)
        log.debug("scorer %s epoch %d loss %.4f", mode.value, epoch, total / len(inputs))
    return model


def candidate_accuracy(model: ScorerModel, arrays: SplitArrays) -> float:
    """Fraction of candidates classified correctly at threshold 0.5."""
    pred = model.candidate_logits(arrays) > 0
    return float(np.mean(pred == (arrays.cand_label > 0.5)))


def save_scorer(path: str | Path, model: ScorerModel) -> None:
    meta = {
        "kind": "scorer",
        "mode": model.mode.value,
        "image_dim": model.image_dim,
        "text_dim": model.text_dim,
        "output": model.net.output,
        "config": asdict(model.config) if model.config else None,
    }
    write_container(path, meta, mlp_arrays(model.net))


def load_scorer(path: str | Path) -> ScorerModel:
    meta, arrays = read_container(path)
    if meta.get("kind") != "scorer":
        raise DatasetError(f"{path}: not a scorer checkpoint")
    cfg = ScorerTrainConfig(**meta["config"]) if meta.get("config") else None
    return ScorerModel(InputMode(meta["mode"]), mlp_from_arrays(arrays, meta["output"]),
                       meta["image_dim"], meta["text_dim"], cfg)
