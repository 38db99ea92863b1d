"""Dataset-origin probe: how well can a classifier tell two datasets apart
from a chosen subset of image, question, correct-answer and decoy features?"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import DatasetError, Triplet, VqaDataset
from .nn import Adam, Mlp, bce_loss

COMPONENTS = ("I", "Q", "T", "D")


def parse_components(spec: str | Iterable[str]) -> tuple[str, ...]:
    """Canonical I/Q/T/D ordering of a component set such as "QT" or ["T", "Q"]."""
    chosen = {c.upper() for c in (spec.replace("+", "").replace(",", "") if isinstance(spec, str) else spec)}
    unknown = chosen - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}; choose from I, Q, T, D")
    if not chosen:
        raise ValueError("component set must be nonempty")
    return tuple(c for c in COMPONENTS if c in chosen)


def component_label(components: Sequence[str]) -> str:
    return "+".join(components)


def decoy_subset(num_decoys: int, max_decoys: int, rng: np.random.Generator) -> np.ndarray:
    if num_decoys <= max_decoys:
        return np.arange(num_decoys)
    return np.sort(rng.choice(num_decoys, size=max_decoys, replace=False))


def build_probe_features(triplet: Triplet, components: Sequence[str], max_decoys: int = 3,
                         image_feat: np.ndarray | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """I‖Q‖T‖D restricted to ``components``; D is the mean of up to
    ``max_decoys`` decoys, subsampled with ``rng`` when there are more."""
    parts = []
    for c in parse_components(components):
        if c == "I":
            if image_feat is None:
                raise DatasetError(f"record {triplet.id}: image feature required for component I")
            parts.append(np.asarray(image_feat, dtype=np.float64))
        elif c == "Q":
            parts.append(triplet.question_feat)
        elif c == "T":
            parts.append(triplet.answer_feat)
        else:
            pick = decoy_subset(triplet.num_decoys, max_decoys, rng or np.random.default_rng(0))
            parts.append(triplet.decoy_feats[pick].mean(axis=0))
    return np.concatenate(parts)


def probe_matrix(dataset: VqaDataset, triplets: Sequence[Triplet], components: Sequence[str],
                 max_decoys: int, rng: np.random.Generator) -> np.ndarray:
    return np.array([
        build_probe_features(t, components, max_decoys,
                             dataset.images[t.image_id] if "I" in components else None, rng)
        for t in triplets
    ])


@dataclass
class ProbeConfig:
    hidden_dim: int = 8192
    epochs: int = 20
    batch_size: int = 100
    lr: float = 1e-4
    max_decoys: int = 3


@dataclass
class ProbeResult:
    accuracy: float
    components: tuple[str, ...]
    train_size: int
    val_size: int
    test_size: int
    val_accuracy: float = 0.0
    best_epoch: int = 0


def _pool(dataset: VqaDataset) -> list[Triplet]:
    return [t for s in ("train", "val", "test") for t in dataset[s]]


def run_probe(dataset_a: VqaDataset, dataset_b: VqaDataset, components: Sequence[str] | str,
              sizes: tuple[int, int, int] = (40000, 5000, 20000), seed: int = 0,
              cfg: ProbeConfig | None = None) -> ProbeResult:
    """Train an origin classifier on balanced samples of both datasets.

    Each split takes half its triplets from each dataset (sampled without
    replacement from all of that dataset's triplets); the epoch with the best
    validation accuracy is evaluated on the test split.
    """
    cfg = cfg or ProbeConfig()
    components = parse_components(components)
    halves = [s // 2 for s in sizes]
    need = sum(halves)
    pool_a, pool_b = _pool(dataset_a), _pool(dataset_b)
    if min(halves) < 1:
        raise DatasetError("every split needs at least two triplets")
    if len(pool_a) < need or len(pool_b) < need:
        raise DatasetError(f"probe needs {need} triplets per dataset, have {len(pool_a)} and {len(pool_b)}")
    rng = np.random.default_rng(seed)
    pick_a = rng.choice(len(pool_a), size=need, replace=False)
    pick_b = rng.choice(len(pool_b), size=need, replace=False)
    feats_a = probe_matrix(dataset_a, [pool_a[i] for i in pick_a], components, cfg.max_decoys, rng)
    feats_b = probe_matrix(dataset_b, [pool_b[i] for i in pick_b], components, cfg.max_decoys, rng)

    bounds = np.cumsum([0] + halves)
    splits = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        x = np.vstack([feats_a[lo:hi], feats_b[lo:hi]])
        y = np.concatenate([np.ones(hi - lo), np.zeros(hi - lo)])
        splits.append((x, y))
    (x_tr, y_tr), (x_va, y_va), (x_te, y_te) = splits

    net = Mlp.init(x_tr.shape[1], cfg.hidden_dim, 1, "sigmoid", rng)
    opt = Adam(lr=cfg.lr)
    best = (-1.0, 0, net.copy())
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x_tr))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            out, cache = net.forward(x_tr[idx])
            _, grad = bce_loss(out, y_tr[idx, None])
            grads, _ = net.backward(cache, grad)
            opt.step(net, grads)
        val_acc = _accuracy(net, x_va, y_va)
        if val_acc > best[0]:
            best = (val_acc, epoch, net.copy())
    val_acc, best_epoch, chosen = best
    return ProbeResult(_accuracy(chosen, x_te, y_te), components, len(y_tr), len(y_va), len(y_te),
                       val_acc, best_epoch)


def _accuracy(net: Mlp, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((net.logits(x)[:, 0] > 0) == (y > 0.5)))


def probe_table(results: Sequence[ProbeResult], fmt: str = "text") -> str:
    """One row per component set; ``fmt`` is "csv" or "text"."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("components", "accuracy", "train", "val", "test"))
        for r in results:
            w.writerow((component_label(r.components), repr(r.accuracy), r.train_size, r.val_size, r.test_size))
        return buf.getvalue()
    width = max([len("Components")] + [len(component_label(r.components)) for r in results])
    lines = [f"{'Components':<{width}}  Accuracy", f"{'Random':<{width}}  {50.0:6.2f}%"]
    for r in results:
        lines.append(f"{component_label(r.components):<{width}}  {100 * r.accuracy:6.2f}%")
    return "\n".join(lines) + "\n"
