"""Accuracy metrics and the Direct / DA / Within comparison protocol."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adaptation import AdaptConfig, AdaptSetting, coral_transforms, train_adaptation
from .data import QUESTION_TYPES, DatasetError, VqaDataset, normalize_answer, subsample
from .features import QuestionType
from .scorer import FeatureMap, InputMode, ScorerModel, ScorerTrainConfig, train_scorer

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    accuracy: float
    n: int
    per_type: dict[QuestionType, tuple[float, int]]
    metric: str = "MC"

    def as_dict(self) -> dict:
        return {
            "metric": self.metric,
            "accuracy": self.accuracy,
            "n": self.n,
            "per_type": {q.value: {"accuracy": a, "count": c} for q, (a, c) in self.per_type.items()},
        }


def _aggregate(credit: np.ndarray, qtypes: Sequence[QuestionType], metric: str) -> EvalResult:
    per_type = {}
    types = np.array([q.value for q in qtypes])
    for q in QUESTION_TYPES:
        mask = types == q.value
        if mask.any():
            per_type[q] = (float(credit[mask].mean()), int(mask.sum()))
    return EvalResult(float(credit.mean()), len(credit), per_type, metric)


def shuffled_choices(model: ScorerModel, dataset: VqaDataset, split: str, gq: FeatureMap | None,
                     ga: FeatureMap | None, seed: int) -> np.ndarray:
    """Chosen candidate (0 = correct) per triplet after a seeded shuffle of
    each candidate list; exact ties go to the earliest shuffled position."""
    arrays = dataset.arrays(split)
    if len(arrays) == 0:
        raise DatasetError(f"split {split!r} of {dataset.name} is empty")
    # random sort keys realise an independent uniform permutation per triplet
    keys = np.random.default_rng(seed).random(len(arrays.cand_feat))
    return model.predict_arrays(arrays, gq, ga, tiebreak=keys)


def mc_accuracy(model: ScorerModel, dataset: VqaDataset, split: str = "test", gq: FeatureMap | None = None,
                ga: FeatureMap | None = None, seed: int = 0) -> EvalResult:
    chosen = shuffled_choices(model, dataset, split, gq, ga, seed)
    return _aggregate((chosen == 0).astype(float), dataset.arrays(split).qtypes, "MC")


def vqa10_credit(chosen_text: str, gt_answers: Sequence[str]) -> float:
    target = chosen_text.strip().lower()
    matches = sum(1 for a in gt_answers if a.strip().lower() == target)
    return min(matches / 3.0, 1.0)


def vqa10_accuracy(model: ScorerModel, dataset: VqaDataset, split: str = "val", gq: FeatureMap | None = None,
                   ga: FeatureMap | None = None, seed: int = 0) -> EvalResult:
    """Mean of min(#annotators agreeing with the chosen answer / 3, 1)."""
    triplets = dataset[split]
    for t in triplets:
        if t.gt_answers is None:
            raise DatasetError(f"record {t.id}: no gt_answers for the VQA10 metric")
    chosen = shuffled_choices(model, dataset, split, gq, ga, seed)
    credit = np.array([
        vqa10_credit(t.answer if c == 0 else t.decoys[c - 1], t.gt_answers) for t, c in zip(triplets, chosen)
    ])
    return _aggregate(credit, dataset.arrays(split).qtypes, "VQA10")


# ---------------------------------------------------------------------------
# comparison protocol


@dataclass
class ComparisonRow:
    source_name: str
    target_name: str
    setting: str
    lam: float
    subsample_fraction: float
    seed_count: int
    direct: float
    da: float
    within: float
    direct_std: float = 0.0
    da_std: float = 0.0
    within_std: float = 0.0
    coral: float | None = None
    coral_std: float | None = None
    per_type: dict[str, dict[str, float]] = field(default_factory=dict)


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows]}, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ComparisonReport":
        return cls([ComparisonRow(**r) for r in json.loads(text)["rows"]])

    def row(self, setting: str) -> ComparisonRow:
        for r in self.rows:
            if r.setting == setting:
                return r
        raise KeyError(setting)


@dataclass
class SeedOutcome:
    seed: int
    direct: EvalResult
    within: EvalResult
    da: dict[str, EvalResult]
    coral: EvalResult | None = None


def _mean_std(values: Iterable[float]) -> tuple[float, float]:
    arr = np.array(list(values), dtype=float)
    return float(arr.mean()), float(arr.std())


def run_seed(source: VqaDataset, target: VqaDataset, settings: Sequence[AdaptSetting], adapt_cfg: AdaptConfig,
             scorer_cfg: ScorerTrainConfig, seed: int, fraction: float = 1.0, lambdas: dict | None = None,
             with_coral: bool = False, split: str = "test", m_sd: ScorerModel | None = None) -> SeedOutcome:
    """One seed of the protocol: train M_SD (unless given), evaluate Direct,
    adapt per setting, train Within on (sub-sampled) target supervision."""
    target_sub = subsample(target, fraction, seed) if fraction < 1.0 else target
    cfg = replace(scorer_cfg, seed=seed)
    if m_sd is None:
        m_sd = train_scorer(source, InputMode.IQC, cfg)
    direct = mc_accuracy(m_sd, target, split, seed=seed)
    partial: dict[InputMode, ScorerModel] = {}
    da = {}
    for setting in settings:
        mode = setting.scorer_mode
        if mode is not None and mode not in partial:
            partial[mode] = train_scorer(source, mode, cfg)
        lam = (lambdas or {}).get(setting, setting.default_lambda)
        run_cfg = replace(adapt_cfg, setting=setting, seed=seed, lam=lam)
        run = train_adaptation(source, target_sub, m_sd, partial.get(mode), run_cfg)
        da[setting.value] = mc_accuracy(m_sd, target, split, *run.transforms(), seed=seed)
    within = mc_accuracy(train_scorer(target_sub, InputMode.IQC, cfg), target, split, seed=seed)
    coral = None
    if with_coral:
        cq, ca = coral_transforms(source, target_sub)
        coral = mc_accuracy(m_sd, target, split, cq, ca, seed=seed)
    log.info("seed %d: direct %.3f within %.3f da %s", seed, direct.accuracy, within.accuracy,
             {k: round(v.accuracy, 3) for k, v in da.items()})
    return SeedOutcome(seed, direct, within, da, coral)


def summarize(source: VqaDataset, target: VqaDataset, outcomes: Sequence[SeedOutcome], settings: Sequence[AdaptSetting],
              lambdas: dict[AdaptSetting, float], fraction: float) -> ComparisonReport:
    rows = []
    for setting in settings:
        direct = _mean_std(o.direct.accuracy for o in outcomes)
        da = _mean_std(o.da[setting.value].accuracy for o in outcomes)
        within = _mean_std(o.within.accuracy for o in outcomes)
        coral = _mean_std(o.coral.accuracy for o in outcomes) if outcomes[0].coral is not None else (None, None)
        per_type = {}
        for method, get in (("direct", lambda o: o.direct), ("da", lambda o: o.da[setting.value]),
                            ("within", lambda o: o.within)):
            per_type[method] = {
                q.value: float(np.mean([get(o).per_type[q][0] for o in outcomes if q in get(o).per_type]))
                for q in QUESTION_TYPES if any(q in get(o).per_type for o in outcomes)
            }
        rows.append(ComparisonRow(
            source.name, target.name, setting.value, float(lambdas[setting]), float(fraction), len(outcomes),
            direct[0], da[0], within[0], direct[1], da[1], within[1], coral[0], coral[1], per_type,
        ))
    return ComparisonReport(rows)


def run_comparison(source: VqaDataset, target: VqaDataset, settings: Sequence[AdaptSetting] | AdaptSetting,
                   adapt_cfg: AdaptConfig, seeds: Sequence[int], scorer_cfg: ScorerTrainConfig | None = None,
                   fraction: float = 1.0, lambdas: dict | None = None, with_coral: bool = False,
                   workers: int = 1, m_sd: ScorerModel | None = None) -> ComparisonReport:
    """Mean/std of Direct, DA and Within accuracy over ``seeds``.

    ``lambdas`` maps settings to surrogate weights; unlisted settings use
    their defaults. ``workers > 1`` fans seeds out over processes.
    """
    if isinstance(settings, (AdaptSetting, str)):
        settings = [settings]
    settings = [AdaptSetting.parse(s) if not isinstance(s, AdaptSetting) else s for s in settings]
    if not seeds:
        raise ValueError("need at least one seed")
    if not target["train"]:
        raise DatasetError("Within needs a nonempty target train split")
    scorer_cfg = scorer_cfg or ScorerTrainConfig()
    lambdas = {s: (lambdas or {}).get(s, s.default_lambda) for s in settings}
    args = [(source, target, settings, adapt_cfg, scorer_cfg, seed, fraction, lambdas, with_coral, "test", m_sd)
            for seed in seeds]
    if workers > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_seed_args, args))
    else:
        outcomes = [run_seed(*a) for a in args]
    return summarize(source, target, outcomes, settings, lambdas, fraction)


def _run_seed_args(args):
    return run_seed(*args)


# ---------------------------------------------------------------------------
# report emission

CSV_COLUMNS = ("source_name", "target_name", "setting", "lam", "subsample_fraction", "seed_count",
               "direct", "direct_std", "da", "da_std", "within", "within_std", "coral", "coral_std")


def _fraction_label(f: float) -> str:
    if f == 1.0:
        return "1"
    inv = 1.0 / f
    return f"1/{int(round(inv))}" if abs(inv - round(inv)) < 1e-9 else f"{f:g}"


def _csv_value(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def report_csv(report: ComparisonReport) -> str:
    type_cols = [f"{m}_{q.value}" for m in ("direct", "da", "within") for q in QUESTION_TYPES]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS + tuple(type_cols))
    for r in report.rows:
        d = asdict(r)
        types = [r.per_type.get(m, {}).get(q.value) for m in ("direct", "da", "within") for q in QUESTION_TYPES]
        w.writerow([_csv_value(d[c]) for c in CSV_COLUMNS] + [_csv_value(v) for v in types])
    return buf.getvalue()


MARKDOWN_COLUMNS = ("Source", "Target", "Setting", "λ", "Fraction", "Seeds", "Direct", "DA", "Within")


def report_markdown(report: ComparisonReport) -> str:
    def pct(mean, std):
        return f"{100 * mean:.1f} ± {100 * std:.1f}"

    lines = ["| " + " | ".join(MARKDOWN_COLUMNS) + " |", "|" + "---|" * len(MARKDOWN_COLUMNS)]
    for r in report.rows:
        cells = (r.source_name, r.target_name, r.setting, f"{r.lam:g}", _fraction_label(r.subsample_fraction),
                 str(r.seed_count), pct(r.direct, r.direct_std), pct(r.da, r.da_std), pct(r.within, r.within_std))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report_markdown_wide(report: ComparisonReport) -> str:
    """One line per (source, target, fraction, seeds) with a DA column per
    setting, the layout of a Direct | DA ... | Within results table."""
    settings = list(dict.fromkeys(r.setting for r in report.rows))
    header = ("Source", "Target", "Fraction", "Direct") + tuple(f"DA {s}" for s in settings) + ("Within",)
    groups: dict[tuple, list[ComparisonRow]] = {}
    for r in report.rows:
        groups.setdefault((r.source_name, r.target_name, r.subsample_fraction, r.seed_count), []).append(r)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for (src, tgt, frac, _), rows in groups.items():
        da = {r.setting: f"{100 * r.da:.1f}" for r in rows}
        cells = (src, tgt, _fraction_label(frac), f"{100 * rows[0].direct:.1f}",
                 *(da.get(s, "") for s in settings), f"{100 * rows[0].within:.1f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _markdown_both(report: ComparisonReport) -> str:
    return report_markdown(report) + "\n" + report_markdown_wide(report)


def emit_report(report: ComparisonReport, fmt: str, path: str | Path) -> Path:
    if not report.rows:
        raise ValueError("report has no rows")
    writers = {"csv": report_csv, "json": lambda r: r.to_json() + "\n", "markdown": _markdown_both, "md": _markdown_both}
    if fmt not in writers:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    path.write_text(writers[fmt](report), encoding="utf-8")
    return path
