"""Adversarial feature-transform adaptation of a frozen source scorer.

Target question/answer features are mapped through residual MLPs ``g_q`` and
``g_a``. Each outer iteration trains a freshly initialised domain
discriminator for ``k`` steps on source vs. transformed-target features, then
takes ``l`` transform steps that minimise ``log(1 - D(g(target)))`` plus
``lam`` times the surrogate loss of a partial-information source scorer.
"""

from __future__ import annotations

import csv
import enum
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .data import AffineShift, QUESTION_TYPES, SplitArrays, VqaDataset, type_frequencies
from .features import QuestionType
from .nn import Adam, BCE_EPS, DimensionError, ForwardCache, Mlp, bce_loss, mlp_arrays, mlp_from_arrays, read_container, write_container
from .scorer import InputMode, ScorerModel, build_inputs

log = logging.getLogger(__name__)

LOG2 = float(np.log(2.0))


class AdaptationError(RuntimeError):
    """Raised for invalid adaptation inputs or a diverging run."""


class AdaptSetting(str, enum.Enum):
    Q = "Q"
    T = "T"
    TD = "T+D"
    QT = "Q+T"
    QTD = "Q+T+D"

    @classmethod
    def parse(cls, text: str) -> "AdaptSetting":
        key = text.strip().upper().replace("+", "").replace("[", "").replace("]", "")
        for s in cls:
            if s.value.replace("+", "") == key:
                return s
        raise ValueError(f"unknown setting {text!r}; valid settings: {', '.join(s.value for s in cls)}")

    @property
    def has_question(self) -> bool:
        return "Q" in self.value

    @property
    def has_answer(self) -> bool:
        return "T" in self.value

    @property
    def has_decoys(self) -> bool:
        return "D" in self.value

    @property
    def default_lambda(self) -> float:
        return 0.5 if self.has_decoys else 0.1

    @property
    def scorer_mode(self) -> InputMode | None:
        """Input mode of the partial-information source scorer this setting uses."""
        if not self.has_answer:
            return None
        return InputMode.QC if self.has_question else InputMode.C

    @property
    def tag(self) -> str:
        return self.value.replace("+", "")


# ---------------------------------------------------------------------------
# transforms and discriminator


@dataclass
class ResidualTransform:
    """x -> x + net(x) with a ReLU hidden layer and identity output."""

    net: Mlp

    def __post_init__(self):
        if self.net.in_dim != self.net.out_dim or self.net.output != "identity":
            raise DimensionError("residual transform needs an identity-output net with in_dim == out_dim")

    @classmethod
    def identity(cls, io_dim: int, hidden_dim: int = 128, rng: np.random.Generator | None = None) -> "ResidualTransform":
        return cls(Mlp.init(io_dim, hidden_dim, io_dim, "identity", rng, zero_output=True))

    @property
    def io_dim(self) -> int:
        return self.net.in_dim

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        out, cache = self.net.forward(x)
        return cache.x + out, cache

    def backward(self, cache: ForwardCache, grad_y: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        grads, grad_x = self.net.backward(cache, grad_y)
        return grads, grad_x + grad_y

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            if x.shape != (self.io_dim,):
                raise DimensionError(f"expected length {self.io_dim}, got {x.shape}")
            return self.forward(x[None])[0][0]
        return self.forward(x)[0]


def transform_apply(t: ResidualTransform | None, x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) if t is None else t(x)


def make_discriminator(in_dim: int, hidden_dim: int, rng: np.random.Generator) -> Mlp:
    return Mlp.init(in_dim, hidden_dim, 1, "sigmoid", rng)


def discriminator_input(setting: AdaptSetting, f_q=None, f_t=None, f_d=None) -> np.ndarray:
    """Features the domain discriminator sees. ``f_d`` is accepted and
    ignored: decoys never take part in domain matching."""
    setting = AdaptSetting(setting)
    parts = []
    if setting.has_question:
        if f_q is None:
            raise AdaptationError(f"setting {setting.value} needs question features")
        parts.append(np.asarray(f_q, dtype=np.float64))
    if setting.has_answer:
        if f_t is None:
            raise AdaptationError(f"setting {setting.value} needs correct-answer features")
        parts.append(np.asarray(f_t, dtype=np.float64))
    return np.concatenate(parts, axis=-1)


def discriminator_in_dim(setting: AdaptSetting, text_dim: int) -> int:
    return text_dim * (int(setting.has_question) + int(setting.has_answer))


# ---------------------------------------------------------------------------
# losses


def _check_h(h_sd: ScorerModel, setting: AdaptSetting | None, has_q: bool) -> None:
    if h_sd.mode is InputMode.IQC:
        raise AdaptationError("the surrogate needs a QC or C scorer, not IQC")
    if setting is not None and h_sd.mode is not setting.scorer_mode:
        raise AdaptationError(f"setting {setting.value} needs a {setting.scorer_mode.value} scorer, got {h_sd.mode.value}")
    if h_sd.mode is InputMode.QC and not has_q:
        raise AdaptationError("QC scorer needs question features")


def surrogate_losses(h_sd: ScorerModel, q: np.ndarray | None, c: np.ndarray, is_correct: np.ndarray) -> np.ndarray:
    """Per-pair -log h (correct) or -log(1 - h) (decoy) on already-transformed rows."""
    _check_h(h_sd, None, q is not None)
    x = build_inputs(h_sd.mode, None, q if h_sd.mode.uses_question else None, c)
    p = np.clip(h_sd.net(x)[:, 0], BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(is_correct, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def surrogate_loss(h_sd: ScorerModel, gq: ResidualTransform | None, ga: ResidualTransform | None,
                   q, c, is_correct: bool, setting: AdaptSetting | None = None) -> float:
    """Loss of one (question, candidate) pair after transformation."""
    if setting is not None:
        _check_h(h_sd, setting, q is not None)
    qt = None if q is None or not h_sd.mode.uses_question else transform_apply(gq, np.atleast_2d(q))
    ct = transform_apply(ga, np.atleast_2d(c))
    return float(surrogate_losses(h_sd, qt, ct, np.array([float(is_correct)]))[0])


def jsd_estimate(disc: Mlp, source_batch: np.ndarray, target_batch: np.ndarray) -> float:
    """log 2 + mean log D(s)/2 + mean log(1 - D(t))/2, clipped to [0, log 2]."""
    ps = np.clip(disc(source_batch)[:, 0], BCE_EPS, 1.0 - BCE_EPS)
    pt = np.clip(disc(target_batch)[:, 0], BCE_EPS, 1.0 - BCE_EPS)
    est = LOG2 + 0.5 * np.mean(np.log(ps)) + 0.5 * np.mean(np.log1p(-pt))
    return float(np.clip(est, 0.0, LOG2))


# ---------------------------------------------------------------------------
# weighted source sampling


class WeightedSourceSampler:
    """Draws source indices with replacement, weighting each triplet by the
    target/source frequency ratio of its question type."""

    def __init__(self, weights: np.ndarray, seed: int | np.random.Generator):
        self.weights = weights
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._cdf = np.cumsum(weights)
        # pin the top at the last positive weight so roundoff can never
        # hand leftover mass to trailing zero-weight items
        self._cdf[np.flatnonzero(weights)[-1]:] = 1.0

    def __len__(self) -> int:
        return len(self.weights)

    def sample(self, m: int) -> np.ndarray:
        return np.searchsorted(self._cdf, self.rng.random(m), side="right")


def type_ratio_weights(source_types, target_types) -> np.ndarray:
    """Per-source-item weights proportional to targetFreq/sourceFreq of its type."""
    source_types = list(source_types)
    if not source_types:
        raise AdaptationError("source split is empty")
    src_counts = {q: 0 for q in QUESTION_TYPES}
    for q in source_types:
        src_counts[q] += 1
    tgt_counts = {q: 0 for q in QUESTION_TYPES}
    for q in target_types:
        tgt_counts[q] += 1
    n_src = len(source_types)
    n_tgt = sum(tgt_counts.values())
    if n_tgt == 0:
        raise AdaptationError("target split is empty")
    missing = [q.value for q in QUESTION_TYPES if tgt_counts[q] and not src_counts[q]]
    if missing:
        warnings.warn(f"question types {missing} occur in the target but not the source; they get no mass",
                      stacklevel=3)
    ratio = {q: (tgt_counts[q] / n_tgt) / (src_counts[q] / n_src) if src_counts[q] else 0.0 for q in QUESTION_TYPES}
    w = np.array([ratio[q] for q in source_types])
    if w.sum() == 0:
        warnings.warn("no question type is shared between source and target; sampling uniformly", stacklevel=3)
        w = np.ones(n_src)
    return w / w.sum()


def weighted_source_sampler(source: VqaDataset, target: VqaDataset, seed: int | np.random.Generator,
                            source_split: str = "train", target_split: str = "train") -> WeightedSourceSampler:
    w = type_ratio_weights(source.arrays(source_split).qtypes, target.arrays(target_split).qtypes)
    return WeightedSourceSampler(w, seed)


def uniform_sampler(n: int, seed: int | np.random.Generator) -> WeightedSourceSampler:
    return WeightedSourceSampler(np.full(n, 1.0 / n), seed)


# ---------------------------------------------------------------------------
# configuration and run artifacts


@dataclass
class AdaptConfig:
    setting: AdaptSetting = AdaptSetting.QTD
    lam: Optional[float] = None
    iterations: int = 1000
    k: int = 500
    l: int = 5
    batch_size: int = 100
    lr: float = 1e-4
    disc_lr: Optional[float] = None
    seed: int = 0
    weighted_sampling: bool = True
    decoys: str = "all"
    transform_hidden: int = 128
    disc_hidden: int = 8192

    def __post_init__(self):
        if not isinstance(self.setting, AdaptSetting):
            self.setting = AdaptSetting.parse(self.setting)
        if self.lam is None:
            self.lam = self.setting.default_lambda
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        for name in ("iterations", "k", "l", "batch_size", "transform_hidden", "disc_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or (self.disc_lr is not None and self.disc_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.decoys not in ("all", "one"):
            raise ValueError("decoys must be 'all' or 'one'")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, AdaptSetting):
                value = value.value
            lines.append(f"{f.name} = {'none' if value is None else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AdaptConfig":
        return cls(**parse_config_values(cls, text))


def parse_config_values(cls, text: str) -> dict:
    """Parse ``key = value`` lines into typed kwargs for dataclass ``cls``."""
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lam"
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = coerce_value(types[key], value)
    return out


def coerce_value(type_name, value: str):
    type_name = str(type_name)
    if value.lower() == "none":
        return None
    if "bool" in type_name:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if "float" in type_name:
        return float(value)
    if "int" in type_name:
        return int(value)
    return value


@dataclass
class AdaptationRun:
    gq: ResidualTransform
    ga: ResidualTransform
    config: AdaptConfig
    diagnostics: dict[str, np.ndarray] = field(default_factory=dict)

    DIAGNOSTIC_COLUMNS = ("disc_loss", "transform_loss", "surrogate_loss", "jsd_estimate", "disc_accuracy")

    def transforms(self) -> tuple[ResidualTransform | None, ResidualTransform | None]:
        """Transforms for inference; untrained ones are reported as None (identity)."""
        s = self.config.setting
        return (self.gq if s.has_question else None), (self.ga if s.has_answer else None)


def save_run(run: AdaptationRun, out_dir: str | Path, stem: str = "adapt") -> tuple[Path, Path]:
    """Write the transforms checkpoint and the diagnostics CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"{stem}.transforms.ckpt"
    cfg = asdict(run.config)
    cfg["setting"] = run.config.setting.value
    arrays = {**mlp_arrays(run.gq.net, "gq."), **mlp_arrays(run.ga.net, "ga.")}
    write_container(ckpt, {"kind": "transforms", "config": cfg}, arrays)
    diag = out_dir / f"{stem}.diagnostics.csv"
    with open(diag, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration",) + AdaptationRun.DIAGNOSTIC_COLUMNS)
        for i in range(run.config.iterations):
            w.writerow([i] + [repr(float(run.diagnostics[c][i])) for c in AdaptationRun.DIAGNOSTIC_COLUMNS])
    (out_dir / f"{stem}.config.txt").write_text(run.config.to_text())
    return ckpt, diag


def load_transforms(path: str | Path) -> tuple[ResidualTransform | None, ResidualTransform | None, AdaptConfig]:
    meta, arrays = read_container(path)
    if meta.get("kind") != "transforms":
        raise AdaptationError(f"{path}: not a transforms checkpoint")
    cfg = AdaptConfig(**meta["config"])
    gq = ResidualTransform(mlp_from_arrays(arrays, "identity", "gq."))
    ga = ResidualTransform(mlp_from_arrays(arrays, "identity", "ga."))
    run = AdaptationRun(gq, ga, cfg)
    return (*run.transforms(), cfg)


# ---------------------------------------------------------------------------
# training


def _disc_step(disc: Mlp, opt: Adam, xs: np.ndarray, xt: np.ndarray) -> tuple[float, float]:
    x = np.vstack([xs, xt])
    y = np.concatenate([np.ones(len(xs)), np.zeros(len(xt))])[:, None]
    out, cache = disc.forward(x)
    loss, grad = bce_loss(out, y)
    grads, _ = disc.backward(cache, grad)
    opt.step(disc, grads)
    acc = float(np.mean((out[:, 0] > 0.5) == (y[:, 0] > 0.5)))
    return loss, acc


def train_adaptation(
    source: VqaDataset,
    target: VqaDataset,
    m_sd: ScorerModel,
    h_sd: ScorerModel | None,
    cfg: AdaptConfig,
    source_split: str = "train",
    target_split: str = "train",
) -> AdaptationRun:
    """Learn ``g_q``/``g_a`` so transformed target features look like source
    features to a discriminator and stay well-scored by ``h_sd``."""
    setting = cfg.setting
    text_dim = source.text_dim
    if target.text_dim != text_dim or m_sd.text_dim != text_dim:
        raise AdaptationError("source, target and scorer text dims differ")
    use_surrogate = setting.has_answer and cfg.lam > 0
    if setting.has_answer:
        if h_sd is None:
            raise AdaptationError(f"setting {setting.value} needs a partial-information scorer")
        _check_h(h_sd, setting, setting.has_question)
    elif h_sd is not None:
        raise AdaptationError("setting Q does not use a partial-information scorer")

    src = source.arrays(source_split)
    tgt = target.arrays(target_split)
    if len(src) == 0 or len(tgt) == 0:
        raise AdaptationError("source and target splits must be nonempty")

    root = np.random.SeedSequence(cfg.seed)
    init_ss, disc_ss, src_ss, tgt_ss = root.spawn(4)
    init_rng = np.random.default_rng(init_ss)
    gq = ResidualTransform.identity(text_dim, cfg.transform_hidden, init_rng)
    ga = ResidualTransform.identity(text_dim, cfg.transform_hidden, init_rng)
    opt_q = Adam(lr=cfg.lr)
    opt_a = Adam(lr=cfg.lr)
    disc_rng = np.random.default_rng(disc_ss)
    tgt_rng = np.random.default_rng(tgt_ss)
    if cfg.weighted_sampling:
        src_sampler = WeightedSourceSampler(type_ratio_weights(src.qtypes, tgt.qtypes), np.random.default_rng(src_ss))
    else:
        src_sampler = uniform_sampler(len(src), np.random.default_rng(src_ss))

    src_disc_feats = discriminator_input(setting, src.question, src.answer)
    disc_in = discriminator_in_dim(setting, text_dim)
    decoy_counts = np.diff(tgt.cand_start) - 1
    m = cfg.batch_size
    disc_lr = cfg.disc_lr or cfg.lr

    diag = {c: np.zeros(cfg.iterations) for c in AdaptationRun.DIAGNOSTIC_COLUMNS}
    for it in range(cfg.iterations):
        disc = make_discriminator(disc_in, cfg.disc_hidden, disc_rng)
        disc_opt = Adam(lr=disc_lr)
        # transforms are fixed during the discriminator phase
        tq = gq(tgt.question) if setting.has_question else tgt.question
        ta = ga(tgt.answer) if setting.has_answer else tgt.answer
        tgt_disc_feats = discriminator_input(setting, tq, ta)
        d_losses = []
        for _ in range(cfg.k):
            xs = src_disc_feats[src_sampler.sample(m)]
            xt = tgt_disc_feats[tgt_rng.integers(len(tgt), size=m)]
            loss, acc = _disc_step(disc, disc_opt, xs, xt)
            d_losses.append(loss)
        diag["disc_loss"][it] = np.mean(d_losses)
        diag["disc_accuracy"][it] = acc
        diag["jsd_estimate"][it] = jsd_estimate(disc, xs, xt)

        t_losses, s_losses = [], []
        for _ in range(cfg.l):
            idx = tgt_rng.integers(len(tgt), size=m)
            total, surr = _transform_step(setting, cfg, gq, ga, opt_q, opt_a, disc, h_sd if use_surrogate else None,
                                          tgt, idx, decoy_counts, tgt_rng)
            t_losses.append(total)
            s_losses.append(surr)
        diag["transform_loss"][it] = np.mean(t_losses)
        diag["surrogate_loss"][it] = np.mean(s_losses)
        if not all(np.isfinite(diag[c][it]) for c in diag):
            raise AdaptationError(
                f"non-finite loss at iteration {it}: " + ", ".join(f"{c}={diag[c][it]}" for c in diag)
            )
        log.debug("iter %d disc %.4f acc %.3f jsd %.4f transform %.4f surrogate %.4f", it,
                  diag["disc_loss"][it], acc, diag["jsd_estimate"][it], diag["transform_loss"][it],
                  diag["surrogate_loss"][it])
    return AdaptationRun(gq, ga, cfg, diag)


def _transform_step(setting, cfg, gq, ga, opt_q, opt_a, disc, h_sd, tgt: SplitArrays, idx, decoy_counts, rng):
    total, surr, g_q, g_a = transform_objective(setting, cfg.lam, cfg.decoys, gq, ga, disc, h_sd, tgt, idx,
                                                decoy_counts, rng)
    if g_q is not None:
        opt_q.step(gq.net, g_q)
    if g_a is not None:
        opt_a.step(ga.net, g_a)
    return total, surr


def transform_objective(setting: AdaptSetting, lam: float, decoys: str, gq: ResidualTransform, ga: ResidualTransform,
                        disc: Mlp, h_sd: ScorerModel | None, tgt: SplitArrays, idx: np.ndarray,
                        decoy_counts: np.ndarray, rng: np.random.Generator):
    """Transform-phase objective on target rows ``idx`` and its gradients.

    Returns ``(total, surrogate, grads_q, grads_a)``; the objective is
    mean log(1 - D(g(x))) + lam * (sum of pair losses) / m, and the
    gradients of a frozen transform are None.
    """
    m = len(idx)
    q_in = tgt.question[idx]
    t_in = tgt.answer[idx]
    if setting.has_question:
        q_out, q_cache = gq.forward(q_in)
    else:
        q_out = q_in
    if setting.has_answer:
        t_out, t_cache = ga.forward(t_in)
    else:
        t_out = t_in

    # adversarial term: mean log(1 - D(g(target)))
    x = discriminator_input(setting, q_out, t_out)
    d_out, d_cache = disc.forward(x)
    p = d_out[:, 0]
    adv = float(np.mean(np.log1p(-np.clip(p, 0.0, 1.0 - BCE_EPS))))
    _, dx = disc.backward(d_cache, (-1.0 / (1.0 - p) / m)[:, None])
    grad_q = dx[:, :q_out.shape[1]] if setting.has_question else None
    grad_t = dx[:, -t_out.shape[1]:] if setting.has_answer else None

    surr = 0.0
    grads_a_extra = []
    if h_sd is not None:
        # candidates: the correct answer plus all (or one sampled) decoys
        owners = [np.arange(m)]
        if setting.has_decoys:
            starts = tgt.cand_start[idx]
            if decoys == "all":
                counts = decoy_counts[idx]
                owners.append(np.repeat(np.arange(m), counts))
                offs = np.concatenate([np.arange(1, c + 1) for c in counts])
                d_rows = np.repeat(starts, counts) + offs
            else:
                picks = rng.integers(0, decoy_counts[idx]) + 1
                owners.append(np.arange(m))
                d_rows = starts + picks
            d_in = tgt.cand_feat[d_rows]
            d_out_feat, d_feat_cache = ga.forward(d_in)
        owner = np.concatenate(owners)
        cand = t_out if not setting.has_decoys else np.vstack([t_out, d_out_feat])
        labels = np.zeros(len(owner))
        labels[:m] = 1.0
        qrows = q_out[owner] if h_sd.mode.uses_question else None
        hx = build_inputs(h_sd.mode, None, qrows, cand)
        h_out, h_cache = h_sd.net.forward(hx)
        ph = np.clip(h_out[:, 0], BCE_EPS, 1.0 - BCE_EPS)
        pair_loss = -(labels * np.log(ph) + (1 - labels) * np.log1p(-ph))
        surr = float(pair_loss.sum() / m)
        # d(sum/m)/dp with p at its clipped value
        dp = (ph - labels) / (ph * (1.0 - ph)) / m * lam
        _, dh = h_sd.net.backward(h_cache, dp[:, None])
        td = h_sd.text_dim
        dcand = dh[:, -td:]
        if h_sd.mode.uses_question and setting.has_question:
            gq_from_h = np.zeros_like(q_out)
            np.add.at(gq_from_h, owner, dh[:, :td])
            grad_q = grad_q + gq_from_h
        grad_t = grad_t + dcand[:m]
        if setting.has_decoys:
            grads_a_extra.append((d_feat_cache, dcand[m:]))

    total = adv + lam * surr if h_sd is not None else adv
    g_q = g_a = None
    if setting.has_question:
        g_q, _ = gq.backward(q_cache, grad_q)
    if setting.has_answer:
        g_a, _ = ga.backward(t_cache, grad_t)
        for cache, grad in grads_a_extra:
            extra, _ = ga.backward(cache, grad)
            for key in g_a:
                g_a[key] = g_a[key] + extra[key]
    return total, surr, g_q, g_a


# ---------------------------------------------------------------------------
# evaluation helpers


def discriminator_accuracy(source_feats: np.ndarray, target_feats: np.ndarray, hidden_dim: int = 128,
                           steps: int = 500, batch_size: int = 100, lr: float = 1e-3, seed: int = 0) -> float:
    """Held-out accuracy of a fresh discriminator trained on half of each set."""
    rng = np.random.default_rng(seed)
    s_perm = rng.permutation(len(source_feats))
    t_perm = rng.permutation(len(target_feats))
    s_tr, s_te = np.array_split(source_feats[s_perm], 2)
    t_tr, t_te = np.array_split(target_feats[t_perm], 2)
    disc = make_discriminator(source_feats.shape[1], hidden_dim, rng)
    opt = Adam(lr=lr)
    for _ in range(steps):
        _disc_step(disc, opt, s_tr[rng.integers(len(s_tr), size=batch_size)],
                   t_tr[rng.integers(len(t_tr), size=batch_size)])
    correct = np.sum(disc(s_te)[:, 0] > 0.5) + np.sum(disc(t_te)[:, 0] <= 0.5)
    return float(correct / (len(s_te) + len(t_te)))


def coral_align(source_feats: np.ndarray, target_feats: np.ndarray, eps: float = 1e-5) -> AffineShift:
    """Affine map whitening target features and recolouring them with the
    source covariance, then moving them onto the source mean."""
    xs = np.asarray(source_feats, dtype=np.float64)
    xt = np.asarray(target_feats, dtype=np.float64)
    dim = xs.shape[1]
    if xt.shape[1] != dim:
        raise DimensionError("source and target feature dims differ")
    if len(xs) < dim + 1 or len(xt) < dim + 1:
        raise AdaptationError(f"CORAL needs at least {dim + 1} samples per domain")
    mu_s, mu_t = xs.mean(axis=0), xt.mean(axis=0)
    cov_s = np.cov(xs, rowvar=False) + eps * np.eye(dim)
    cov_t = np.cov(xt, rowvar=False) + eps * np.eye(dim)
    matrix = _sym_power(cov_s, 0.5) @ _sym_power(cov_t, -0.5)
    return AffineShift(matrix, mu_s - matrix @ mu_t)


def _sym_power(cov: np.ndarray, power: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * vals**power) @ vecs.T


def coral_transforms(source: VqaDataset, target: VqaDataset, split: str = "train") -> tuple[AffineShift, AffineShift]:
    """Independent CORAL maps for question and answer features (answers use
    correct answers and decoys)."""
    s, t = source.arrays(split), target.arrays(split)
    return coral_align(s.question, t.question), coral_align(s.cand_feat, t.cand_feat)
