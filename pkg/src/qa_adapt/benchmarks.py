"""Desk-scale synthetic benchmarks and the training budgets used with them.

The full-size defaults of :class:`ScorerTrainConfig` and :class:`AdaptConfig`
(8192-unit hidden layers, 1000 x 500 discriminator steps) target real
datasets; on 16-d synthetic features the budgets below converge in seconds.
"""

from __future__ import annotations

from dataclasses import replace

from .adaptation import AdaptConfig
from .data import AffineShift, SyntheticBiasSpec
from .probe import ProbeConfig
from .scorer import ScorerTrainConfig

TEXT_DIM = 16

DESK_SCORER = ScorerTrainConfig(epochs=10, lr=1e-3, hidden_dim=128)
DESK_ADAPT = AdaptConfig(iterations=200, k=50, l=5, lr=1e-3, disc_lr=1e-2, disc_hidden=128)
DESK_PROBE = ProbeConfig(hidden_dim=256, epochs=20, lr=1e-3)
PROBE_SIZES = (1600, 400, 2000)

_NOISE = dict(phrasing_noise=0.8, image_noise=1.5)


def _shift(mix: float, offset: float, seed: int) -> AffineShift:
    return AffineShift.random(TEXT_DIM, mix, offset, seed)


def affine_benchmark(seed: int = 0, **overrides) -> SyntheticBiasSpec:
    """Question and answer features of the target go through random affine maps."""
    spec = SyntheticBiasSpec(question_shift=_shift(0.6, 2.0, 1), answer_shift=_shift(0.6, 2.0, 2), seed=seed, **_NOISE)
    return replace(spec, **overrides)


def mean_shift_benchmark(seed: int = 0, **overrides) -> SyntheticBiasSpec:
    """Target features are source features plus a constant offset."""
    spec = SyntheticBiasSpec(question_shift=_shift(0.0, 2.0, 1), answer_shift=_shift(0.0, 2.0, 2), seed=seed, **_NOISE)
    return replace(spec, **overrides)


def nonlinear_benchmark(seed: int = 0, squash: float = 1.5, **overrides) -> SyntheticBiasSpec:
    """Affine shift followed by coordinate-wise tanh squashing."""
    return affine_benchmark(seed, squash=squash, **overrides)


def null_benchmark(seed: int = 0, **overrides) -> SyntheticBiasSpec:
    """Source and target share one generative law."""
    return replace(SyntheticBiasSpec(seed=seed, **_NOISE), **overrides)


def answer_shift_benchmark(seed: int = 0, **overrides) -> SyntheticBiasSpec:
    """Only answer features move; questions and images keep the source law."""
    return replace(SyntheticBiasSpec(answer_shift=_shift(0.6, 2.0, 2), seed=seed, **_NOISE), **overrides)


BENCHMARKS = {
    "affine": affine_benchmark,
    "mean-shift": mean_shift_benchmark,
    "nonlinear": nonlinear_benchmark,
    "null": null_benchmark,
    "answer-shift": answer_shift_benchmark,
}
