"""Performance-driven gradient modulation with a conflict-aware penalty.

After backward and before the optimizer update, each modality encoder's
gradients are rescaled by a coefficient derived from inverse unimodal errors:
the better-performing modality gets the smaller scale. A modality that is
already ahead on error but still pushes the larger gradient norm onto its
encoder is in *gradient norm conflict* and has its coefficient multiplied by a
fixed penalty factor. An optional enhancement mode amplifies the weaker
modality instead of only damping the stronger one; it is a gap-fill with no
reference semantics and defaults off. Everything runs only inside a half-open
epoch window so late training is unconstrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .autodiff import ContractError, grad_norm
from .model import ModelParams

RATIO_VARIANTS = ("as_written", "ratio_minus_one")
GRAD_NORM_MODES = ("mean_of_norms", "norm_of_all")


@dataclass
class ModulationConfig:
    alpha: float = 1.0
    eta: float = 0.5
    epsilon: float = 1e-12
    window_start: int = 0
    window_end: int = 25
    ratio_variant: str = "as_written"
    ge_enabled: bool = False
    ge_cap: float = 2.0
    grad_norm_mode: str = "mean_of_norms"
    # Extensions beyond the base knobs: the trainer's conflict-penalty toggle
    # needs a switch here, and single-batch MAEs at batch size 8 are noisy
    # enough that an EMA option (decay 0.9) is worth having. 0 disables it.
    cp_enabled: bool = True
    mae_ema_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.window_start > self.window_end:
            raise ValueError("window_start must be <= window_end")
        if self.ge_cap < 1.0:
            raise ValueError(f"ge_cap must be >= 1, got {self.ge_cap}")
        if self.ratio_variant not in RATIO_VARIANTS:
            raise ValueError(f"ratio_variant must be one of {RATIO_VARIANTS}")
        if self.grad_norm_mode not in GRAD_NORM_MODES:
            raise ValueError(f"grad_norm_mode must be one of {GRAD_NORM_MODES}")
        if not 0.0 <= self.mae_ema_decay < 1.0:
            raise ValueError("mae_ema_decay must lie in [0, 1)")


@dataclass
class ModulationState:
    """Per-step record of everything the modulation engine saw and did."""

    mae_a: float
    mae_v: float
    s_a: float
    s_v: float
    c_a: float
    c_v: float
    g_a: float
    g_v: float
    conflict_a: bool
    conflict_v: bool
    imbalance: float
    active: bool

    def to_dict(self) -> dict:
        return {
            "mae_a": self.mae_a, "mae_v": self.mae_v,
            "s_a": self.s_a, "s_v": self.s_v,
            "c_a": self.c_a, "c_v": self.c_v,
            "g_a": self.g_a, "g_v": self.g_v,
            "conflict_a": self.conflict_a, "conflict_v": self.conflict_v,
            "imbalance": self.imbalance, "mod_active": self.active,
        }


def inverse_error_scores(mae_a: float, mae_v: float, eps: float) -> tuple[float, float]:
    return 1.0 / (mae_a + eps), 1.0 / (mae_v + eps)


def _damped_coefficient(s_self: float, s_other: float, cfg: ModulationConfig) -> float:
    """Scale for the better modality: 1 - tanh(alpha * relu(ratio)).

    Evaluated as 2 / (exp(2x) + 1), which is the same function but stays
    strictly positive where naive 1 - tanh(x) underflows to exactly 0 for
    extreme error ratios (e.g. a zero MAE).
    """
    ratio = s_self / (s_other + cfg.epsilon)
    if cfg.ratio_variant == "ratio_minus_one":
        ratio -= 1.0
    x = cfg.alpha * max(ratio, 0.0)
    return 2.0 / (math.exp(min(2.0 * x, 700.0)) + 1.0)


def compute_coefficients(mae_a: float, mae_v: float,
                         cfg: ModulationConfig) -> tuple[float, float, float, float]:
    """Inverse-error scores and raw modulation coefficients (before penalty).

    Only the strictly better modality (higher score) is scaled below 1; ties
    leave both coefficients at exactly 1.
    """
    if mae_a < 0 or mae_v < 0:
        raise ContractError("MAEs must be non-negative")
    s_a, s_v = inverse_error_scores(mae_a, mae_v, cfg.epsilon)
    c_a = _damped_coefficient(s_a, s_v, cfg) if s_a > s_v else 1.0
    c_v = _damped_coefficient(s_v, s_a, cfg) if s_v > s_a else 1.0
    return s_a, s_v, c_a, c_v


def detect_conflict(mae_a: float, mae_v: float,
                    g_a: float, g_v: float) -> tuple[bool, bool]:
    """A modality conflicts when it leads on error yet pushes the larger norm."""
    if g_a < 0 or g_v < 0:
        raise ContractError("gradient norms must be non-negative")
    conflict_a = (mae_a < mae_v) and (g_a > g_v)
    conflict_v = (mae_v < mae_a) and (g_v > g_a)
    return conflict_a, conflict_v


def apply_conflict_penalty(c: float, conflict: bool, eta: float) -> float:
    """Multiply the coefficient by eta once if the conflict flag is set."""
    if c <= 0:
        raise ContractError(f"coefficient must be positive, got {c}")
    return c * eta if conflict else c


def _enhanced_coefficient(s_self: float, s_other: float, cfg: ModulationConfig) -> float:
    """Gap-fill amplification for the weaker modality, capped at ge_cap."""
    ratio = s_other / (s_self + cfg.epsilon) - 1.0
    return min(cfg.ge_cap, 1.0 + math.tanh(cfg.alpha * max(ratio, 0.0)))


def collect_grad_norms(params: ModelParams,
                       mode: str = "mean_of_norms") -> tuple[float, float]:
    """Gradient magnitudes of the two modality encoder groups."""
    return (grad_norm(params.group("enc_a"), mode),
            grad_norm(params.group("enc_v"), mode))


def scale_gradients(params: ModelParams, c_a: float, c_v: float) -> None:
    """Multiply enc_a gradients by c_a and enc_v gradients by c_v, in place."""
    for t in params.group("enc_a"):
        if t.grad is None:
            raise ContractError("scale_gradients before backward")
        t.grad *= c_a
    for t in params.group("enc_v"):
        if t.grad is None:
            raise ContractError("scale_gradients before backward")
        t.grad *= c_v


def imbalance_degree(g_a: float, g_v: float, eps: float) -> float:
    """Trace-only disparity summary |g_a - g_v| / (g_a + g_v + eps)."""
    return abs(g_a - g_v) / (g_a + g_v + eps)


def modulation_step(mae_a: float, mae_v: float, params: ModelParams,
                    epoch: int, cfg: ModulationConfig) -> ModulationState:
    """Run one full modulation pass; call after backward, before the update.

    Outside the half-open window [window_start, window_end) the gradients are
    left untouched and an inactive state with unit coefficients is returned
    (gradient norms are still read for the trace).
    """
    g_a, g_v = collect_grad_norms(params, cfg.grad_norm_mode)
    imb = imbalance_degree(g_a, g_v, cfg.epsilon)
    s_a, s_v = inverse_error_scores(mae_a, mae_v, cfg.epsilon)

    if not (cfg.window_start <= epoch < cfg.window_end):
        return ModulationState(mae_a, mae_v, s_a, s_v, 1.0, 1.0, g_a, g_v,
                               False, False, imb, active=False)

    s_a, s_v, c_a, c_v = compute_coefficients(mae_a, mae_v, cfg)
    conflict_a, conflict_v = detect_conflict(mae_a, mae_v, g_a, g_v)
    if cfg.cp_enabled:
        c_a = apply_conflict_penalty(c_a, conflict_a, cfg.eta)
        c_v = apply_conflict_penalty(c_v, conflict_v, cfg.eta)
    if cfg.ge_enabled:
        if s_a < s_v:
            c_a = _enhanced_coefficient(s_a, s_v, cfg)
        elif s_v < s_a:
            c_v = _enhanced_coefficient(s_v, s_a, cfg)
    scale_gradients(params, c_a, c_v)
    return ModulationState(mae_a, mae_v, s_a, s_v, c_a, c_v, g_a, g_v,
                           conflict_a, conflict_v, imb, active=True)


class MaeSmoother:
    """Exponential moving average of the per-batch unimodal MAE pair."""

    def __init__(self, decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        self.decay = decay
        self._a: float | None = None
        self._v: float | None = None

    def update(self, mae_a: float, mae_v: float) -> tuple[float, float]:
        if self.decay == 0.0:
            return mae_a, mae_v
        if self._a is None:
            self._a, self._v = mae_a, mae_v
        else:
            self._a = self.decay * self._a + (1.0 - self.decay) * mae_a
            self._v = self.decay * self._v + (1.0 - self.decay) * mae_v
        return self._a, self._v
