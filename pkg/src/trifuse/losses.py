"""The five training loss terms and their weighted total.

All functions are pure maps from tensors to scalar tensors and stay attached
to the active tape, so the total can be backpropagated directly. The diversity
term is the negative mean Gaussian entropy of the encoder variances:
minimizing it pushes entropy up, which is the anti-redundancy pressure the
trace logger reports as a rising `div_entropy` curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .model import EPS_SMALL

TASK_LOSS_KINDS = ("l1", "l2")
RECON_REDUCTIONS = ("mean", "sum")

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LossWeights:
    lambda_recon: float = 1.0
    lambda_uni: float = 0.5
    lambda_div: float = 0.1
    lambda_stat: float = 0.1

    def __post_init__(self):
        for name in ("lambda_recon", "lambda_uni", "lambda_div", "lambda_stat"):
            w = getattr(self, name)
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {w}")


@dataclass
class LossBreakdown:
    """Scalar tensors for each term plus the weighted total."""

    task: Tensor
    recon: Tensor
    uni: Tensor
    div: Tensor
    stat: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {
            "task": self.task.item(),
            "recon": self.recon.item(),
            "uni": self.uni.item(),
            "div": self.div.item(),
            "stat": self.stat.item(),
            "total": self.total.item(),
        }


def task_loss(y_hat: Tensor, y: Tensor, kind: str = "l1") -> Tensor:
    """Regression error; mean absolute by default, mean squared behind `l2`."""
    if y_hat.shape != y.shape:
        raise ad.ShapeMismatch("task_loss", (y_hat.shape, y.shape))
    if y.size == 0:
        raise ContractError("task_loss on an empty batch")
    if kind == "l1":
        return ad.mean(ad.absolute(y_hat - y))
    if kind == "l2":
        return ad.squared_error(y_hat, y)
    raise ContractError(f"unknown task loss kind '{kind}'")


def recon_loss(a: Tensor, a_hat: Tensor, v: Tensor, v_hat: Tensor,
               reduction: str = "mean") -> Tensor:
    """Half the summed reconstruction errors of both modalities.

    `mean` reduces each squared-error block per element so the term's scale
    is independent of batch, sequence and feature sizes; `sum` restores the
    raw squared norm.
    """
    if reduction not in RECON_REDUCTIONS:
        raise ContractError(f"unknown recon reduction '{reduction}'")
    ea = ad.squared_error(a, a_hat, reduction=reduction)
    ev = ad.squared_error(v, v_hat, reduction=reduction)
    return ad.mul(0.5, ea + ev)


def uni_loss(y_uni_t: Tensor, y_uni_a: Tensor, y_uni_v: Tensor, y: Tensor,
             kind: str = "l1") -> Tensor:
    """Mean of the three unimodal heads' task losses."""
    lt = task_loss(y_uni_t, y, kind)
    la = task_loss(y_uni_a, y, kind)
    lv = task_loss(y_uni_v, y, kind)
    return ad.mul(1.0 / 3.0, lt + la + lv)


def gaussian_entropy(var: Tensor) -> Tensor:
    """Mean elementwise Gaussian entropy 0.5*log(2*pi*e*(var + eps))."""
    return ad.mean(ad.mul(0.5, ad.log(ad.mul(2.0 * math.pi * math.e, var + EPS_SMALL))))


def div_loss(var_a: Tensor, var_v: Tensor) -> Tensor:
    """Negative mean Gaussian entropy of the two encoders' variances."""
    return ad.mul(-0.5, gaussian_entropy(var_a) + gaussian_entropy(var_v))


def stat_loss(a: Tensor, v: Tensor, mu_a: Tensor, var_a: Tensor,
              mu_v: Tensor, var_v: Tensor) -> Tensor:
    """Moment-matching between predicted and empirical per-position statistics.

    For every (batch, position): the empirical mean/variance are taken over
    the input feature axis (population variance), the predicted mean/variance
    are the feature-axis averages of the encoder outputs, and each of the four
    pairings contributes a mean-squared error over the B x L grid.
    """
    for x, name in ((a, "acoustic"), (v, "visual")):
        if x.shape[-1] < 1:
            raise ContractError(f"stat_loss: {name} feature axis is empty")

    def pair(x, mu, var):
        emp_mu = ad.mean(x, axis=-1)
        emp_var = ad.variance(x, axis=-1)
        pred_mu = ad.mean(mu, axis=-1)
        pred_var = ad.mean(var, axis=-1)
        return ad.squared_error(pred_mu, emp_mu) + ad.squared_error(pred_var, emp_var)

    return ad.mul(0.25, pair(a, mu_a, var_a) + pair(v, mu_v, var_v))


def total_loss(task: Tensor, recon: Tensor, uni: Tensor, div: Tensor,
               stat: Tensor, w: LossWeights) -> LossBreakdown:
    """Weighted sum of the five terms."""
    total = (task
             + ad.mul(w.lambda_recon, recon)
             + ad.mul(w.lambda_uni, uni)
             + ad.mul(w.lambda_div, div)
             + ad.mul(w.lambda_stat, stat))
    return LossBreakdown(task=task, recon=recon, uni=uni, div=div, stat=stat, total=total)
