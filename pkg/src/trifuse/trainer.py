"""Training loop, optimizer, ablation grid, and trace emission.

Every step: min-max normalize the batch, run the full forward, build the
five-term objective (honoring the component toggles), backprop, run the
modulation pass, then apply a decoupled-weight-decay adaptive-moment update
under a linear warmup schedule. One trace record per step captures the loss
breakdown and the modulation state; metric records are appended per epoch.
Runs are bit-reproducible from the seed.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset, MultimodalBatch, batches, minmax_normalize
from .losses import (
    LossWeights,
    div_loss,
    recon_loss,
    stat_loss,
    task_loss,
    total_loss,
    uni_loss,
)
from .metrics import MetricReport, compute_metrics
from .model import ModelConfig, ModelParams, draw_noise, full_forward, init_params
from .modulation import (
    MaeSmoother,
    ModulationConfig,
    ModulationState,
    collect_grad_norms,
    imbalance_degree,
    inverse_error_scores,
    modulation_step,
)


class NanLossError(Exception):
    """A loss term went non-finite; training aborts at the offending step."""

    def __init__(self, step: int, term: str, value: float):
        self.step = step
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss at step {step}: term '{term}' = {value}")


@dataclass
class Toggles:
    """Component switches mirroring the ablation grid."""

    ame: bool = True
    gm: bool = True
    ge: bool = True
    cp: bool = True
    sl: bool = True


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 1
    task_loss_kind: str = "l1"
    recon_reduction: str = "mean"
    toggles: Toggles = field(default_factory=Toggles)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not self.toggles.gm and (self.toggles.cp or self.toggles.ge):
            warnings.warn(
                "toggles cp/ge have no effect while gm is off; they apply only "
                "inside the gradient-modulation step",
                stacklevel=2,
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {
            "toggles": Toggles,
            "loss_weights": LossWeights,
            "modulation": ModulationConfig,
            "model": ModelConfig,
        }
        kwargs = {}
        for key, value in d.items():
            if key in nested and isinstance(value, dict):
                kwargs[key] = nested[key](**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup: 0 at step 0, base_lr exactly at step == warmup_steps."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, tensors: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.tensors = tensors
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(t.data) for t in tensors]
        self._v = [np.zeros_like(t.data) for t in tensors]

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.tensors, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * update
            if self.weight_decay > 0:
                p.data -= lr * self.weight_decay * p.data


@dataclass
class RunArtifacts:
    trace: list[dict]
    metrics: list[dict]
    config: dict
    params: ModelParams
    out_dir: str | None = None
    checkpoint_path: str | None = None

    def trace_column(self, key: str) -> list:
        return [rec[key] for rec in self.trace]


def _effective_modulation(cfg: TrainConfig) -> ModulationConfig:
    """The toggles own the ge/cp switches inside the modulation config."""
    return dataclasses.replace(cfg.modulation,
                               ge_enabled=cfg.toggles.ge,
                               cp_enabled=cfg.toggles.cp)


def _check_dataset(cfg: TrainConfig, ds: Dataset, name: str) -> None:
    if len(ds) == 0:
        raise ValueError(f"{name} dataset is empty")
    if ds.seq_len != cfg.model.seq_len:
        raise ValueError(
            f"{name} dataset seq_len {ds.seq_len} != model seq_len {cfg.model.seq_len}"
        )
    dims = (ds.text.shape[2], ds.audio.shape[2], ds.visual.shape[2])
    want = (cfg.model.d_t, cfg.model.d_a, cfg.model.d_v)
    if dims != want:
        raise ValueError(f"{name} dataset dims {dims} != model dims {want}")


def _batch_tensors(batch: MultimodalBatch) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    a_n, v_n = minmax_normalize(batch.audio, batch.visual)
    return (Tensor(batch.text), Tensor(a_n), Tensor(v_n), Tensor(batch.labels))


def _loss_terms(cfg: TrainConfig, out, t, a, v, y):
    task = task_loss(out.y_hat, y, cfg.task_loss_kind)
    recon = recon_loss(a, out.a_hat, v, out.v_hat, cfg.recon_reduction)
    uni = uni_loss(out.y_uni_t, out.y_uni_a, out.y_uni_v, y, cfg.task_loss_kind)
    div = div_loss(out.var_a, out.var_v)
    stat = stat_loss(a, v, out.mu_a, out.var_a, out.mu_v, out.var_v)
    weights = cfg.loss_weights
    if not cfg.toggles.sl:
        # stat term stays in the trace but contributes zero gradient
        weights = dataclasses.replace(weights, lambda_stat=0.0)
    return total_loss(task, recon, uni, div, stat, weights)


def _assert_finite(breakdown, step: int) -> None:
    for term, value in breakdown.floats().items():
        if not math.isfinite(value):
            raise NanLossError(step, term, value)


def train(cfg: TrainConfig, train_ds: Dataset,
          val_ds: Dataset | None = None,
          test_ds: Dataset | None = None,
          out_dir: str | None = None) -> RunArtifacts:
    """Run the full training loop; returns traces, metrics and parameters.

    With ``out_dir`` set, writes trace.jsonl, metrics.jsonl, the resolved
    config snapshot, and a final checkpoint into that directory.
    """
    _check_dataset(cfg, train_ds, "train")
    for ds, name in ((val_ds, "val"), (test_ds, "test")):
        if ds is not None:
            _check_dataset(cfg, ds, name)

    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.model, rng)
    opt = AdamW(params.tensors(), weight_decay=cfg.weight_decay)
    mod_cfg = _effective_modulation(cfg)
    smoother = MaeSmoother(mod_cfg.mae_ema_decay)

    n_batches = math.ceil(len(train_ds) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    warmup_steps = math.ceil(cfg.warmup_ratio * total_steps)

    trace: list[dict] = []
    metric_records: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        shuffle_seed = np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0]
        for batch in batches(train_ds, cfg.batch_size, shuffle_seed=int(shuffle_seed)):
            t, a, v, y = _batch_tensors(batch)
            if cfg.toggles.ame:
                noise_a, noise_v = draw_noise(rng, len(batch), cfg.model)
            else:
                noise_a = noise_v = None
            with Tape():
                out = full_forward(
                    params, cfg.model, t, a, v,
                    noise_a=noise_a, noise_v=noise_v,
                    dropout_rng=rng, mask=batch.mask,
                    detach_var=not cfg.toggles.ame,
                )
                breakdown = _loss_terms(cfg, out, t, a, v, y)
                _assert_finite(breakdown, step)
                params.zero_grad()
                ad.backward(breakdown.total)

            mae_a = float(np.mean(np.abs(out.y_uni_a.data - y.data)))
            mae_v = float(np.mean(np.abs(out.y_uni_v.data - y.data)))
            mae_a, mae_v = smoother.update(mae_a, mae_v)
            if cfg.toggles.gm:
                state = modulation_step(mae_a, mae_v, params, epoch, mod_cfg)
            else:
                # no modulation: record an inactive state (norms read for the
                # trace only, gradients untouched)
                g_a, g_v = collect_grad_norms(params, mod_cfg.grad_norm_mode)
                s_a, s_v = inverse_error_scores(mae_a, mae_v, mod_cfg.epsilon)
                state = ModulationState(mae_a, mae_v, s_a, s_v, 1.0, 1.0,
                                        g_a, g_v, False, False,
                                        imbalance_degree(g_a, g_v, mod_cfg.epsilon),
                                        active=False)

            opt.step(warmup_lr(step, cfg.learning_rate, warmup_steps))

            rec = {"step": step, "epoch": epoch}
            rec.update(breakdown.floats())
            rec["div_entropy"] = -breakdown.div.item()
            rec.update(state.to_dict())
            trace.append(rec)
            step += 1

        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            for ds, name in ((train_ds, "train"), (val_ds, "val"), (test_ds, "test")):
                if ds is None:
                    continue
                report = evaluate(params, ds, cfg)
                metric_records.append({"epoch": epoch, "split": name, **report.to_dict()})

    config_snapshot = cfg.to_dict()
    artifacts = RunArtifacts(trace=trace, metrics=metric_records,
                             config=config_snapshot, params=params)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        artifacts.out_dir = out_dir
        with open(os.path.join(out_dir, "trace.jsonl"), "w") as f:
            for rec in trace:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "metrics.jsonl"), "w") as f:
            for rec in metric_records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "config.json"), "w") as f:
            json.dump(config_snapshot, f, sort_keys=True, indent=2)
        ckpt = os.path.join(out_dir, "checkpoint.json")
        params.save(ckpt)
        artifacts.checkpoint_path = ckpt
    return artifacts


def evaluate(params: ModelParams, ds: Dataset, cfg: TrainConfig) -> MetricReport:
    """Deterministic evaluation: dropout off, latents at their means."""
    preds = []
    for batch in batches(ds, cfg.batch_size):
        t, a, v, _ = _batch_tensors(batch)
        out = full_forward(params, cfg.model, t, a, v, mask=batch.mask)
        preds.append(out.y_hat.data)
    y_hat = np.concatenate(preds) if preds else np.zeros(0)
    return compute_metrics(y_hat, ds.labels)


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

# Toggle sets (ame, gm, ge, cp, sl) per ablation row.
ABLATION_ROWS: dict[str, Toggles] = {
    "A0": Toggles(False, False, False, False, False),   # baseline
    "A1": Toggles(True, False, False, False, False),    # +AME
    "A2": Toggles(True, True, False, False, False),     # +AME+GM
    "A3": Toggles(True, True, True, False, False),      # +AME+GM+GE
    "A4": Toggles(True, True, True, True, False),       # +AME+GM+GE+CP
    "A5": Toggles(True, True, True, False, True),       # +AME+GM+GE+SL
    "A6": Toggles(True, True, True, True, True),        # full model
    "B1": Toggles(True, False, False, False, False),    # AME only
    "B2": Toggles(False, True, False, False, False),    # GM only
    "B3": Toggles(False, False, False, False, True),    # SL only
    "B4": Toggles(False, True, True, False, False),     # GM+GE
    "B5": Toggles(False, True, False, True, False),     # GM+CP
    "C1": Toggles(False, True, True, True, False),      # GM+GE+CP
    "C2": Toggles(True, False, False, False, True),     # AME+SL
    "C3": Toggles(True, True, False, False, False),     # AME+GM
    "C4": Toggles(True, True, True, False, True),       # full - CP
    "C5": Toggles(True, True, False, True, True),       # full - GE
}

_ABLATION_METRICS = ("acc2", "f1", "mae", "corr")


def run_ablation(base_cfg: TrainConfig, rows: list[str], seeds: list[int],
                 train_ds: Dataset, val_ds: Dataset | None, test_ds: Dataset,
                 out_dir: str | None = None) -> list[dict]:
    """Run each ablation row over the shared seed set; mean +- std per metric.

    A run that aborts on a non-finite loss is recorded as diverged for that
    seed rather than failing the grid; no ordering between rows is asserted
    anywhere, only reported.
    """
    if len(seeds) < 1:
        raise ValueError("at least one seed required")
    table = []
    for row in rows:
        if row not in ABLATION_ROWS:
            raise ValueError(f"unknown ablation row '{row}' "
                             f"(known: {', '.join(sorted(ABLATION_ROWS))})")
        toggles = ABLATION_ROWS[row]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # cp/ge-without-gm rows are intentional
            per_seed: list[MetricReport | None] = []
            diverged: list[dict] = []
            for seed in seeds:
                cfg = dataclasses.replace(base_cfg, seed=seed,
                                          toggles=dataclasses.replace(toggles))
                try:
                    artifacts = train(cfg, train_ds, val_ds, test_ds)
                except NanLossError as e:
                    per_seed.append(None)
                    diverged.append({"seed": seed, "step": e.step, "term": e.term})
                    continue
                report = evaluate(artifacts.params, test_ds, cfg)
                per_seed.append(report)

        entry: dict = {
            "row": row,
            "toggles": dataclasses.asdict(toggles),
            "seeds": list(seeds),
            "n_diverged": len(diverged),
            "diverged": diverged,
        }
        finished = [r for r in per_seed if r is not None]
        for metric in _ABLATION_METRICS:
            values = [getattr(r, metric) for r in finished]
            entry[f"{metric}_mean"] = float(np.mean(values)) if values else None
            entry[f"{metric}_std"] = float(np.std(values)) if values else None
        table.append(entry)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.json"), "w") as f:
            json.dump(table, f, sort_keys=True, indent=2)
        _write_ablation_csv(table, os.path.join(out_dir, "ablation.csv"))
    return table


def _write_ablation_csv(table: list[dict], path: str) -> None:
    import csv

    cols = ["row", "seeds", "n_diverged"]
    for metric in _ABLATION_METRICS:
        cols += [f"{metric}_mean", f"{metric}_std"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for entry in table:
            writer.writerow([
                entry["row"],
                " ".join(str(s) for s in entry["seeds"]),
                entry["n_diverged"],
                *[entry[f"{m}_{s}"] for m in _ABLATION_METRICS for s in ("mean", "std")],
            ])
