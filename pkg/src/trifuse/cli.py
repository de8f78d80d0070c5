"""Command-line interface: data generation, training, evaluation, ablation,
gradient checking, and trace export.

Exit statuses: 0 success, 1 usage error, 2 runtime error (non-finite loss,
schema violation, failed gradient check). Every run writes its resolved
configuration into the output directory, and nothing is written outside it.
The default output directory comes from $TRIFUSE_OUT_DIR, falling back to
./runs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .data import (
    DataError,
    SyntheticConfig,
    gen_synthetic,
    load_features,
    minmax_normalize,
    save_features,
    train_val_test_split,
)
from .losses import total_loss
from .metrics import MetricError
from .model import ModelParams, draw_noise, full_forward, init_params
from .trainer import (
    ABLATION_ROWS,
    NanLossError,
    TrainConfig,
    _loss_terms,
    evaluate,
    run_ablation,
    train,
)

OUT_DIR_ENV = "TRIFUSE_OUT_DIR"


class _Parser(argparse.ArgumentParser):
    """argparse with the documented exit-status contract (usage errors -> 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _default_out_dir() -> str:
    return os.environ.get(OUT_DIR_ENV, "runs")


# ---------------------------------------------------------------------------
# config resolution: defaults <- config file <- dedicated flags <- --set pairs
# ---------------------------------------------------------------------------

# flag name -> dotted config path (flags default to None = "not provided")
_FLAG_PATHS = {
    "seed": "seed",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "warmup_ratio": "warmup_ratio",
    "weight_decay": "weight_decay",
    "eval_every": "eval_every",
    "task_loss": "task_loss_kind",
    "recon_reduction": "recon_reduction",
    "alpha": "modulation.alpha",
    "eta": "modulation.eta",
    "window_start": "modulation.window_start",
    "window_end": "modulation.window_end",
    "ratio_variant": "modulation.ratio_variant",
    "ge_cap": "modulation.ge_cap",
    "grad_norm_mode": "modulation.grad_norm_mode",
    "mae_ema": "modulation.mae_ema_decay",
    "lambda_recon": "loss_weights.lambda_recon",
    "lambda_uni": "loss_weights.lambda_uni",
    "lambda_div": "loss_weights.lambda_div",
    "lambda_stat": "loss_weights.lambda_stat",
    "beta": "model.beta",
    "fusion_kind": "model.fusion_kind",
    "d_t": "model.d_t",
    "d_a": "model.d_a",
    "d_v": "model.d_v",
    "d_latent": "model.d_latent",
    "d_fusion": "model.d_fusion",
    "seq_len": "model.seq_len",
    "dropout_enc": "model.dropout_enc",
    "dropout_head": "model.dropout_head",
    "ame": "toggles.ame",
    "gm": "toggles.gm",
    "ge": "toggles.ge",
    "cp": "toggles.cp",
    "sl": "toggles.sl",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH",
                   help="JSON config file mirroring the training config")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE",
                   help="dotted-path override, e.g. modulation.eta=0.25; applied last")
    g = p.add_argument_group("training")
    g.add_argument("--seed", type=int, default=None, help="run seed (default: 0)")
    g.add_argument("--epochs", type=int, default=None, help="training epochs (default: 10)")
    g.add_argument("--batch-size", type=int, default=None, help="mini-batch size (default: 8)")
    g.add_argument("--lr", type=float, default=None, help="peak learning rate (default: 1e-3)")
    g.add_argument("--warmup-ratio", type=float, default=None,
                   help="fraction of steps under linear warmup (default: 0.1)")
    g.add_argument("--weight-decay", type=float, default=None,
                   help="decoupled weight decay (default: 0.01)")
    g.add_argument("--eval-every", type=int, default=None,
                   help="epochs between metric evaluations (default: 1)")
    g.add_argument("--task-loss", choices=["l1", "l2"], default=None,
                   help="task loss form (default: l1)")
    g.add_argument("--recon-reduction", choices=["mean", "sum"], default=None,
                   help="reconstruction reduction (default: mean)")
    m = p.add_argument_group("modulation")
    m.add_argument("--alpha", type=float, default=None,
                   help="modulation sharpness alpha (default: 1.0)")
    m.add_argument("--eta", type=float, default=None,
                   help="conflict penalty factor eta (default: 0.5)")
    m.add_argument("--window-start", type=int, default=None,
                   help="first modulated epoch (default: 0)")
    m.add_argument("--window-end", type=int, default=None,
                   help="first un-modulated epoch (default: 25)")
    m.add_argument("--ratio-variant", choices=["as_written", "ratio_minus_one"], default=None,
                   help="score-ratio form inside the coefficient (default: as_written)")
    m.add_argument("--ge-cap", type=float, default=None,
                   help="cap for the enhancement coefficient (default: 2.0)")
    m.add_argument("--grad-norm-mode", choices=["mean_of_norms", "norm_of_all"], default=None,
                   help="per-group gradient norm definition (default: mean_of_norms)")
    m.add_argument("--mae-ema", type=float, default=None,
                   help="EMA decay for the unimodal MAEs, 0 disables (default: 0)")
    w = p.add_argument_group("loss weights")
    w.add_argument("--lambda-recon", type=float, default=None,
                   help="reconstruction weight (default: 1.0)")
    w.add_argument("--lambda-uni", type=float, default=None,
                   help="unimodal weight (default: 0.5)")
    w.add_argument("--lambda-div", type=float, default=None,
                   help="diversity weight (default: 0.1)")
    w.add_argument("--lambda-stat", type=float, default=None,
                   help="statistical weight (default: 0.1)")
    md = p.add_argument_group("model")
    md.add_argument("--beta", type=float, default=None,
                    help="residual injection weight beta (default: 1.0)")
    md.add_argument("--fusion-kind", choices=["gated", "concat-mlp"], default=None,
                    help="fusion block (default: gated)")
    md.add_argument("--d-t", type=int, default=None, help="text feature dim (default: 12)")
    md.add_argument("--d-a", type=int, default=None, help="acoustic feature dim (default: 8)")
    md.add_argument("--d-v", type=int, default=None, help="visual feature dim (default: 6)")
    md.add_argument("--d-latent", type=int, default=None, help="latent dim (default: 16)")
    md.add_argument("--d-fusion", type=int, default=None, help="fusion dim (default: 32)")
    md.add_argument("--seq-len", type=int, default=None, help="sequence length (default: 8)")
    md.add_argument("--dropout-enc", type=float, default=None,
                    help="encoder dropout (default: 0.3)")
    md.add_argument("--dropout-head", type=float, default=None,
                    help="classifier dropout (default: 0.5)")
    t = p.add_argument_group("component toggles")
    for name, desc in (("ame", "encoder sampling"), ("gm", "gradient modulation"),
                       ("ge", "gradient enhancement"), ("cp", "conflict penalty"),
                       ("sl", "statistical loss")):
        t.add_argument(f"--{name}", action=argparse.BooleanOptionalAction, default=None,
                       help=f"toggle {desc} (default: on)")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    d = p.add_argument_group("data")
    d.add_argument("--data", metavar="PATH", default=None,
                   help="feature file for training (default: synthetic data)")
    d.add_argument("--val-data", metavar="PATH", default=None, help="validation feature file")
    d.add_argument("--test-data", metavar="PATH", default=None, help="test feature file")
    d.add_argument("--synth-n", type=int, default=2000,
                   help="synthetic sample count when no --data is given")
    d.add_argument("--synth-seed", type=int, default=0, help="synthetic data seed")
    d.add_argument("--w-t", type=float, default=1.0, help="text informativeness weight")
    d.add_argument("--w-a", type=float, default=0.4, help="acoustic informativeness weight")
    d.add_argument("--w-v", type=float, default=0.2, help="visual informativeness weight")
    d.add_argument("--noise-std", type=float, default=0.1, help="label noise std")


def _set_dotted(d: dict, path: str, value) -> None:
    keys = path.split(".")
    cur = d
    for k in keys[:-1]:
        if k not in cur or not isinstance(cur[k], dict):
            raise ValueError(f"unknown config path '{path}'")
        cur = cur[k]
    if keys[-1] not in cur:
        raise ValueError(f"unknown config path '{path}'")
    cur[keys[-1]] = value


def _deep_merge(base: dict, overlay: dict, prefix="") -> None:
    for k, v in overlay.items():
        if k not in base:
            raise ValueError(f"unknown config key '{prefix}{k}'")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _deep_merge(base[k], v, prefix=f"{prefix}{k}.")
        else:
            base[k] = v


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig().to_dict()
    if getattr(args, "config", None):
        with open(args.config) as f:
            file_cfg = json.load(f)
        if not isinstance(file_cfg, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
        _deep_merge(cfg, file_cfg)
    for flag, path in _FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            _set_dotted(cfg, path, value)
    for pair in getattr(args, "overrides", []):
        if "=" not in pair:
            raise ValueError(f"--set expects KEY=VALUE, got '{pair}'")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_dotted(cfg, key.strip(), value)
    return TrainConfig.from_dict(cfg)


def _load_splits(args: argparse.Namespace, cfg: TrainConfig):
    if args.data:
        tr = load_features(args.data, cfg.model.seq_len, split="train")
        va = load_features(args.val_data, cfg.model.seq_len, "val") if args.val_data else None
        te = load_features(args.test_data, cfg.model.seq_len, "test") if args.test_data else None
        return tr, va, te
    synth = SyntheticConfig(
        n_samples=args.synth_n, seq_len=cfg.model.seq_len,
        d_t=cfg.model.d_t, d_a=cfg.model.d_a, d_v=cfg.model.d_v,
        w_t=args.w_t, w_a=args.w_a, w_v=args.w_v,
        noise_std=args.noise_std, seed=args.synth_seed,
    )
    return train_val_test_split(gen_synthetic(synth), seed=args.synth_seed)


def _write_json(out_dir: str, name: str, payload) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    synth = SyntheticConfig(
        n_samples=args.n, seq_len=args.seq_len,
        d_t=args.d_t, d_a=args.d_a, d_v=args.d_v,
        w_t=args.w_t, w_a=args.w_a, w_v=args.w_v,
        noise_std=args.noise_std, seed=args.seed,
    )
    ds = gen_synthetic(synth)
    out = args.out or os.path.join(args.out_dir, "features.jsonl")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_features(ds, out)
    _write_json(args.out_dir, "gen_data_config.json", dataclasses.asdict(synth))
    print(f"wrote {len(ds)} records to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    tr, va, te = _load_splits(args, cfg)
    artifacts = train(cfg, tr, va, te, out_dir=args.out_dir)
    last = [m for m in artifacts.metrics if m["split"] == ("test" if te is not None else "train")]
    print(f"trained {cfg.epochs} epochs ({len(artifacts.trace)} steps); "
          f"artifacts in {args.out_dir}")
    if last:
        print(json.dumps(last[-1], sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    params = ModelParams.load(args.checkpoint)
    if args.data:
        ds = load_features(args.data, cfg.model.seq_len, split="eval")
    else:
        _, _, ds = _load_splits(args, cfg)
    report = evaluate(params, ds, cfg)
    payload = {"checkpoint": args.checkpoint, "split": ds.split, **report.to_dict()}
    _write_json(args.out_dir, "eval.json", payload)
    _write_json(args.out_dir, "eval_config.json", cfg.to_dict())
    print(json.dumps(payload, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    tr, va, te = _load_splits(args, cfg)
    if te is None:
        raise ValueError("ablation needs a test split (synthetic data provides one)")
    table = run_ablation(cfg, rows, seeds, tr, va, te, out_dir=args.out_dir)
    _write_json(args.out_dir, "ablation_config.json", cfg.to_dict())
    for row in table:
        mae = row["mae_mean"]
        mae_txt = "diverged" if mae is None else f"mae {mae:.4f} ± {row['mae_std']:.4f}"
        print(f"{row['row']}: {mae_txt} ({row['n_diverged']}/{len(seeds)} diverged)")
    print(f"table in {args.out_dir}/ablation.json")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.model, rng)
    batch = 2
    t = Tensor(rng.normal(size=(batch, cfg.model.seq_len, cfg.model.d_t)))
    a_raw = rng.normal(size=(batch, cfg.model.seq_len, cfg.model.d_a))
    v_raw = rng.normal(size=(batch, cfg.model.seq_len, cfg.model.d_v))
    a_n, v_n = minmax_normalize(a_raw, v_raw)
    a, v = Tensor(a_n), Tensor(v_n)
    y = Tensor(rng.uniform(-3, 3, size=batch))
    noise_a, noise_v = draw_noise(rng, batch, cfg.model)  # frozen for the closure

    def closure():
        out = full_forward(params, cfg.model, t, a, v,
                           noise_a=noise_a, noise_v=noise_v)
        return _loss_terms(cfg, out, t, a, v, y).total

    max_coords = None if args.sample == 0 else args.sample
    report = finite_diff_check(closure, dict(params.items()), h=args.h, tol=args.tol,
                               rng=np.random.default_rng(cfg.seed),
                               max_coords_per_param=max_coords)
    payload = {
        "tol": report.tol, "h": args.h, "max_rel_err": report.max_rel_err,
        "n_coords": report.n_coords, "flagged": report.flagged,
        "per_param": report.per_param, "passed": report.passed,
    }
    _write_json(args.out_dir, "gradcheck.json", payload)
    _write_json(args.out_dir, "gradcheck_config.json", cfg.to_dict())
    print(f"gradcheck: max rel err {report.max_rel_err:.3e} over {report.n_coords} "
          f"coordinates; {'PASS' if report.passed else 'FAIL'}")
    if not report.passed:
        print("flagged parameters: " + ", ".join(report.flagged), file=sys.stderr)
        return 2
    return 0


def _cmd_export_traces(args) -> int:
    run_dir = args.run_dir or args.out_dir
    trace_path = os.path.join(run_dir, "trace.jsonl")
    if not os.path.exists(trace_path):
        raise DataError(f"no trace.jsonl in {run_dir}")
    records = []
    with open(trace_path) as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    if not records:
        raise DataError(f"{trace_path} is empty")
    out = args.out or os.path.join(run_dir, "traces.csv")
    cols = sorted(records[0].keys())
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for rec in records:
            writer.writerow([rec.get(c, "") for c in cols])
    print(f"wrote {len(records)} rows to {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="trifuse",
                     description="Desk-scale trimodal training workbench")
    parser.add_argument("--out-dir", default=_default_out_dir(),
                        help=f"output directory (default: ${OUT_DIR_ENV} or ./runs)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic feature file")
    p.add_argument("--out", default=None, help="output feature file (default: OUT_DIR/features.jsonl)")
    p.add_argument("--n", type=int, default=2000, help="sample count")
    p.add_argument("--seq-len", type=int, default=8, help="sequence length")
    p.add_argument("--d-t", type=int, default=12, help="text feature dim")
    p.add_argument("--d-a", type=int, default=8, help="acoustic feature dim")
    p.add_argument("--d-v", type=int, default=6, help="visual feature dim")
    p.add_argument("--w-t", type=float, default=1.0, help="text informativeness weight")
    p.add_argument("--w-a", type=float, default=0.4, help="acoustic informativeness weight")
    p.add_argument("--w-v", type=float, default=0.2, help="visual informativeness weight")
    p.add_argument("--noise-std", type=float, default=0.1, help="label noise std")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model and emit traces")
    _add_config_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file from a training run")
    _add_config_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run ablation rows over a seed set")
    p.add_argument("--rows", default="A0,A6",
                   help="comma-separated row ids among " + ",".join(sorted(ABLATION_ROWS)))
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    _add_config_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--tol", type=float, default=1e-4, help="max allowed relative error")
    p.add_argument("--h", type=float, default=1e-5, help="central difference step")
    p.add_argument("--sample", type=int, default=5,
                   help="coordinates checked per parameter tensor; 0 = all")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("export-traces", help="flatten trace.jsonl into a tidy CSV")
    p.add_argument("--run-dir", default=None, help="run directory (default: OUT_DIR)")
    p.add_argument("--out", default=None, help="CSV path (default: RUN_DIR/traces.csv)")
    p.set_defaults(func=_cmd_export_traces)

    return parser


RUNTIME_ERRORS = (NanLossError, DataError, MetricError, ad.AutodiffError,
                  ValueError, OSError, json.JSONDecodeError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RUNTIME_ERRORS as e:
        print(f"trifuse {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
