"""Operator surface: generate, train, eval, gradcheck, infer.

Every command is deterministic under a fixed seed.  Exit codes: 0 success,
1 usage error, 2 validation failure (bad config, corrupt file, mismatched
artifacts), 3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from . import tensor as T
from .config import (QUERY_MODES, ROAD_CONVS, ROAD_WEIGHTINGS, VARIANTS,
                     ConfigError, RunConfig, load_config_file)
from .datagen import Dataset, build_dataset, read_dataset, write_dataset
from .gradcheck import run_suite
from .model import FlowModel, build_variant, load_checkpoint, mape_loss, save_checkpoint
from .road import prepare_road_input
from .tensor import Adam, TensorFormatError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

_SHUFFLE_STREAM_BASE = 100


class UsageError(Exception):
    pass


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss; CLI exit code 3."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# Training and evaluation drivers (also used directly by the test suite).

@dataclass
class TrainResult:
    checkpoint: Path
    best_val_mape: float
    steps: int
    losses: list
    log_lines: list


def _needs_external(variant: str) -> bool:
    return variant == "full"


def _needs_road(variant: str) -> bool:
    return variant in ("short-road", "short-long-road", "full")


def _sync_config_to_dataset(cfg: RunConfig, ds: Dataset) -> None:
    """Adopt grid and calendar settings from the dataset manifest."""
    cfg.i_c, cfg.j_c = ds.coarse.shape[1], ds.coarse.shape[2]
    cfg.n = ds.n
    cfg.intervals_per_day = ds.intervals_per_day
    cfg.interval_minutes = ds.interval_minutes
    cfg.start_dow = ds.start_dow
    if (cfg.i_f, cfg.j_f) != (ds.fine.shape[1], ds.fine.shape[2]):
        raise ConfigError("dataset fine extents disagree with its block factor")
    cfg.validate()


def _quantized_state(model: FlowModel):
    """Round parameters and running stats through float32, returning originals.

    Validation runs on the rounded copies so the reported score is exactly
    what a reloaded checkpoint reproduces.
    """
    saved = []
    for _, param in model.param_items():
        saved.append(param.data)
        param.data = param.data.astype(np.float32).astype(np.float64)
    for _, bn in model.batchnorms():
        saved.append((bn, bn.running_mean, bn.running_var))
        bn.running_mean = bn.running_mean.astype(np.float32).astype(np.float64)
        bn.running_var = bn.running_var.astype(np.float32).astype(np.float64)
    return saved


def _restore_state(model: FlowModel, saved) -> None:
    pos = 0
    for _, param in model.param_items():
        param.data = saved[pos]
        pos += 1
    for _ in model.batchnorms():
        bn, mean, var = saved[pos]
        bn.running_mean, bn.running_var = mean, var
        pos += 1


def predict_batched(model: FlowModel, ds: Dataset, indices, norm: float,
                    road_input, batch_size: int) -> np.ndarray:
    """Eval-mode fine-map predictions, denormalized, over the given samples."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.size,) + ds.fine.shape[1:])
    external = ds.external if _needs_external(model.variant) else None
    with T.no_grad():
        for lo in range(0, indices.size, batch_size):
            chunk = indices[lo:lo + batch_size]
            ext = external[chunk] if external is not None else None
            pred = model.forward(ds.coarse[chunk] / norm, ext, road_input,
                                 train=False)
            out[lo:lo + chunk.size] = pred.data * norm
    return out


def run_training(cfg: RunConfig, ds: Dataset, out_dir, *,
                 stop_below: float | None = None,
                 verbose: bool = False) -> TrainResult:
    """Adam training with plateau lr halving and best-validation checkpointing.

    Inputs and targets are normalized by the training-split coarse maximum;
    the constant is stored in the checkpoint manifest so inference is
    self-contained.  Optimizer steps across epochs are capped by
    ``cfg.max_steps`` (0 means no cap); ``stop_below`` ends training early
    once a step loss falls under the threshold.
    """
    cfg.validate()
    if (cfg.i_c, cfg.j_c) != ds.coarse.shape[1:3] or cfg.n != ds.n:
        raise ConfigError("config grid does not match the dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_lo, train_hi = ds.split_range("train")
    val_idx = ds.split_indices("val")
    if train_hi <= train_lo or val_idx.size == 0:
        raise ConfigError("dataset needs nonempty train and val splits")
    # One constant scales both coarse inputs and fine targets; the fine max
    # puts targets in [0, 1] and keeps coarse inputs bounded by n^2.
    norm = float(ds.fine[train_lo:train_hi].max())
    if norm <= 0:
        raise ConfigError("training split carries no flow; cannot normalize")

    road_input = None
    if _needs_road(cfg.variant):
        road_input = prepare_road_input(ds.road, ds.coarse[train_lo:train_hi],
                                        cfg.i_f, cfg.j_f, cfg.road_weighting)
    model = build_variant(cfg)
    opt = Adam(model.parameters(), cfg.lr)
    external = ds.external if _needs_external(cfg.variant) else None

    losses: list[float] = []
    log_lines: list[str] = []
    best_val = np.inf
    stale_epochs = 0
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        order = T.make_rng(cfg.seed, _SHUFFLE_STREAM_BASE + epoch).permutation(
            np.arange(train_lo, train_hi))
        for lo in range(0, order.size, cfg.batch_size):
            chunk = order[lo:lo + cfg.batch_size]
            ext = external[chunk] if external is not None else None
            pred = model.forward(ds.coarse[chunk] / norm, ext, road_input,
                                 train=True)
            loss = mape_loss(pred, ds.fine[chunk] / norm, cfg.eps_loss)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericFailure(
                    f"non-finite loss {value} at step {step + 1} "
                    f"(epoch {epoch + 1}); try a lower learning rate")
            T.backward(loss)
            opt.step()
            step += 1
            losses.append(value)
            log_lines.append(f"step={step} epoch={epoch + 1} loss={value:.12g}")
            if stop_below is not None and value < stop_below:
                done = True
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
            if done:
                break

        saved = _quantized_state(model)
        val_pred = predict_batched(model, ds, val_idx, norm, road_input,
                                   cfg.batch_size)
        val_mape = metrics.mape_citywide(val_pred, ds.fine[val_idx])
        if not np.isfinite(val_mape):
            raise NumericFailure(f"non-finite validation score at epoch {epoch + 1}")
        log_lines.append(f"epoch={epoch + 1} val_mape={val_mape:.12g} "
                         f"lr={opt.lr:.12g}")
        if verbose:
            print(log_lines[-1])
        if val_mape < best_val:
            best_val = val_mape
            stale_epochs = 0
            manifest = {
                "variant": cfg.variant, "channels": cfg.channels,
                "radius": cfg.radius, "pool": cfg.pool,
                "i_c": cfg.i_c, "j_c": cfg.j_c, "n": cfg.n,
                "road_conv": cfg.road_conv,
                "road_weighting": cfg.road_weighting,
                "query_mode": cfg.query_mode,
                "intervals_per_day": cfg.intervals_per_day,
                "interval_minutes": cfg.interval_minutes,
                "start_dow": cfg.start_dow,
                "seed": cfg.seed, "norm": repr(norm),
                "epoch": epoch + 1, "val_mape": f"{val_mape:.12g}",
            }
            save_checkpoint(out_dir, model, manifest, road_input)
        else:
            stale_epochs += 1
            if stale_epochs >= cfg.lr_patience:
                opt.lr *= cfg.lr_decay
                stale_epochs = 0
                log_lines.append(f"epoch={epoch + 1} lr_drop={opt.lr:.12g}")
        _restore_state(model, saved)
        if done:
            break

    (out_dir / "train_log.txt").write_text(
        "".join(line + "\n" for line in log_lines))
    return TrainResult(checkpoint=out_dir, best_val_mape=float(best_val),
                       steps=step, losses=losses, log_lines=log_lines)


def evaluate_checkpoint(ckpt_dir, ds: Dataset, split: str = "test",
                        batch_size: int = 8):
    """Load a checkpoint and score one dataset split; returns (report, preds)."""
    model, manifest, road_input = load_checkpoint(ckpt_dir)
    if (int(manifest["i_c"]), int(manifest["j_c"])) != ds.coarse.shape[1:3] \
            or int(manifest["n"]) != ds.n:
        raise ConfigError("checkpoint grid does not match the dataset")
    norm = float(manifest["norm"])
    idx = ds.split_indices(split)
    preds = predict_batched(model, ds, idx, norm, road_input, batch_size)
    return _report_for(preds, ds, idx), preds


def evaluate_baseline(ds: Dataset, split: str = "test"):
    """Score the historical-average predictor on one split."""
    lo, hi = ds.split_range("train")
    mean_map = metrics.ha_baseline(ds.fine[lo:hi])
    idx = ds.split_indices(split)
    preds = np.broadcast_to(mean_map, (idx.size,) + mean_map.shape).copy()
    return _report_for(preds, ds, idx), preds


def _report_for(preds, ds: Dataset, idx) -> metrics.EvalReport:
    lo, hi = ds.split_range("train")
    heavy = metrics.heavy_region_mask(ds.fine[lo:hi])
    return metrics.evaluate(preds, ds.fine[idx], idx, heavy_mask=heavy,
                            intervals_per_day=ds.intervals_per_day,
                            interval_minutes=ds.interval_minutes,
                            start_dow=ds.start_dow)


# --------------------------------------------------------------------------
# Command handlers.

def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "paper_scale", False):
        cfg.apply_paper_scale()
    for name in ("seed", "variant", "road_conv", "road_weighting",
                 "query_mode", "lr", "epochs", "batch_size", "max_steps",
                 "channels", "radius", "days"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _load_cfg(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, cfg)
    return _apply_overrides(cfg, args)


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    cfg.validate()
    ds = build_dataset(cfg)
    write_dataset(args.out, ds)
    print(f"wrote {ds.count} samples ({ds.fine.shape[1]}x{ds.fine.shape[2]} fine, "
          f"{ds.coarse.shape[1]}x{ds.coarse.shape[2]} coarse) to {args.out}")
    for name in ("train", "val", "test"):
        lo, hi = ds.split_range(name)
        print(f"split {name}: samples [{lo}, {hi})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    cfg.validate()
    ds = read_dataset(args.data)
    _sync_config_to_dataset(cfg, ds)
    result = run_training(cfg, ds, args.out, verbose=True)
    print(f"best val_mape={result.best_val_mape:.6g} after {result.steps} steps; "
          f"checkpoint at {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.baseline is None):
        raise UsageError("pass exactly one of --checkpoint or --baseline")
    ds = read_dataset(args.data)
    if args.baseline is not None:
        report, preds = evaluate_baseline(ds, args.split)
    else:
        report, preds = evaluate_checkpoint(args.checkpoint, ds, args.split,
                                            args.batch_size or 8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.text())
    idx = ds.split_indices(args.split)
    T.write_tensor(out / "residual.rtfm", preds - ds.fine[idx])
    print(report.text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed if args.seed is not None else 0)
    for r in results:
        print(r.line())
    if all(r.passed for r in results):
        print("gradient audit: PASS")
        return EXIT_OK
    print("gradient audit: FAIL", file=sys.stderr)
    return EXIT_VALIDATION


def cmd_infer(args) -> int:
    model, manifest, road_input = load_checkpoint(args.checkpoint)
    coarse = T.read_tensor(args.coarse)
    single = coarse.ndim == 3
    if single:
        coarse = coarse[None]
    external = None
    if args.external is not None:
        external = T.read_tensor(args.external)
        if external.ndim == 1:
            external = external[None]
    norm = float(manifest["norm"])
    with T.no_grad():
        pred = model.forward(coarse / norm, external, road_input, train=False)
    fine = pred.data * norm
    if args.clamp_nonneg:
        fine = np.maximum(fine, 0.0)
    T.write_tensor(args.out, fine[0] if single else fine)
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument wiring.

def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="roadflow",
                     description="Coarse-to-fine traffic flow inference "
                                 "guided by a road-network raster.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a dataset directory")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--days", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--road-conv", dest="road_conv", choices=ROAD_CONVS,
                   default=None)
    p.add_argument("--road-weighting", dest="road_weighting",
                   choices=ROAD_WEIGHTINGS, default=None)
    p.add_argument("--query", dest="query_mode", choices=QUERY_MODES,
                   default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--radius", type=int, default=None)
    p.add_argument("--paper-scale", dest="paper_scale", action="store_true",
                   help="use full-scale width, radius and learning rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or baseline on a split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--baseline", choices=("ha",), default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("infer", help="upscale one coarse map file")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--coarse", required=True, help="coarse map tensor file")
    p.add_argument("--external", default=None, help="external factor tensor file")
    p.add_argument("--out", required=True, help="output fine map tensor file")
    p.add_argument("--clamp-nonneg", dest="clamp_nonneg", action="store_true")
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, TensorFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
