"""Command-line interface: data generation, training, evaluation, gradient
checking, benchmarking, and model introspection.

Exit codes: 0 success, 2 usage/config/data error, 3 numerical divergence or
gradient-check failure. All tabular output is CSV; configs are strict JSON
(unknown keys are rejected by name).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from .autodiff import Parameter, Rng, Tensor, grad_check, no_grad
from .data import DatasetFormatError, gen_synthetic, load_dataset, save_dataset
from .mapper import (NystromEmbedding, embed_multi_ref, init_references,
                     nystrom_embed, ot_align)
from .metrics import evaluate_dataset
from .model import (Adam, DivergenceError, ModelConfig, SegModel, SgdMomentum,
                    load_checkpoint, save_checkpoint, seg_loss, train)
from .quantizer import Codebook, quantize
from .sinkhorn import OtProblem, plan_to_csv_rows, sinkhorn_solve, \
    uniform_marginals


class CliError(Exception):
    """Usage, config, or data error; maps to exit code 2."""


LOG_COLUMNS = ("epoch", "train_loss", "val_dsc_mean", "val_hd_mean",
               "wall_seconds")


def _apply_thread_cap():
    cap = os.environ.get("L2G_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = cap


# ---- run config --------------------------------------------------------------

_MODEL_KEYS = {f.name for f in dc_fields(ModelConfig)}
_RUN_KEYS = {"seed", "epochs", "batch_size", "lr", "momentum", "optimizer",
             "train_data", "val_data", "out_dir", "deterministic",
             "percentile", "warmstart"}
_RUN_DEFAULTS = {"seed": 0, "epochs": 1, "batch_size": 8, "lr": 0.05,
                 "momentum": 0.9, "optimizer": "sgd", "val_data": None,
                 "deterministic": True, "percentile": 95, "warmstart": True}


def load_run_config(path):
    """Strict JSON run config: model keys plus run keys, nothing else."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise CliError(f"cannot read config: {e}")
    except json.JSONDecodeError as e:
        raise CliError(f"config is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise CliError("config must be a JSON object")
    for key in raw:
        if key not in _MODEL_KEYS and key not in _RUN_KEYS:
            raise CliError(f"unknown config key '{key}'")
    for key in ("train_data", "out_dir"):
        if key not in raw:
            raise CliError(f"config missing required key '{key}'")
    run = dict(_RUN_DEFAULTS)
    run.update({k: raw[k] for k in raw if k in _RUN_KEYS})
    if run["optimizer"] not in ("sgd", "adam"):
        raise CliError(f"unknown optimizer '{run['optimizer']}'")
    model_dict = {k: raw[k] for k in raw if k in _MODEL_KEYS}
    if "enc_channels" in model_dict:
        model_dict["enc_channels"] = tuple(model_dict["enc_channels"])
    try:
        cfg = ModelConfig(**model_dict)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad model config: {e}")
    if not Path(run["train_data"]).is_file():
        raise CliError(f"train_data not found: {run['train_data']}")
    if run["val_data"] is not None and not Path(run["val_data"]).is_file():
        raise CliError(f"val_data not found: {run['val_data']}")
    return cfg, run


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    if x is None:
        return "undefined"
    if isinstance(x, float):
        return "nan" if np.isnan(x) else f"{x:.6f}"
    return str(x)


# ---- commands ----------------------------------------------------------------


def cmd_gen_data(args):
    try:
        ds = gen_synthetic(args.classes, args.count, args.hw, args.hw,
                           args.seed, difficulty=args.difficulty)
        save_dataset(ds, args.out)
    except (ValueError, OSError) as e:
        raise CliError(str(e))
    size = Path(args.out).stat().st_size
    print(f"wrote {args.out}: {args.count} samples, {args.classes} classes, "
          f"{args.hw}x{args.hw}, seed {args.seed}, {size} bytes")
    return 0


def cmd_train(args):
    cfg, run = load_run_config(args.config)
    out_dir = Path(run["out_dir"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        train_ds = load_dataset(run["train_data"])
        val_ds = load_dataset(run["val_data"]) if run["val_data"] else None
    except (OSError, DatasetFormatError) as e:
        raise CliError(str(e))
    if (train_ds.H, train_ds.W, train_ds.C) != (cfg.H, cfg.W, cfg.C):
        raise CliError(
            f"dataset shape {train_ds.H}x{train_ds.W}x{train_ds.C} does not "
            f"match model config {cfg.H}x{cfg.W}x{cfg.C}")

    rng = Rng(run["seed"])
    start_epoch = 0
    opt = None
    if args.resume:
        try:
            model, opt, start_epoch = load_checkpoint(args.resume, rng=rng)
        except (OSError, ValueError) as e:
            raise CliError(f"cannot resume: {e}")
    else:
        model = SegModel(cfg, rng)
        if run["optimizer"] == "adam":
            opt = Adam(lr=run["lr"])
        else:
            opt = SgdMomentum(lr=run["lr"], momentum=run["momentum"])

    log_path = out_dir / "train_log.csv"
    mode = "a" if args.resume and log_path.exists() else "w"
    with open(log_path, mode, newline="") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(LOG_COLUMNS)

        def log_cb(row):
            w.writerow([row[k] for k in LOG_COLUMNS])
            f.flush()
            print(f"epoch {row['epoch']}: loss {row['train_loss']:.4f} "
                  f"val_dsc {_fmt(row['val_dsc_mean'])} "
                  f"val_hd {_fmt(row['val_hd_mean'])}")

        result, opt = train(model, train_ds, val_ds=val_ds,
                            epochs=run["epochs"],
                            batch_size=run["batch_size"], rng=rng,
                            optimizer=opt, log_cb=log_cb,
                            start_epoch=start_epoch,
                            warmstart=run["warmstart"] and not args.resume)

    epoch = start_epoch + run["epochs"]
    save_checkpoint(out_dir / "model.l2gc", model, opt, rng, epoch=epoch)
    last = result.log[-1]
    print(f"final: val_dsc {_fmt(last['val_dsc_mean'])} "
          f"val_hd {_fmt(last['val_hd_mean'])}")
    print(f"checkpoint: {out_dir / 'model.l2gc'}")
    return 0


def cmd_eval(args):
    try:
        model, _, _ = load_checkpoint(args.ckpt)
        ds = load_dataset(args.data)
    except (OSError, ValueError, DatasetFormatError) as e:
        raise CliError(str(e))
    cfg = model.config
    if (ds.H, ds.W, ds.C) != (cfg.H, cfg.W, cfg.C):
        raise CliError(f"dataset shape {ds.H}x{ds.W}x{ds.C} does not match "
                       f"model config {cfg.H}x{cfg.W}x{cfg.C}")
    rep = evaluate_dataset(model, ds, percentile=args.percentile)

    classes = sorted(rep.per_class_dsc)
    header = ["mean_dsc", "mean_hd"] + \
        [f"dsc_class_{c}" for c in classes] + \
        [f"hd_class_{c}" for c in classes]
    row = [rep.mean_dsc, rep.mean_hd] + \
        [rep.per_class_dsc[c] for c in classes] + \
        [rep.per_class_hd[c] if rep.per_class_hd[c] is not None
         else "undefined" for c in classes]
    if args.out:
        _write_csv(args.out, header, [row])

    print("Mean | DSC(up) | HD(down)" +
          "".join(f" | class {c} DSC" for c in classes))
    print("     | " + _fmt(rep.mean_dsc) + " | " + _fmt(rep.mean_hd) +
          "".join(" | " + _fmt(rep.per_class_dsc[c]) for c in classes))
    if rep.hd_undefined_count:
        print(f"hd undefined on {rep.hd_undefined_count} sample-classes")
    return 0


def _gradcheck_quantizer(rng, tol):
    cb = Codebook.create(6, 4, rng)
    cb.E.data[...] = rng.normal((6, 4))
    z = Parameter(rng.normal((5, 4)), "z")

    # the default loss contains stop-gradients, which finite differences see
    # through; the literal single-term loss is differentiable in both inputs
    def f():
        return quantize(z, cb, literal_loss=True).quant_loss

    return grad_check(f, [z, cb.E], tolerance=tol, rng=rng)


def _gradcheck_mapper(rng, tol, inject_fault=False):
    emb = NystromEmbedding.create(4, 3, rng)
    refs = init_references("random-unit", rng, t=3, k_a=4, q=2)
    z = Parameter(rng.normal((6, 3)), "z")

    def f():
        if inject_fault:
            # negative control: route the bandwidth through a detached copy,
            # so its analytic gradient is zero while finite differences still
            # see it vary — the check must flag this
            frozen = NystromEmbedding(
                anchors=emb.anchors,
                sigma_k=Parameter(emb.sigma_k.data, "frozen"),
                eig_floor=emb.eig_floor)
            out = embed_multi_ref(z, refs, frozen)
        else:
            out = embed_multi_ref(z, refs, emb)
        return (out * out).sum()

    params = [z, emb.anchors, emb.sigma_k] + refs.parameters()
    return grad_check(f, params, tolerance=tol, rng=rng)


def _gradcheck_model(rng, tol, scale):
    if scale == "tiny":
        cfg = ModelConfig(H=8, W=8, classes=3, enc_channels=(4, 8), K=8,
                          dim=8, t=2, q=2, k_a=4, stem_channels=0)
    else:
        cfg = ModelConfig(H=16, W=16, classes=3, enc_channels=(8,), K=16,
                          dim=16, t=4, q=2, k_a=8, stem_channels=8)
    model = SegModel(cfg, rng)
    img = rng.uniform(0, 1, (1, cfg.H, cfg.W))
    labels = rng.integers(0, cfg.classes, (cfg.H, cfg.W))

    def f():
        logits, qloss, _ = model.forward(img, smooth_quantizer=True)
        return seg_loss(logits, labels, qloss)

    return grad_check(f, model.parameters(), tolerance=tol, max_probes=4,
                      rng=rng)


def cmd_gradcheck(args):
    rng = Rng(args.seed)
    groups = [
        ("quantizer", lambda: _gradcheck_quantizer(rng.spawn(1), 1e-4)),
        ("mapper", lambda: _gradcheck_mapper(rng.spawn(2), 1e-4,
                                             args.inject_fault)),
        ("model", lambda: _gradcheck_model(rng.spawn(3), 1e-3, args.scale)),
    ]
    all_ok = True
    for name, fn in groups:
        rep = fn()
        worst = max(v["max_rel_err"] for k, v in rep.items() if k != "pass")
        status = "PASS" if rep["pass"] else "FAIL"
        all_ok = all_ok and rep["pass"]
        print(f"{name}: {status} (max rel err {worst:.3e})")
    if not all_ok:
        print("gradient check failed", file=sys.stderr)
        return 3
    return 0


def cmd_inspect(args):
    try:
        model, _, _ = load_checkpoint(args.ckpt)
        ds = load_dataset(args.data)
    except (OSError, ValueError, DatasetFormatError) as e:
        raise CliError(str(e))
    if not 0 <= args.sample < len(ds.samples):
        raise CliError(f"sample index {args.sample} out of range "
                       f"(dataset has {len(ds.samples)} samples)")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(str(e))

    info = model.inspect_sample(ds.samples[args.sample].image)
    for r, plan in enumerate(info["plans"]):
        _write_csv(out / f"plan_ref{r}.csv", ["row", "col", "value"],
                   plan_to_csv_rows(plan))
    S = info["position_weights"]
    _write_csv(out / "position_weights.csv", ["row", "col", "value"],
               [(i, j, S[i, j]) for i in range(S.shape[0])
                for j in range(S.shape[1])])
    _write_csv(out / "codebook_usage.csv", ["code", "count"],
               list(enumerate(info["usage"].tolist())))
    pred = info["prediction"]
    _write_csv(out / "prediction.csv", [f"col{j}" for j in range(pred.shape[1])],
               pred.tolist())
    print(f"wrote {len(info['plans'])} transport plans, position weights, "
          f"usage histogram and prediction to {out}")
    return 0


def cmd_bench(args):
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
        eps_list = [float(e) for e in args.eps.split(",")]
        iters_list = [int(i) for i in args.iters.split(",")]
    except ValueError as e:
        raise CliError(f"bad list flag: {e}")
    if any(n < 1 for n in sizes):
        raise CliError("sizes must be positive")
    t, dim, k_a = args.t, 8, 8
    rng = Rng(args.seed)
    emb = NystromEmbedding.create(k_a, dim, rng)
    rows = []
    with no_grad():
        for n in sizes:
            z = Tensor(rng.normal((n, dim)))
            psi = nystrom_embed(z, emb)
            ref = Tensor(rng.normal((t, k_a)))
            for eps in eps_list:
                for iters in iters_list:
                    t0 = time.perf_counter()
                    plan = ot_align(psi, ref, eps, iters)
                    # pooling cost included: this is the per-sample work the
                    # bottleneck does for one reference
                    _ = plan.matrix.T @ psi.data
                    dt = time.perf_counter() - t0
                    rows.append((n, t, eps, iters, dt,
                                 plan.marginal_residual))
    _write_csv(args.out, ["n", "t", "epsilon", "iterations", "seconds",
                          "marginal_residual"], rows)
    for r in rows:
        print(f"n={r[0]} t={r[1]} eps={r[2]} iters={r[3]} "
              f"seconds={r[4]:.5f} residual={r[5]:.3e}")
    return 0


# ---- entry point -------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="l2gnet")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--hw", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--difficulty", type=float, default=0.5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--percentile", type=float, default=95)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scale", choices=("tiny", "small"), default="tiny")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", action="store_true",
                   help="negative control: freeze one parameter's gradient")
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="dump bottleneck internals as CSV")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--sample", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", help="time the OT pooling across sizes")
    b.add_argument("--sizes", default="64,128,256")
    b.add_argument("--eps", default="0.1")
    b.add_argument("--iters", default="10")
    b.add_argument("--t", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="bench.csv")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
