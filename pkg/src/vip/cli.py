"""Command-line surface.

Subcommands: synth, train, predict, eval, bench, gp-baseline.  Reports and
summaries go to stdout as canonical JSON; per-point predictions go to CSV.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

import argparse
import csv
import json
import sys
from dataclasses import replace

import numpy as np

from . import bench as benchmod
from . import data as datamod
from .errors import (
    ContractError,
    DimensionError,
    ModelFileError,
    NumericalError,
    ParameterError,
    ParseError,
)
from .inference import TrainConfig, train
from .modelfile import canonical_json, load_model, save_model
from .predict import posterior_predict


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(d, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    return TrainConfig.from_dict(d)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


def _emit(obj) -> None:
    sys.stdout.write(canonical_json(obj))


def _cmd_synth(args) -> int:
    ds = datamod.synth_toy(args.n, args.seed, noise=args.noise)
    _write_csv(args.out, None, np.column_stack([ds.x, ds.y]))
    _emit({"kind": args.kind, "rows": ds.n, "columns": ds.d + 1, "path": args.out})
    return 0


def _fit(ds_std, cfg):
    """Train on a standardized dataset, honoring grid mode."""
    if cfg.sigma2_mode == "grid":
        return benchmod.grid_search_sigma2(
            ds_std, cfg, grid=list(cfg.sigma2_grid), seed=cfg.seed
        ).model
    return train(ds_std.x, ds_std.y, cfg, stats=ds_std.stats)


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    raw = datamod.load_csv(args.data, has_header=args.has_header)
    ds = datamod.standardize(raw)
    model = _fit(ds, cfg)
    save_model(model, args.model_out)
    _emit(
        {
            "model": args.model_out,
            "rows": raw.n,
            "features": raw.d,
            "seed": model.seed,
            "sigma2": float(model.sigma2),
            "final_loss": model.loss_trace[-1] if model.loss_trace else None,
        }
    )
    return 0


def _cmd_predict(args) -> int:
    model = load_model(args.model)
    raw = datamod.load_csv(args.data, has_header=args.has_header)
    x = raw.x
    if model.stats is not None:
        x = (x - model.stats.feature_means) / model.stats.feature_stds
    pred = posterior_predict(model, x, mode=args.coeff)
    mean, var = pred.mean, pred.var_y
    if model.stats is not None:
        sd = model.stats.target_std
        mean = mean * sd + model.stats.target_mean
        var = var * sd * sd
    header = [f"x{j + 1}" for j in range(raw.d)] + ["mean", "var_y"]
    _write_csv(args.out, header, np.column_stack([raw.x, mean, var]))
    _emit({"path": args.out, "rows": raw.n})
    return 0


def _cmd_eval(args) -> int:
    with open(args.pred, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise ParseError(f"{args.pred}: no prediction rows")
    header = [c.strip() for c in rows[0]]
    try:
        i_mean, i_var = header.index("mean"), header.index("var_y")
    except ValueError:
        raise ParseError(f"{args.pred}: header must name 'mean' and 'var_y' columns") from None
    try:
        mean = np.array([float(r[i_mean]) for r in rows[1:]])
        var = np.array([float(r[i_var]) for r in rows[1:]])
    except (ValueError, IndexError) as e:
        raise ParseError(f"{args.pred}: bad prediction row ({e})") from None
    data = datamod.load_csv(args.data, has_header=args.has_header)
    if data.n != mean.shape[0]:
        raise ParameterError(
            f"{mean.shape[0]} predictions but {data.n} data rows"
        )
    if np.any(var <= 0):
        raise ParameterError("var_y entries must be positive")
    y = data.y
    nll = float(
        np.mean(0.5 * (np.log(2 * np.pi * var)) + (y - mean) ** 2 / (2 * var))
    )
    rmse = float(np.sqrt(np.mean((y - mean) ** 2)))
    _emit({"n": data.n, "nll": nll, "rmse": rmse})
    return 0


def _cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    data = None
    if args.protocol != "toy":
        if args.data is None:
            raise ParameterError(f"--data is required for the {args.protocol} protocol")
        data = datamod.load_csv(args.data, has_header=args.has_header)
    report = benchmod.run_protocol(
        args.protocol,
        cfg,
        data=data,
        splits=args.splits,
        seed=args.seed,
        train_frac=args.train_frac,
        n_segments=args.segments,
        segment_len=args.segment_len,
        toy_n=args.toy_n,
        toy_noise=args.toy_noise,
    )
    _emit(report)
    return 0


_GRID_KEYS = {
    "lengthscales",
    "signal_variances",
    "sigma2s",
    "splits",
    "seed",
    "train_frac",
    "protocol",
    "n_segments",
    "segment_len",
    "toy_n",
    "toy_noise",
}


def _cmd_gp_baseline(args) -> int:
    opts = {}
    if args.grid_config is not None:
        with open(args.grid_config, encoding="utf-8") as fh:
            try:
                opts = json.load(fh)
            except json.JSONDecodeError as e:
                raise ParseError(f"{args.grid_config}: not valid JSON ({e})") from e
        unknown = sorted(set(opts) - _GRID_KEYS)
        if unknown:
            raise ParameterError(f"unknown grid-config keys: {', '.join(unknown)}")
    protocol = opts.pop("protocol", "uci")
    data = None
    if protocol != "toy":
        if args.data is None:
            raise ParameterError(f"--data is required for the {protocol} protocol")
        data = datamod.load_csv(args.data, has_header=args.has_header)
    report = benchmod.gp_baseline_protocol(protocol, data=data, **opts)
    _emit(report)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vip",
        description="Sampling-based function priors with GP surrogate inference.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    sp.add_argument("--kind", choices=["toy"], default="toy")
    sp.add_argument("--n", type=int, default=300)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", choices=["var", "std", "none"], default="var")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_synth)

    tp = sub.add_parser("train", help="fit a model and save it as JSON")
    tp.add_argument("--data", required=True)
    tp.add_argument("--config", default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--has-header", action="store_true")
    tp.add_argument("--model-out", required=True)
    tp.set_defaults(func=_cmd_train)

    pp = sub.add_parser("predict", help="write per-point predictions as CSV")
    pp.add_argument("--model", required=True)
    pp.add_argument("--data", required=True)
    pp.add_argument("--has-header", action="store_true")
    pp.add_argument("--coeff", choices=["learned", "exact"], default=None)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=_cmd_predict)

    ep = sub.add_parser("eval", help="score a prediction CSV against targets")
    ep.add_argument("--pred", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--has-header", action="store_true")
    ep.set_defaults(func=_cmd_eval)

    bp = sub.add_parser("bench", help="run a repeated-split benchmark protocol")
    bp.add_argument("--protocol", choices=["toy", "uci", "interp"], required=True)
    bp.add_argument("--data", default=None)
    bp.add_argument("--config", default=None)
    bp.add_argument("--splits", type=int, default=5)
    bp.add_argument("--seed", type=int, default=0)
    bp.add_argument("--train-frac", type=float, default=0.9)
    bp.add_argument("--segments", type=int, default=5)
    bp.add_argument("--segment-len", type=int, default=20)
    bp.add_argument("--toy-n", type=int, default=300)
    bp.add_argument("--toy-noise", choices=["var", "std", "none"], default="std")
    bp.add_argument("--has-header", action="store_true")
    bp.set_defaults(func=_cmd_bench)

    gp = sub.add_parser("gp-baseline", help="exact GP baseline over the same splits")
    gp.add_argument("--data", default=None)
    gp.add_argument("--grid-config", default=None)
    gp.add_argument("--has-header", action="store_true")
    gp.set_defaults(func=_cmd_gp_baseline)

    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, ContractError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ParseError, ModelFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
