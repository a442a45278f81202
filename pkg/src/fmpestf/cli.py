"""Command-line entry point: synth, train, eval, predict, gradcheck.

Every command writes a manifest (the fully resolved configuration plus input
paths) next to its outputs; rerunning a command from its manifest in
single-threaded mode reproduces the outputs byte for byte.  Exit codes:
0 success, 2 configuration error, 3 data/I-O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    DataFormatError,
    load_adjacency,
    load_series,
    make_windows,
    split_chronological,
    synth_series,
    write_adjacency,
    write_series,
)
from .embedding import DataEmbedding
from .model import (
    ConfigError,
    FmpestfModel,
    ModelConfig,
    apply_ablation,
    load_checkpoint,
    save_checkpoint,
)
from .spatial import FusionGraphBlock
from .temporal import AttConvBlock
from .tensor import NumericsError, Tensor, grad_check
from .training import (
    TrainConfig,
    compute_metrics,
    masked_mae_loss,
    predict_windows,
    train,
)

GRADCHECK_TOLERANCE = 1e-4

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _add_shared_flags(sub):
    sub.add_argument("--config", help="JSON config file (or a previous manifest)")
    sub.add_argument("--seed", type=int, help="overrides the model and training seeds")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker threads; 1 (the default and only mode) is fully "
                          "deterministic")
    sub.add_argument("--ablate", choices=["no-att", "no-adj", "no-dyn"],
                     help="train/evaluate the structural variant without this mechanism")
    sub.add_argument("--dump-graphs", action="store_true",
                     help="export the fusion matrices of the first batch as text")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmpestf",
        description="spatial-temporal traffic forecasting: synth, train, eval, "
                    "predict, gradcheck")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--nodes", type=int, required=True)
    synth.add_argument("--days", type=int, required=True)
    synth.add_argument("--interval", type=int, default=5, help="minutes per step")
    synth.add_argument("--coupling", type=float, default=0.5)
    synth.add_argument("--noise", type=float, default=3.0)
    synth.add_argument("--drift", type=float, default=12.0)
    synth.add_argument("--weekly-amp", type=float, default=0.15)
    synth.add_argument("--daily-amp", type=float, default=55.0)
    synth.add_argument("--spike-rate", type=float, default=0.01)
    synth.add_argument("--outage-rate", type=float, default=0.025,
                       help="chance per step that a sensor outage begins")
    synth.add_argument("--edge-recall", type=float, default=0.6,
                       help="fraction of true coupling edges exposed in the "
                            "emitted adjacency")
    _add_shared_flags(synth)
    synth.set_defaults(func=cmd_synth)

    tr = commands.add_parser("train", help="train a model on a series file")
    tr.add_argument("--series", required=True)
    tr.add_argument("--adjacency")
    _add_shared_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = commands.add_parser("eval", help="evaluate a checkpoint on a series file")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--series", required=True)
    ev.add_argument("--adjacency")
    ev.add_argument("--split", choices=["train", "val", "test"], default="test")
    _add_shared_flags(ev)
    ev.set_defaults(func=cmd_eval)

    pr = commands.add_parser("predict", help="forecast from the trailing window")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--series", required=True)
    pr.add_argument("--adjacency")
    _add_shared_flags(pr)
    pr.set_defaults(func=cmd_predict)

    gc = commands.add_parser("gradcheck", help="verify gradients against finite differences")
    gc.add_argument("--op", choices=["full", "attconv", "fusion", "glu", "embedding"],
                    default="full")
    _add_shared_flags(gc)
    gc.set_defaults(func=cmd_gradcheck)

    return parser


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as err:
        raise DataFormatError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(payload, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return payload


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    model_cfg: ModelConfig | None, train_cfg: TrainConfig | None,
                    data_paths: dict) -> None:
    manifest = {
        "command": command,
        "seed": args.seed,
        "threads": args.threads,
        "ablate": getattr(args, "ablate", None),
        "data": data_paths,
        "model": model_cfg.to_dict() if model_cfg else None,
        "train": train_cfg.to_dict() if train_cfg else None,
    }
    if command == "synth":
        manifest["synth"] = {k: getattr(args, k) for k in
                             ("nodes", "days", "interval", "coupling", "noise",
                              "drift", "weekly_amp", "daily_amp", "spike_rate",
                              "outage_rate", "edge_recall")}
    with open(out_dir / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _prepare_out(args) -> Path:
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataFormatError(f"cannot create output directory {out_dir}: {err}") from err
    return out_dir


def _resolve_configs(args, n_nodes: int, in_channels: int, slots_per_day: int):
    """Merge config file, data-derived fields and flag overrides."""
    payload = _load_config_file(args.config)
    model_section = dict(payload.get("model") or {})
    train_section = dict(payload.get("train") or {})

    derived = {"n_nodes": n_nodes, "in_channels": in_channels,
               "slots_per_day": slots_per_day}
    for key, value in derived.items():
        if key in model_section and model_section[key] != value:
            raise ConfigError(f"config pins {key}={model_section[key]} but the dataset "
                              f"implies {key}={value}")
        model_section[key] = value
    if args.seed is not None:
        model_section["seed"] = args.seed
        train_section["seed"] = args.seed

    try:
        model_cfg = ModelConfig.from_dict(model_section)
        train_cfg = TrainConfig.from_dict(train_section)
    except TypeError as err:
        raise ConfigError(f"unknown config key: {err}") from err
    model_cfg = apply_ablation(model_cfg, getattr(args, "ablate", None))
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


def _load_dataset(args):
    adjacency = None
    graph = None
    if args.adjacency:
        graph = load_adjacency(args.adjacency)
        adjacency = graph.adjacency
    series, interval_min, spd = load_series(
        args.series, expected_nodes=graph.n_nodes if graph else None)
    return series, adjacency, interval_min, spd


def _dump_graphs(out_dir: Path, collected: list) -> None:
    graphs_dir = out_dir / "graphs"
    graphs_dir.mkdir(exist_ok=True)
    for i, (tag, matrix) in enumerate(collected):
        m = matrix[0] if matrix.ndim == 3 else matrix
        with open(graphs_dir / f"{i:02d}_{tag.replace('.', '_')}.txt", "w",
                  encoding="utf-8", newline="\n") as fh:
            for row in m:
                fh.write(" ".join(repr(float(v)) for v in row))
                fh.write("\n")


def cmd_synth(args) -> int:
    if args.nodes < 2:
        raise ConfigError(f"--nodes must be >= 2 (coupling needs neighbours), "
                          f"got {args.nodes}")
    if args.days < 2:
        raise ConfigError(f"--days must be >= 2, got {args.days}")
    out_dir = _prepare_out(args)
    seed = args.seed if args.seed is not None else 0
    series, graph = synth_series(args.nodes, args.days, args.interval, seed,
                                 coupling=args.coupling, noise=args.noise,
                                 drift=args.drift, weekly_amp=args.weekly_amp,
                                 daily_amp=args.daily_amp, spike_rate=args.spike_rate,
                                 outage_rate=args.outage_rate,
                                 edge_recall=args.edge_recall)
    series_path = out_dir / "series.txt"
    adjacency_path = out_dir / "adjacency.txt"
    write_series(series_path, series, args.interval)
    write_adjacency(adjacency_path, graph.adjacency)
    _write_manifest(out_dir, "synth", args, None, None,
                    {"series": str(series_path), "adjacency": str(adjacency_path)})
    print("dataset nodes interval samples")
    print(f"synthetic {args.nodes} {args.interval}min {series.shape[2]}")
    return EXIT_OK


def cmd_train(args) -> int:
    out_dir = _prepare_out(args)
    if args.adjacency is None and args.ablate != "no-adj":
        raise ConfigError("an adjacency file is required unless training the "
                          "no-adj variant")
    series, adjacency, interval_min, spd = _load_dataset(args)
    model_cfg, train_cfg = _resolve_configs(args, series.shape[1], series.shape[0], spd)

    windows = make_windows(series, model_cfg.window, model_cfg.horizon, spd)
    split = split_chronological(windows)
    model = FmpestfModel(model_cfg)
    result = train(model, split, train_cfg, adjacency)

    checkpoint_path = out_dir / "checkpoint.json"
    save_checkpoint(checkpoint_path, model)
    with open(out_dir / "train_log.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(result.log))
        fh.write("\n")
    _write_manifest(out_dir, "train", args, model_cfg, train_cfg,
                    {"series": str(args.series), "adjacency": args.adjacency,
                     "checkpoint": str(checkpoint_path)})
    print(f"trained {result.epochs_run} epochs; best val_mae={result.best_val_mae!r} "
          f"at epoch {result.best_epoch}")
    return EXIT_OK


def _check_compatibility(model: FmpestfModel, series, spd: int, adjacency) -> None:
    mismatches = []
    if model.cfg.n_nodes != series.shape[1]:
        mismatches.append(f"n_nodes: checkpoint {model.cfg.n_nodes}, data {series.shape[1]}")
    if model.cfg.in_channels != series.shape[0]:
        mismatches.append(f"in_channels: checkpoint {model.cfg.in_channels}, "
                          f"data {series.shape[0]}")
    if model.cfg.slots_per_day != spd:
        mismatches.append(f"slots_per_day: checkpoint {model.cfg.slots_per_day}, data {spd}")
    if model.cfg.use_prompt and adjacency is None:
        mismatches.append("adjacency: checkpoint fuses the prompt, none supplied")
    if mismatches:
        raise ConfigError("checkpoint/data mismatch: " + "; ".join(mismatches))


def cmd_eval(args) -> int:
    out_dir = _prepare_out(args)
    model = load_checkpoint(args.checkpoint)
    series, adjacency, interval_min, spd = _load_dataset(args)
    _check_compatibility(model, series, spd, adjacency)

    windows = make_windows(series, model.cfg.window, model.cfg.horizon, spd)
    split = split_chronological(windows)
    subset = getattr(split, args.split)
    collect: list | None = [] if args.dump_graphs else None
    preds = predict_windows(model, subset, adjacency, collect_graphs=collect)
    targets = np.stack([w.target for w in subset])
    report = compute_metrics(preds, targets)

    with open(out_dir / "metrics.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_table())
    with open(out_dir / "per_horizon.txt", "w", encoding="utf-8", newline="\n") as fh:
        for h in range(len(report.per_horizon_mae)):
            fh.write(f"{h + 1} {report.per_horizon_mae[h]!r} "
                     f"{report.per_horizon_rmse[h]!r} {report.per_horizon_mape[h]!r}\n")
    if collect:
        _dump_graphs(out_dir, collect)
    _write_manifest(out_dir, "eval", args, model.cfg, None,
                    {"series": str(args.series), "adjacency": args.adjacency,
                     "checkpoint": str(args.checkpoint), "split": args.split})
    print(f"{args.split} mae={report.mae!r} rmse={report.rmse!r} mape={report.mape!r}")
    return EXIT_OK


def cmd_predict(args) -> int:
    out_dir = _prepare_out(args)
    model = load_checkpoint(args.checkpoint)
    series, adjacency, interval_min, spd = _load_dataset(args)
    _check_compatibility(model, series, spd, adjacency)

    window = model.cfg.window
    if series.shape[2] < window:
        raise DataFormatError(f"series length {series.shape[2]} is shorter than "
                              f"the model window {window}")
    start = series.shape[2] - window
    history = model.normalizer.normalize(series[:, :, start:start + window])
    steps = np.arange(start, start + window)
    slots = steps % spd
    dows = (steps // spd) % 7
    collect: list | None = [] if args.dump_graphs else None
    with T.no_grad():
        forecast = model.forward(history, slots, dows, adjacency, collect).data

    with open(out_dir / "forecast.txt", "w", encoding="utf-8", newline="\n") as fh:
        for row in forecast:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")
    if collect:
        _dump_graphs(out_dir, collect)
    _write_manifest(out_dir, "predict", args, model.cfg, None,
                    {"series": str(args.series), "adjacency": args.adjacency,
                     "checkpoint": str(args.checkpoint)})
    print(f"forecast written for {forecast.shape[0]} nodes x {forecast.shape[1]} steps")
    return EXIT_OK


def _liven_zero_weights(params, rng) -> None:
    # zero-initialized pathway weights would hide their upstream gradients
    for p in params:
        if p.ndim >= 2 and not p.data.any():
            p.data[...] = rng.normal(scale=0.3, size=p.shape)


def _gradcheck_case(op: str, seed: int):
    rng = np.random.default_rng(seed)
    if op == "full":
        cfg = ModelConfig(n_nodes=4, in_channels=1, window=8, horizon=4,
                          expand_channels=2, embed_channels=2, slots_per_day=8,
                          kernel_sizes=(3, 1), diffusion_steps=1, max_neighbors=3,
                          tree_depth=1, seed=seed)
        model = FmpestfModel(cfg)
        hist = rng.normal(size=(1, 4, 8))
        steps = np.arange(8)
        slots, dows = steps % 8, (steps // 8) % 7
        target = rng.normal(loc=5.0, size=(4, 4))
        adj = np.zeros((4, 4))
        for i in range(4):
            adj[i, (i + 1) % 4] = adj[(i + 1) % 4, i] = 1.0

        _liven_zero_weights(model.parameters(), rng)

        def f():
            return masked_mae_loss(model.forward(hist, slots, dows, adj), target)

        return f, model.parameters()
    if op == "attconv":
        block = AttConvBlock(4, (3, 2), True, rng)
        _liven_zero_weights(block.parameters(), rng)
        h = Tensor(rng.normal(size=(4, 3, 6)))
        probe = Tensor(rng.normal(size=(4, 3, 6)))
        return (lambda: T.tsum(T.mul(block.forward(h), probe))), block.parameters()
    if op == "fusion":
        block = FusionGraphBlock(4, 4, 2, 3, True, True, rng)
        _liven_zero_weights(block.parameters(), rng)
        h = Tensor(rng.normal(size=(4, 4, 3)))
        probe = Tensor(rng.normal(size=(4, 4, 3)))
        adj = np.abs(rng.normal(size=(4, 4)))
        adj = np.maximum(adj, adj.T)
        np.fill_diagonal(adj, 0.0)
        return (lambda: T.tsum(T.mul(block.forward(h, adj), probe))), block.parameters()
    if op == "glu":
        cfg = ModelConfig(n_nodes=3, expand_channels=2, embed_channels=2,
                          slots_per_day=8, window=4, horizon=2, tree_depth=0,
                          kernel_sizes=(1, 1), seed=seed)
        model = FmpestfModel(cfg)
        h = Tensor(rng.normal(size=(4, 3, 4)))
        probe = Tensor(rng.normal(size=(4, 3, 4)))
        params = [model.gate_value_w, model.gate_value_b, model.gate_w, model.gate_b]
        return (lambda: T.tsum(T.mul(model.glu(h), probe))), params
    if op == "embedding":
        emb = DataEmbedding(1, 2, 2, 8, rng)
        x = Tensor(rng.normal(size=(1, 3, 6)))
        steps = np.arange(6)
        slots, dows = steps % 8, (steps // 8) % 7
        probe = Tensor(rng.normal(size=(4, 3, 6)))
        return (lambda: T.tsum(T.mul(emb.forward(x, slots, dows), probe))), emb.parameters()
    raise ConfigError(f"unknown gradcheck op {op!r}")


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out_dir = _prepare_out(args)
    f, params = _gradcheck_case(args.op, seed)
    report = grad_check(f, params)
    lines = [f"op={args.op} max_rel_err={report.max_rel_err!r} "
             f"worst={report.worst_param}@{report.worst_index}"]
    for entry in report.entries:
        lines.append(f"param={entry.name} max_rel_err={entry.max_rel_err!r}")
    passed = report.max_rel_err < GRADCHECK_TOLERANCE
    lines.append(f"result={'pass' if passed else 'fail'} tolerance={GRADCHECK_TOLERANCE}")
    text = "\n".join(lines)
    with open(out_dir / "gradcheck.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")
    _write_manifest(out_dir, "gradcheck", args, None, None, {"op": args.op})
    print(text)
    return EXIT_OK if passed else EXIT_NUMERICAL


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericsError, T.ShapeError) as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
