"""Command-line pipeline: generate | train | eval | baseline | plot.

Every option can come from a flat YAML file (``--config``) whose keys are
the option names with underscores; command-line flags win over the file.
Each run writes into ``<runs_dir>/<timestamp>-seed<seed>-<command>`` (or
``--run-dir``), starting with ``config.yaml``, the resolved options.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import yaml

log = logging.getLogger("sharedattn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

COMMON = {"config": None, "runs_dir": "runs", "run_dir": None, "seed": None, "verbose": False}

DEFAULTS = {
    "generate": {
        "count": 100, "offset": 0, "preset": "videocoatt", "positive_fraction": None, "max_persons": 6,
        "max_groups": 3, "grid": 32, "sigma": 0.05, "out": None,
    },
    "train": {
        "train_data": None, "steps": 1000, "lr": None, "preset": "desk", "batch_size": 32, "sigma": 0.05,
        "token_dim": 64, "n_layers": 2, "n_heads": 4, "max_group_tokens": 4, "tau": 0.5,
        "no_refinement": False, "no_social_loss": False, "soft_argmax": False, "overfit": False, "no_augment": False,
        "time_budget": None, "dtype": "float32",
    },
    "eval": {
        "data": None, "checkpoint": None, "method": "ours", "tau": None, "pp_threshold": 0.1,
        "edge_threshold": 0.5, "iou_thresholds": "0.5,1.0", "dist_thresholds": "0.05,0.1,inf",
        "eleven_point": False, "sigma": 0.05,
    },
    "plot": {"data": None, "predictions": None, "initial_predictions": None, "scenes": 4, "iou_thresholds": "0.5,1.0",
             "dist_thresholds": "0.05,0.1,inf"},
}
DEFAULTS["baseline"] = {**DEFAULTS["eval"], "method": "pp"}
# seed is optional for plot, which does no sampling
SEEDED = {"generate", "train", "eval", "baseline"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sharedattn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(p):
        _flag(p, "config", help="flat YAML file of option values")
        _flag(p, "runs_dir", help="parent directory for run directories (default runs)")
        _flag(p, "run_dir", help="exact run directory (overrides runs-dir naming)")
        _flag(p, "seed", type=int, help="random seed (required unless set in the config)")
        _flag(p, "verbose", action="store_const", const=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    _flag(g, "count", type=int)
    _flag(g, "offset", type=int, help="index of the first scene")
    _flag(g, "preset", choices=["videocoatt", "childplay"])
    _flag(g, "positive_fraction", type=float)
    _flag(g, "max_persons", type=int)
    _flag(g, "max_groups", type=int)
    _flag(g, "grid", type=int, help="feature grid / heatmap side length")
    _flag(g, "sigma", type=float, help="Gaussian sigma of target heatmaps")
    _flag(g, "out", help="dataset path (default <run>/dataset.jsonl)")

    t = sub.add_parser("train", help="train the model")
    common(t)
    _flag(t, "train_data", help="dataset file from `generate`")
    _flag(t, "steps", type=int)
    _flag(t, "lr", type=float)
    _flag(t, "preset", choices=["desk", "paper"], help="desk: lr 1e-3 with flip augmentation; paper: lr 1e-5")
    _flag(t, "batch_size", type=int)
    _flag(t, "sigma", type=float)
    for name in ("token_dim", "n_layers", "n_heads", "max_group_tokens"):
        _flag(t, name, type=int)
    _flag(t, "tau", type=float)
    _flag(t, "no_refinement", action="store_const", const=True, help="use the initial (S, M) stage as output")
    _flag(t, "no_social_loss", action="store_const", const=True, help="drop the pairwise social loss")
    _flag(t, "soft_argmax", action="store_const", const=True, help="differentiable peak feedback")
    _flag(t, "overfit", action="store_const", const=True, help="train on the first scene only, without augmentation")
    _flag(t, "no_augment", action="store_const", const=True, help="disable the random flips of the desk preset")
    _flag(t, "time_budget", type=float, help="stop after this many seconds")
    _flag(t, "dtype", choices=["float32", "float64"])

    for name, method_choices in (("eval", ["ours", "pp", "pairwise", "oracle"]), ("baseline", ["pp", "pairwise"])):
        e = sub.add_parser(name, help="evaluate GroupAP" if name == "eval" else "evaluate a post-processing baseline")
        common(e)
        _flag(e, "data", help="evaluation dataset")
        _flag(e, "checkpoint", help="checkpoint.npz from `train`")
        _flag(e, "method", choices=method_choices)
        _flag(e, "tau", type=float)
        _flag(e, "pp_threshold", type=float, help="peak-proximity link distance")
        _flag(e, "edge_threshold", type=float, help="pairwise probability edge threshold")
        _flag(e, "iou_thresholds", help="comma-separated")
        _flag(e, "dist_thresholds", help="comma-separated, inf allowed")
        _flag(e, "eleven_point", action="store_const", const=True)
        _flag(e, "sigma", type=float)

    pl = sub.add_parser("plot", help="PR curves and scene renderings")
    common(pl)
    _flag(pl, "data")
    _flag(pl, "predictions", help="predictions.jsonl from `eval`")
    _flag(pl, "initial_predictions", help="initial-stage dump for comparison panels")
    _flag(pl, "scenes", type=int, help="number of scenes to render")
    _flag(pl, "iou_thresholds")
    _flag(pl, "dist_thresholds")
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and flags (flags win)."""
    command = args.command
    defaults = {**COMMON, **DEFAULTS[command]}
    from_file = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold key: value pairs")
        from_file = {str(k).replace("-", "_"): v for k, v in loaded.items()}
        unknown = sorted(set(from_file) - set(defaults) - {"command"})
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    opts = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        opts[key] = flag if flag is not None else from_file.get(key, default)
    opts["command"] = command
    if command in SEEDED and opts["seed"] is None:
        raise UsageError("a seed is required (--seed or `seed:` in the config)")
    return opts


def parse_thresholds(value) -> tuple[float, ...]:
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    try:
        return tuple(float(v) for v in items)
    except ValueError as exc:
        raise UsageError(f"bad threshold list {value!r}") from exc


def make_run_dir(opts: dict) -> Path:
    if opts["run_dir"]:
        run = Path(opts["run_dir"])
    else:
        seed = "none" if opts["seed"] is None else opts["seed"]
        base = Path(opts["runs_dir"]) / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}-{opts['command']}"
        run, k = base, 1
        while run.exists():
            run = base.with_name(f"{base.name}-{k}")
            k += 1
    run.mkdir(parents=True, exist_ok=True)
    snapshot = {k: v for k, v in opts.items() if k not in ("config", "run_dir", "runs_dir")}
    (run / "config.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=True))
    return run


# -- commands -----------------------------------------------------------------


def cmd_generate(opts: dict, run: Path) -> int:
    from .scene_synth import ConfigError, GeneratorConfig, generate_dataset, save_dataset, summarize

    kw = dict(
        image_grid=(opts["grid"], opts["grid"]), max_persons=opts["max_persons"], max_groups=opts["max_groups"],
        gaussian_sigma=opts["sigma"], seed=opts["seed"],
    )
    if opts["positive_fraction"] is not None:
        kw["positive_fraction"] = opts["positive_fraction"]
    try:
        cfg = GeneratorConfig.childplay_like(**kw) if opts["preset"] == "childplay" else GeneratorConfig(**kw)
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    scenes = generate_dataset(cfg, opts["count"], seed=opts["seed"], offset=opts["offset"])
    out = Path(opts["out"]) if opts["out"] else run / "dataset.jsonl"
    save_dataset(scenes, out)
    summary = summarize(scenes)
    (run / "summary.json").write_text(json.dumps(asdict(summary), indent=2))
    print(f"wrote {out}")
    print(summary)
    return EXIT_OK


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what.replace('_', '-')} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _model_config(opts: dict, scenes):
    from .attention_net import ModelConfig

    H, W, C = scenes[0].grid.shape
    return ModelConfig(
        token_dim=opts["token_dim"], n_layers=opts["n_layers"], n_heads=opts["n_heads"], heatmap_shape=(H, W),
        max_group_tokens=opts["max_group_tokens"], tau=opts["tau"], appearance_dim=len(scenes[0].persons[0].appearance),
        grid_channels=C, refinement=not opts["no_refinement"], soft_argmax=bool(opts["soft_argmax"]),
    )


def cmd_train(opts: dict, run: Path) -> int:
    import torch

    from .attention_net import ModelConfigError
    from .scene_synth import load_dataset
    from .train_loss import TrainConfig, breakdown_dict, build_model, save_checkpoint, train

    scenes = load_dataset(_require_file(opts["train_data"], "train_data"))
    if not scenes:
        raise UsageError("training set is empty")
    if opts["overfit"]:
        scenes = scenes[:1]
    try:
        model_cfg = _model_config(opts, scenes)
        model_cfg.validate()
    except ModelConfigError as exc:
        raise UsageError(str(exc)) from exc
    lr = opts["lr"] if opts["lr"] is not None else (1e-3 if opts["preset"] == "desk" else 1e-5)
    batch_size = 1 if opts["overfit"] else opts["batch_size"]
    cfg = TrainConfig(
        lr=lr, steps=opts["steps"], batch_size=batch_size, seed=opts["seed"], sigma=opts["sigma"],
        social_loss=not opts["no_social_loss"],
        augment=opts["preset"] == "desk" and not (opts["overfit"] or opts["no_augment"]),
    )
    dtype = torch.float64 if opts["dtype"] == "float64" else torch.float32
    model = build_model(model_cfg, opts["seed"], dtype)
    with open(run / "train.log", "w") as fh:
        history = train(model, scenes, cfg, fh, time_budget=opts["time_budget"])
    save_checkpoint(model, run / "checkpoint.npz")
    meta = {"model": asdict(model_cfg), "train": asdict(cfg), "steps_run": len(history), "seed": opts["seed"]}
    (run / "checkpoint.json").write_text(json.dumps(meta, indent=2))
    curves = {k: [breakdown_dict(h)[k] for h in history] for k in breakdown_dict(history[0])} if history else {}
    (run / "loss_curves.json").write_text(json.dumps(curves))
    stage = "initial (S, M)" if opts["no_refinement"] else "refined (S', M')"
    if history:
        print(f"step 0 total={history[0].total:.6g} -> step {len(history) - 1} total={history[-1].total:.6g}")
    print(f"final outputs: {stage}")
    print(f"wrote {run / 'checkpoint.npz'}")
    return EXIT_OK


def load_model(checkpoint: Path):
    from .attention_net import ModelConfig
    from .sa_pipeline import SharedAttentionModel
    from .train_loss import load_checkpoint

    meta_path = checkpoint.with_suffix(".json")
    if not meta_path.is_file():
        raise FileNotFoundError(f"checkpoint metadata {meta_path} is missing")
    meta = json.loads(meta_path.read_text())
    fields = dict(meta["model"])
    fields["heatmap_shape"] = tuple(fields["heatmap_shape"])
    model = SharedAttentionModel(ModelConfig(**fields))
    return load_checkpoint(model, checkpoint), meta


def cmd_eval(opts: dict, run: Path) -> int:
    from .eval_metrics import ThresholdGrid, baseline_pp, baseline_social, evaluate, make_records, oracle_predictions
    from .sa_pipeline import ScenePrediction, predict, write_predictions
    from .scene_synth import load_dataset

    scenes = load_dataset(_require_file(opts["data"], "data"))
    try:
        grid = ThresholdGrid(parse_thresholds(opts["iou_thresholds"]), parse_thresholds(opts["dist_thresholds"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    method = opts["method"]
    meta = None
    initial = None
    if method == "oracle":
        preds = [ScenePrediction(s.scene_id, g) for s, g in zip(scenes, oracle_predictions(scenes))]
    else:
        model, meta = load_model(_require_file(opts["checkpoint"], "checkpoint"))
        tau = opts["tau"] if opts["tau"] is not None else model.cfg.tau
        ours, heatmaps, pairwise = predict(model, scenes, opts["sigma"], tau=tau, with_pairwise=True)
        if method == "ours":
            preds = ours
            if model.refiner is not None:
                initial, _ = predict(model, scenes, opts["sigma"], tau=tau, stage="initial")
        elif method == "pp":
            preds = [ScenePrediction(s.scene_id, baseline_pp(h, opts["pp_threshold"])) for s, h in zip(scenes, heatmaps)]
        else:
            preds = [
                ScenePrediction(s.scene_id, baseline_social(h, p, opts["edge_threshold"], opts["seed"]))
                for s, h, p in zip(scenes, heatmaps, pairwise)
            ]
    with open(run / "predictions.jsonl", "w") as fh:
        write_predictions(preds, fh)
    if initial is not None:
        with open(run / "predictions_initial.jsonl", "w") as fh:
            write_predictions(initial, fh)
    table = evaluate(make_records(scenes, preds), grid, bool(opts["eleven_point"]))
    (run / "ap_table.csv").write_text(table.to_csv())
    text = table.to_text(method)
    (run / "ap_table.txt").write_text(text)
    report = {"config": opts, "method": method, "ap_table": table.as_dict()}
    if meta is not None:
        report["checkpoint"] = meta
        report["ablation"] = {
            "refinement": meta["model"]["refinement"],
            "social_loss": meta["train"]["social_loss"],
            "final_stage": "refined (S', M')" if meta["model"]["refinement"] else "initial (S, M)",
        }
        curves = Path(opts["checkpoint"]).with_name("loss_curves.json")
        if curves.is_file():
            report["loss_curves"] = json.loads(curves.read_text())
    (run / "report.json").write_text(json.dumps(report, indent=2, default=str))
    print(text, end="")
    return EXIT_OK


def cmd_plot(opts: dict, run: Path) -> int:
    from . import plotting
    from .eval_metrics import ThresholdGrid, make_records
    from .sa_pipeline import read_predictions
    from .scene_synth import load_dataset

    scenes = load_dataset(_require_file(opts["data"], "data"))
    with open(_require_file(opts["predictions"], "predictions")) as fh:
        preds = list(read_predictions(fh))
    grid = ThresholdGrid(parse_thresholds(opts["iou_thresholds"]), parse_thresholds(opts["dist_thresholds"]))
    records = make_records(scenes, preds)
    paths = plotting.save_pr_curves(records, run, grid)
    paths += plotting.save_scene_renderings(scenes, preds, run, opts["scenes"])
    if opts["initial_predictions"]:
        with open(_require_file(opts["initial_predictions"], "initial_predictions")) as fh:
            initial = list(read_predictions(fh))
        paths += plotting.save_refinement_panels(scenes, initial, preds, run, opts["scenes"])
    print(f"wrote {len(paths)} figures to {run}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "baseline": cmd_eval, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        opts = resolve_options(args)
        run = make_run_dir(opts)
        return COMMANDS[args.command](opts, run)
    except UsageError as exc:
        print(f"sharedattn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"sharedattn {args.command}: failed: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
