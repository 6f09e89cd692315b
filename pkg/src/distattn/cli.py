"""Command-line entry point: ``distattn <subcommand> [options]``.

Exit codes: 0 success, 1 a run finished but one of its checks failed,
2 usage error (bad flag, unreadable or malformed config, unknown key).

Config files are JSON objects with flat dotted keys, e.g.::

    {"train.peak_lr": 0.001, "data.count": 500, "sweep.p_values": [1.0, 2.0]}

Sections: ``data``, ``model``, ``train``, ``sweep``, ``chains``,
``masked_model``, ``masked_train``, ``analysis``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import experiments as X
from .analysis import emit_results, profile_chart, read_csv, write_json
from .embeddings import error_curves, identity_checks
from .model import load_checkpoint, save_checkpoint
from .results import ExperimentResult

log = logging.getLogger("distattn")

COMMANDS = ("verify", "train-sim", "sweep-exponent", "sweep-headdim", "ablate-aug", "se3-div", "train-masked",
            "analyze-attn", "plot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2) itself; keep control here
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file of dotted-key overrides")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=None,
                        help="result directory (default: $DISTATTN_OUT/<command> or results/<command>)")
    scale = common.add_mutually_exclusive_group()
    scale.add_argument("--fast", dest="preset", action="store_const", const="fast",
                       help="acceptance-scale preset (default)")
    scale.add_argument("--full", dest="preset", action="store_const", const="full", help="full-scale preset (1.6M-parameter simulated model, 10,000 clouds)")
    scale.add_argument("--tiny", dest="preset", action="store_const", const="tiny", help="smoke-test preset")
    common.set_defaults(preset="fast")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="distattn", description="Distance-aware attention experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("verify", parents=[common], help="analytic embedding and GLU identities")
    p = sub.add_parser("train-sim", parents=[common], help="train one truncated model")
    p.add_argument("--p", type=float, default=None, help="target exponent (default sweep.p)")
    p = sub.add_parser("sweep-exponent", parents=[common], help="val loss vs target exponent p")
    p.add_argument("--p-values", type=_floats, default=None)
    p.add_argument("--seeds", type=_ints, default=None,
                   help="data/model seeds (default: sweep.seeds shifted by --seed)")
    p = sub.add_parser("sweep-headdim", parents=[common], help="val loss vs head dimension")
    p.add_argument("--n-values", type=_ints, default=None)
    p.add_argument("--head-dims", type=_ints, default=None)
    sub.add_parser("ablate-aug", parents=[common], help="rotation augmentation on/off with few clouds")
    p = sub.add_parser("se3-div", parents=[common], help="SE(3) divergence of a trained truncated model")
    p.add_argument("--checkpoint", type=Path, default=None, help="model .npz (default: train one first)")
    p = sub.add_parser("train-masked", parents=[common], help="masked-token models with/without coordinates")
    p.add_argument("--label-noise", type=float, default=None)
    p = sub.add_parser("analyze-attn", parents=[common], help="attention vs distance + Gaussian fits")
    p.add_argument("--checkpoint", type=Path, default=None, help="model .npz (default: train one first)")
    p.add_argument("--raw", action="store_true", help="keep token identities and positions (no isolation)")
    p = sub.add_parser("plot", parents=[common], help="redraw SVG charts from a result directory")
    p.add_argument("result_dir", type=Path)
    return parser


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object of dotted keys")
    return data


def resolve_preset(name: str, overrides: dict) -> X.Preset:
    preset = X.PRESETS[name]()
    try:
        return X.apply_overrides(preset, overrides)
    except KeyError as exc:
        raise UsageError(f"unknown config key {exc.args[0]!r}") from exc
    except TypeError as exc:
        raise UsageError(f"bad config value: {exc}") from exc


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get("DISTATTN_OUT", "results")) / args.command


def _emit(result: ExperimentResult, out: Path) -> None:
    emit_results(result, out, X.charts_for(result))
    write_json({"wall_clock_seconds": round(result.wall_clock, 3)}, out / "timing.json")


def _failed(result: ExperimentResult) -> list[str]:
    return [k for k, ok in result.summary.get("checks", {}).items() if not ok]


def _trained_truncated(preset, seed, out):
    res = X.run_train_sim(preset, seed)
    model = res.artifacts["model"]
    save_checkpoint(model, out / "model.npz")
    return model


def cmd_verify(args, preset, out) -> ExperimentResult:
    started = time.perf_counter()
    checks = identity_checks()
    rows = error_curves()
    width = max(len(c.name) for c in checks)
    for c in checks:
        op = "<=" if c.sense == "max" else ">="
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.value:.3e} {op} {c.tolerance:.1e}")
    summary = {"identities": [{"name": c.name, "value": c.value, "tolerance": c.tolerance, "sense": c.sense}
                              for c in checks],
               "checks": {c.name: c.passed for c in checks}}
    return ExperimentResult("verify", {"grid": 201}, args.seed, rows, summary, time.perf_counter() - started)


def cmd_train_sim(args, preset, out):
    res = X.run_train_sim(preset, args.seed, args.p)
    save_checkpoint(res.artifacts["model"], out / "model.npz")
    return res


def cmd_sweep_exponent(args, preset, out):
    # --seed shifts the whole seed list so the default (0) gives sweep.seeds verbatim
    seeds = args.seeds or [args.seed + s for s in preset.sweep.seeds]
    return X.run_sweep_exponent(args.p_values or preset.sweep.p_values, preset, seeds)


def cmd_sweep_headdim(args, preset, out):
    return X.run_sweep_headdim(args.n_values or preset.sweep.n_values, args.head_dims or preset.sweep.head_dims,
                               preset, args.seed)


def cmd_ablate_aug(args, preset, out):
    res = X.run_ablate_augmentation(preset, args.seed)
    for variant, model in res.artifacts["models"].items():
        save_checkpoint(model, out / f"model_{variant}.npz")
    return res


def _load(path):
    try:
        return load_checkpoint(path)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_se3_div(args, preset, out):
    model = _load(args.checkpoint) if args.checkpoint else _trained_truncated(preset, args.seed, out)
    if model.kind != "truncated":
        raise UsageError("se3-div needs a truncated-model checkpoint")
    return X.run_se3_divergence(model, preset, args.seed)


def cmd_train_masked(args, preset, out):
    res = X.run_train_masked(preset, args.seed, label_noise=args.label_noise)
    for variant, model in res.artifacts["models"].items():
        save_checkpoint(model, out / f"model_{variant}.npz")
    return res


def cmd_analyze_attn(args, preset, out):
    model = _load(args.checkpoint) if args.checkpoint else _trained_truncated(preset, args.seed, out)
    clouds = tokens = None
    if model.kind == "masked_lm":
        if not model.config.with_coords:
            log.warning("model has no coordinate input; expect flat profiles")
        tokens, clouds = X.make_chains(preset, args.seed)
        n = preset.analysis.clouds
        tokens, clouds = tokens[:n], clouds[:n]
    res = X.run_analyze_attention(model, preset, args.seed, clouds, tokens, isolate=not args.raw)
    for prof, fit in zip(res.artifacts["profiles"], res.artifacts["fits"]):
        emit_results(prof, out, fit=fit)
    return res


def cmd_plot(args, preset, out):
    src = args.result_dir
    try:
        meta = json.loads((src / "summary.json").read_text())
        config = json.loads((src / "config.json").read_text())
        rows = read_csv(src / "metrics.csv")
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{src} is not a result directory: {exc}") from exc
    res = ExperimentResult(meta["name"], config, meta["seed"], rows, meta["summary"])
    charts = X.charts_for(res)
    if not charts:
        raise UsageError(f"no charts defined for result {res.name!r}")
    target = args.out or src
    emit_results(res, target, charts)
    return None


HANDLERS = {
    "verify": cmd_verify,
    "train-sim": cmd_train_sim,
    "sweep-exponent": cmd_sweep_exponent,
    "sweep-headdim": cmd_sweep_headdim,
    "ablate-aug": cmd_ablate_aug,
    "se3-div": cmd_se3_div,
    "train-masked": cmd_train_masked,
    "analyze-attn": cmd_analyze_attn,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        preset = resolve_preset(args.preset, load_config(args.config))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out = _out_dir(args)
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            if args.command != "plot":
                out.mkdir(parents=True, exist_ok=True)
            result = HANDLERS[args.command](args, preset, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if result is None:
        return 0
    _emit(result, out)
    failed = _failed(result)
    if args.command != "verify":
        print(json.dumps({"result": str(out), "failed_checks": failed}, sort_keys=True))
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
