"""Experiment presets and runners for the simulated and masked-token studies.

Every runner takes a preset plus a seed and returns an ``ExperimentResult``
whose summary carries a ``checks`` dict: the qualitative claims the run is
meant to reproduce, each evaluated to a bool.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

import numpy as np

from .analysis import (
    AttentionProfile,
    Chart,
    GaussianFit,
    Series,
    attention_vs_distance,
    constant_fit_rmse,
    fit_gaussian,
    spearman,
)
from .geometry import generate_clouds, se3_divergence
from .model import ModelConfig
from .results import ExperimentResult
from .tensor import make_rng
from .training import (
    MaskingSpec,
    SyntheticChainSpec,
    TrainConfig,
    generate_synthetic_chains,
    train_masked,
    train_truncated,
    uninformative_ce_floor,
)

log = logging.getLogger(__name__)

# stream keys for make_rng / derive_seed
_DATA, _ABLATION_VAL, _DIVERGENCE, _CHAINS, _POINT = 100, 101, 102, 200, 300


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint32)[0])


@dataclass
class DataConfig:
    count: int = 2000
    points: int = 5
    spatial_dim: int = 3
    lo: float = 0.0
    hi: float = 200.0


@dataclass
class SweepConfig:
    p_values: list = field(default_factory=lambda: [0.5 * k for k in range(1, 9)])
    p: float = 2.0
    s: float = 200.0
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    n_values: list = field(default_factory=lambda: [1, 2, 3, 4])
    head_dims: list = field(default_factory=lambda: list(range(1, 9)))
    ablation_train: int = 100
    ablation_val: int = 500
    divergence_trials: int = 4
    divergence_clouds: int = 200
    # acceptance bands for the built-in checks
    elbow_factor: float = 0.5
    plateau_factor: float = 1.3
    divergence_band: float = 0.25
    gap_factor: float = 0.5


@dataclass
class AnalysisConfig:
    clouds: int = 500
    bucket_width: float = 1.0
    min_count: int = 5


@dataclass
class Preset:
    name: str
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    sweep: SweepConfig
    chains: SyntheticChainSpec
    masked_model: ModelConfig
    masked_train: TrainConfig
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        return {f.name: (asdict(v) if is_dataclass(v) else v) for f in fields(self) for v in [getattr(self, f.name)]}


def _masked_model(d_model: int = 32, n_layers: int = 2) -> ModelConfig:
    return ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=4, d_ff=4 * d_model, activation="relu",
                       vocab_size=9, use_sinusoidal_pe=True, spatial_dim=3)


def fast_preset() -> Preset:
    """Acceptance scale: small model, 2,000 clouds, 10,000 optimiser steps."""
    return Preset(
        name="fast",
        data=DataConfig(count=2000),
        model=ModelConfig(n_layers=3, d_model=64, n_heads=8, d_ff=256, head_dim_truncated=8),
        train=TrainConfig(total_steps=10_000, warmup_steps=1000, peak_lr=1e-3, coord_scale=1.0 / 16.0),
        sweep=SweepConfig(),
        chains=SyntheticChainSpec(),
        masked_model=_masked_model(),
        masked_train=TrainConfig(total_steps=6000, warmup_steps=600, peak_lr=2e-3, coord_scale=0.25),
    )


def full_preset() -> Preset:
    """Full-size simulated model (1,597,504 parameters) and 10,000 clouds."""
    return Preset(
        name="full",
        data=DataConfig(count=10_000),
        model=ModelConfig(),
        train=TrainConfig(epochs=100, warmup_steps=4000, peak_lr=4e-4, coord_scale=1.0 / 16.0),
        sweep=SweepConfig(),
        chains=SyntheticChainSpec(count=5000),
        masked_model=_masked_model(128, 4),
        masked_train=TrainConfig(epochs=100, warmup_steps=4000, peak_lr=2.3e-4, coord_scale=0.25),
    )


def tiny_preset() -> Preset:
    """Seconds-scale preset for smoke tests."""
    return Preset(
        name="tiny",
        data=DataConfig(count=80),
        model=ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, head_dim_truncated=5),
        train=TrainConfig(total_steps=40, warmup_steps=10, peak_lr=1e-3),
        sweep=SweepConfig(p_values=[1.0, 2.0], seeds=[1], n_values=[1], head_dims=[2, 3],
                          ablation_train=20, ablation_val=20, divergence_clouds=10),
        chains=SyntheticChainSpec(count=24, chain_length=16),
        masked_model=ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, activation="gelu",
                                 vocab_size=9, use_sinusoidal_pe=True),
        masked_train=TrainConfig(total_steps=20, warmup_steps=5, peak_lr=1e-3, coord_scale=0.25, val_fraction=0.25),
        analysis=AnalysisConfig(clouds=20),
    )


PRESETS = {"fast": fast_preset, "full": full_preset, "tiny": tiny_preset}


def apply_overrides(preset: Preset, overrides: dict) -> Preset:
    """Return a copy with flat dotted keys (``"train.peak_lr"``) applied."""
    out = copy.deepcopy(preset)
    for key, value in overrides.items():
        section, _, attr = key.partition(".")
        if not attr or not hasattr(out, section) or not is_dataclass(getattr(out, section)):
            raise KeyError(key)
        target = getattr(out, section)
        names = {f.name: f for f in fields(target)}
        if attr not in names:
            raise KeyError(key)
        current = getattr(target, attr)
        if isinstance(current, bool) and not isinstance(value, bool):
            raise TypeError(f"{key}: expected a boolean")
        if isinstance(current, (int, float)) and not isinstance(current, bool) and isinstance(value, (list, dict, str)):
            raise TypeError(f"{key}: expected a number")
        setattr(out, section, replace(target, **{attr: value}))
    return out


def _clouds(preset: Preset, seed: int, spatial_dim: int | None = None, count: int | None = None) -> np.ndarray:
    d = preset.data
    return generate_clouds(count or d.count, d.points, spatial_dim or d.spatial_dim, d.lo, d.hi,
                           make_rng(seed, _DATA, spatial_dim or d.spatial_dim))


def _echo(preset: Preset, **extra) -> dict:
    return {"preset": preset.to_dict(), **extra}


# -- simulated points ----------------------------------------------------------


def run_train_sim(preset: Preset, seed: int, p: float | None = None) -> ExperimentResult:
    p = preset.sweep.p if p is None else p
    clouds = _clouds(preset, seed)
    cfg = replace(preset.train, seed=seed)
    res = train_truncated(cfg, replace(preset.model, spatial_dim=preset.data.spatial_dim), clouds, p, preset.sweep.s,
                          name="train_sim")
    res.config = _echo(preset, seed=seed, p=p)
    res.summary["checks"] = {"beats_constant_baseline": res.summary["final_val_loss"] < res.summary["constant_baseline"]}
    return res


def run_sweep_exponent(p_values, preset: Preset, seeds=None) -> ExperimentResult:
    """One truncated model per (seed, p); each seed has its own data set."""
    p_values = [float(p) for p in p_values]
    if not p_values or any(p <= 0 for p in p_values):
        raise ValueError("p_values must be non-empty and positive")
    seeds = list(preset.sweep.seeds if seeds is None else seeds)
    started = time.perf_counter()
    rows = []
    for seed in seeds:
        clouds = _clouds(preset, seed)
        for i, p in enumerate(p_values):
            cfg = replace(preset.train, seed=derive_seed(seed, _POINT, i))
            r = train_truncated(cfg, preset.model, clouds, p, preset.sweep.s, name="sweep_exponent")
            rows.append({
                "seed": seed,
                "p": p,
                "final_val_loss": r.summary["final_val_loss"],
                "final_train_loss": r.summary["final_train_loss"],
                "best_val_loss": r.summary["best_val_loss"],
                "constant_baseline": r.summary["constant_baseline"],
            })
            log.info("seed %d p=%g val=%.5f", seed, p, r.summary["final_val_loss"])
    summary = summarize_exponent(rows)
    return ExperimentResult("sweep_exponent", _echo(preset, p_values=p_values, seeds=seeds), seeds[0], rows, summary,
                            time.perf_counter() - started)


def summarize_exponent(rows: list[dict]) -> dict:
    seeds = sorted({r["seed"] for r in rows})
    argmins = {}
    for s in seeds:
        sub = [r for r in rows if r["seed"] == s]
        argmins[str(s)] = min(sub, key=lambda r: r["final_val_loss"])["p"]
    votes = Counter(argmins.values())
    top, n_top = votes.most_common(1)[0]
    majority = top if n_top * 2 > len(seeds) else None
    ps = sorted({r["p"] for r in rows})
    mean_val = {str(p): float(np.mean([r["final_val_loss"] for r in rows if r["p"] == p])) for p in ps}
    return {
        "argmin_per_seed": argmins,
        "majority_argmin": majority,
        "mean_val_loss": mean_val,
        "checks": {"argmin_is_2": majority == 2.0} if 2.0 in ps else {},
    }


def run_sweep_headdim(n_values, head_dims, preset: Preset, seed: int) -> ExperimentResult:
    """Val loss over spatial dimension x truncated head width."""
    n_values = [int(n) for n in n_values]
    head_dims = [int(h) for h in head_dims]
    if any(h < 1 for h in head_dims) or any(not 1 <= n <= 4 for n in n_values):
        raise ValueError("head dims must be >= 1 and spatial dims in 1..4")
    started = time.perf_counter()
    rows = []
    for n in n_values:
        clouds = _clouds(preset, seed, spatial_dim=n)
        for j, h in enumerate(head_dims):
            cfg = replace(preset.train, seed=derive_seed(seed, _POINT, n, j))
            mcfg = replace(preset.model, spatial_dim=n, head_dim_truncated=h)
            r = train_truncated(cfg, mcfg, clouds, preset.sweep.p, preset.sweep.s, name="sweep_headdim")
            rows.append({"n": n, "head_dim": h, "final_val_loss": r.summary["final_val_loss"],
                         "final_train_loss": r.summary["final_train_loss"]})
            log.info("n=%d head_dim=%d val=%.5f", n, h, r.summary["final_val_loss"])
    summary = summarize_headdim(rows, preset.sweep)
    return ExperimentResult("sweep_headdim", _echo(preset, n_values=n_values, head_dims=head_dims), seed, rows,
                            summary, time.perf_counter() - started)


def summarize_headdim(rows: list[dict], sweep: SweepConfig) -> dict:
    table = {(r["n"], r["head_dim"]): r["final_val_loss"] for r in rows}
    elbows, plateaus, checks = {}, {}, {}
    for n in sorted({r["n"] for r in rows}):
        below, at, top = table.get((n, n + 1)), table.get((n, n + 2)), table.get((n, 8))
        if below is not None and at is not None:
            elbows[str(n)] = at / below
            checks[f"elbow_n{n}"] = at <= sweep.elbow_factor * below
        if at is not None and top is not None:
            plateaus[str(n)] = at / top
            checks[f"plateau_n{n}"] = at <= sweep.plateau_factor * top
    return {"elbow_ratio": elbows, "plateau_ratio": plateaus, "checks": checks}


def run_ablate_augmentation(preset: Preset, seed: int) -> ExperimentResult:
    """Train on a small set with and without random rotations."""
    started = time.perf_counter()
    sw = preset.sweep
    train = _clouds(preset, seed, count=sw.ablation_train)
    d = preset.data
    val = generate_clouds(sw.ablation_val, d.points, d.spatial_dim, d.lo, d.hi, make_rng(seed, _ABLATION_VAL))
    rows, summary, models = [], {}, {}
    for variant, rotate in (("rotated", True), ("raw", False)):
        cfg = replace(preset.train, seed=seed, rotate_augment=rotate)
        r = train_truncated(cfg, preset.model, train, sw.p, sw.s, val_clouds=val, name="ablate_aug")
        model = r.artifacts["model"]
        div = se3_divergence(model, val[: sw.divergence_clouds], sw.divergence_trials,
                             make_rng(seed, _DIVERGENCE), cfg.coord_scale)
        for row in r.metrics:
            rows.append({"variant": variant, **row})
        s = r.summary
        summary[variant] = {
            "final_train_loss": s["final_train_loss"],
            "final_val_loss": s["final_val_loss"],
            "final_gap": s["final_gap"],
            "se3_divergence": div,
            "divergence_over_val": div / s["final_val_loss"],
        }
        models[variant] = model
    rot, raw = summary["rotated"], summary["raw"]
    band = sw.divergence_band
    summary["checks"] = {
        "gap_reduced": rot["final_gap"] <= sw.gap_factor * raw["final_gap"],
        "divergence_reduced": rot["se3_divergence"] < raw["se3_divergence"],
        "rotated_divergence_matches_val": abs(rot["divergence_over_val"] - 1) <= band,
        "raw_divergence_matches_val": abs(raw["divergence_over_val"] - 1) <= band,
    }
    res = ExperimentResult("ablate_aug", _echo(preset, seed=seed), seed, rows, summary, time.perf_counter() - started)
    res.artifacts["models"] = models
    return res


def run_se3_divergence(model, preset: Preset, seed: int, clouds=None) -> ExperimentResult:
    """Per-cloud SE(3) divergence of a trained truncated model."""
    from .geometry import se3_divergence_per_cloud

    started = time.perf_counter()
    sw = preset.sweep
    if clouds is None:
        d = preset.data
        clouds = generate_clouds(sw.divergence_clouds, d.points, model.config.spatial_dim, d.lo, d.hi,
                                 make_rng(seed, _ABLATION_VAL))
    per = se3_divergence_per_cloud(model, clouds, sw.divergence_trials, make_rng(seed, _DIVERGENCE),
                                   model.config.coord_scale)
    rows = [{"cloud": i, "divergence": float(v)} for i, v in enumerate(per)]
    summary = {"se3_divergence": float(per.mean()), "trials": sw.divergence_trials, "clouds": len(per),
               "checks": {"non_negative": bool(np.all(per >= 0))}}
    return ExperimentResult("se3_div", _echo(preset, seed=seed), seed, rows, summary, time.perf_counter() - started)


# -- masked tokens ---------------------------------------------------------------


def make_chains(preset: Preset, seed: int, **overrides):
    spec = replace(preset.chains, **overrides)
    return generate_synthetic_chains(spec, make_rng(seed, _CHAINS))


def run_train_masked(preset: Preset, seed: int, variants=("coords", "plain"), label_noise: float | None = None,
                     ratio: float = 0.8) -> ExperimentResult:
    """Coords vs. non-coords masked-token models on the same synthetic chains."""
    started = time.perf_counter()
    over = {} if label_noise is None else {"label_noise": label_noise}
    chains = make_chains(preset, seed, **over)
    rows, summary, models = [], {}, {}
    for variant in variants:
        with_coords = variant == "coords"
        cfg = replace(preset.masked_train, seed=seed)
        r = train_masked(cfg, preset.masked_model, chains, with_coords, name="train_masked")
        rows.extend({"variant": variant, **row} for row in r.metrics)
        summary[variant] = {k: r.summary[k] for k in ("final_train_ce", "final_val_ce", "final_val_ce_mask",
                                                      "final_val_recovery", "per_class_recovery")}
        models[variant] = r.artifacts["model"]
    noise = preset.chains.label_noise if label_noise is None else label_noise
    vocab = preset.chains.vocab_size
    summary["label_noise"] = noise
    summary["uniform_ce"] = math.log(vocab)
    # kept tokens stay visible, so CE over all selected positions can beat ln V
    summary["uninformative_floor_all_positions"] = uninformative_ce_floor(vocab, MaskingSpec())
    checks = {}
    # The comparisons use mask-token positions, where the input holds no copy
    # of the answer; the all-position ratio is reported alongside.
    if "coords" in summary and "plain" in summary:
        summary["ce_ratio"] = summary["coords"]["final_val_ce_mask"] / summary["plain"]["final_val_ce_mask"]
        summary["ce_ratio_all_positions"] = summary["coords"]["final_val_ce"] / summary["plain"]["final_val_ce"]
        if noise < 1:
            checks["coords_helps"] = summary["ce_ratio"] <= ratio
    if noise >= 1:
        for v in variants:
            checks[f"{v}_at_uniform_ce"] = abs(summary[v]["final_val_ce_mask"] / summary["uniform_ce"] - 1) <= 0.02
            floor = summary["uninformative_floor_all_positions"]
            checks[f"{v}_at_uninformative_floor"] = abs(summary[v]["final_val_ce"] / floor - 1) <= 0.02
    summary["checks"] = checks
    res = ExperimentResult("train_masked", _echo(preset, seed=seed, label_noise=noise), seed, rows, summary,
                           time.perf_counter() - started)
    res.artifacts["models"] = models
    res.artifacts["chains"] = chains
    return res


# -- attention profiling -------------------------------------------------------------


def profile_layers(model, clouds, layers, cfg: AnalysisConfig, isolate: bool = True, tokens=None,
                   ) -> tuple[list[AttentionProfile], list[GaussianFit]]:
    profiles, fits = [], []
    for layer in layers:
        prof = attention_vs_distance(model, clouds, layer, isolate=isolate, tokens=tokens,
                                     bucket_width=cfg.bucket_width)
        profiles.append(prof)
        fits.append(fit_gaussian(prof, cfg.min_count))
    return profiles, fits


def run_analyze_attention(model, preset: Preset, seed: int, clouds=None, tokens=None,
                          isolate: bool = True, p: float | None = None) -> ExperimentResult:
    """Profile every layer and fit a Gaussian to each profile."""
    started = time.perf_counter()
    cfg = preset.analysis
    if clouds is None:
        d = preset.data
        clouds = generate_clouds(cfg.clouds, d.points, model.config.spatial_dim, d.lo, d.hi,
                                 make_rng(seed, _ABLATION_VAL))
    layers = list(range(model.config.n_layers))
    profiles, fits = profile_layers(model, clouds, layers, cfg, isolate, tokens)
    rows = []
    for prof, fit in zip(profiles, fits):
        rows.append({"layer": prof.layer, "amplitude": fit.amplitude, "sigma": fit.sigma, "offset": fit.offset,
                     "rmse": fit.rmse, "constant_rmse": constant_fit_rmse(prof, cfg.min_count),
                     "spearman": spearman(prof, cfg.min_count), "reliable": fit.reliable})
    summary = {"layers": len(layers), "kind": model.kind}
    if model.kind == "truncated":
        last = rows[-1]
        p = preset.sweep.p if p is None else p
        summary["expected_sigma"] = preset.sweep.s / math.sqrt(2.0) if p == 2.0 else None
        summary["final_layer"] = last
        checks = {"monotone_profile": last["spearman"] <= -0.9, "rmse_small": last["rmse"] <= 0.05}
        if summary["expected_sigma"]:
            checks["sigma_recovered"] = abs(last["sigma"] / summary["expected_sigma"] - 1) <= 0.15
        summary["checks"] = checks
    else:
        amps = [r["amplitude"] for r in rows]
        # soft check: reported, never turned into a failure
        summary["amplitude_decreasing"] = bool(all(a >= b for a, b in zip(amps, amps[1:])))
        summary["checks"] = {}
    res = ExperimentResult("analyze_attn", _echo(preset, seed=seed, isolate=isolate), seed, rows, summary,
                           time.perf_counter() - started)
    res.artifacts["profiles"] = profiles
    res.artifacts["fits"] = fits
    return res


# -- charts ----------------------------------------------------------------------------


def _curves(rows, x, ys, group=None):
    groups = sorted({r[group] for r in rows}) if group else [None]
    out = []
    for g in groups:
        sub = [r for r in rows if group is None or r[group] == g]
        for y in ys:
            label = f"{g} {y}" if g is not None else y
            out.append(Series(label, [r[x] for r in sub], [r[y] for r in sub]))
    return out


def charts_for(result: ExperimentResult) -> list[Chart]:
    """Charts rebuilt from ``metrics``/``summary`` alone, so ``plot`` can redraw them from disk."""
    rows, name = result.metrics, result.name
    if name in ("train_sim", "train_truncated"):
        return [Chart("loss.svg", "l1 loss per epoch", "epoch", "l1 loss",
                      _curves(rows, "epoch", ["train_loss", "val_loss"]), logy=True)]
    if name == "sweep_exponent":
        series = [Series(f"seed {s}", [r["p"] for r in rows if r["seed"] == s],
                         [r["final_val_loss"] for r in rows if r["seed"] == s], "both")
                  for s in sorted({r["seed"] for r in rows})]
        return [Chart("val_loss_vs_p.svg", "Validation loss vs exponent p", "p", "val l1 loss", series, logy=True)]
    if name == "sweep_headdim":
        series = [Series(f"n={n}", [r["head_dim"] for r in rows if r["n"] == n],
                         [r["final_val_loss"] for r in rows if r["n"] == n], "both")
                  for n in sorted({r["n"] for r in rows})]
        return [Chart("val_loss_vs_head_dim.svg", "Validation loss vs head dimension", "head dimension",
                      "val l1 loss", series, logy=True)]
    if name == "ablate_aug":
        return [Chart("loss.svg", "Train/val loss with and without rotations", "epoch", "l1 loss",
                      _curves(rows, "epoch", ["train_loss", "val_loss"], "variant"), logy=True)]
    if name == "se3_div":
        vals = sorted(r["divergence"] for r in rows)
        return [Chart("divergence.svg", "Per-structure SE(3) divergence (sorted)", "rank", "mean l1",
                      [Series("divergence", list(range(len(vals))), vals)])]
    if name == "train_masked":
        return [Chart("cross_entropy.svg", "Masked-token cross-entropy", "epoch", "cross-entropy",
                      _curves(rows, "epoch", ["train_ce", "val_ce", "val_ce_mask"], "variant")),
                Chart("recovery.svg", "Masked-token recovery", "epoch", "recovery rate",
                      _curves(rows, "epoch", ["val_recovery"], "variant"))]
    if name == "analyze_attn":
        return [Chart("fit_params.svg", "Fitted Gaussian per layer", "layer", "value",
                      _curves(rows, "layer", ["amplitude", "rmse"])),
                Chart("fit_sigma.svg", "Fitted sigma per layer", "layer", "sigma",
                      _curves(rows, "layer", ["sigma"]))]
    if name == "verify":
        out = []
        for var in ("x_range", "c"):
            sub = [r for r in rows if r.get("variable") == var]
            kinds = sorted({r["kind"] for r in sub})
            series = [Series(k, [r["value"] for r in sub if r["kind"] == k],
                             [r["sup_error"] for r in sub if r["kind"] == k], "both") for k in kinds]
            out.append(Chart(f"error_vs_{var}.svg", f"Sup error vs {var}", var, "sup error", series,
                             logx=True, logy=True))
        return out
    return []
