"""Attention-vs-distance profiles, Gaussian fits and result files.

CSV schemas written here:

* ``metrics.csv`` -- one row per epoch or sweep point; columns are the
  keys of ``ExperimentResult.metrics`` rows in first-seen order.
* ``profile_layer<k>.csv`` -- ``bucket_center, mean_attention, sample_count``.
* ``error_curves.csv`` -- ``kind, variable, value, sup_error``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .geometry import augment_batch, pairwise_distances
from .model import MaskedLMModel, TruncatedDistanceModel
from .results import ExperimentResult
from .tensor import no_grad


@dataclass
class AttentionProfile:
    layer: int
    bucket_centers: list[float]
    mean_attention: list[float]
    sample_counts: list[int]

    def __post_init__(self):
        if not (len(self.bucket_centers) == len(self.mean_attention) == len(self.sample_counts)):
            raise ValueError("profile lists must have equal length")

    def arrays(self, min_count: int = 1):
        x = np.asarray(self.bucket_centers, dtype=np.float64)
        y = np.asarray(self.mean_attention, dtype=np.float64)
        w = np.asarray(self.sample_counts, dtype=np.float64)
        keep = w >= min_count
        return x[keep], y[keep], w[keep]

    def rows(self) -> list[dict]:
        return [
            {"bucket_center": c, "mean_attention": m, "sample_count": n}
            for c, m, n in zip(self.bucket_centers, self.mean_attention, self.sample_counts)
        ]


@dataclass
class GaussianFit:
    amplitude: float
    sigma: float
    offset: float
    rmse: float
    reliable: bool = True

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.amplitude * np.exp(-x * x / (2.0 * self.sigma**2)) + self.offset


# -- profiling ----------------------------------------------------------------


def _bucketize(dist: np.ndarray, values: np.ndarray, width: float, layer: int) -> AttentionProfile:
    keys = np.floor(dist / width + 0.5).astype(np.int64)
    if keys.size == 0:
        raise ValueError("no pairs to profile")
    counts = np.bincount(keys)
    sums = np.bincount(keys, weights=values)
    present = np.nonzero(counts)[0]
    if present.size == 0:
        raise ValueError("empty bucket set")
    return AttentionProfile(
        layer=layer,
        bucket_centers=[float(k * width) for k in present],
        mean_attention=[float(sums[k] / counts[k]) for k in present],
        sample_counts=[int(counts[k]) for k in present],
    )


def _off_diagonal(mats: np.ndarray) -> np.ndarray:
    L = mats.shape[-1]
    return mats[..., ~np.eye(L, dtype=bool)]


def attention_matrices(model, coords: np.ndarray, layer: int, isolate: bool = True, tokens=None,
                       coord_scale: float | None = None, token_id: int = 0) -> np.ndarray:
    """Per-structure (B, L, L) attention for ``layer``, averaged over heads.

    For the truncated model the last layer index returns its unnormalised
    single-head output; earlier indices return softmax attention of the full
    layers. ``isolate`` pins every non-spatial input of a masked-LM model
    (one token id, one position index) so only 3-D distance varies.
    """
    coords = np.asarray(coords, dtype=np.float64)
    scale = model.config.coord_scale if coord_scale is None else coord_scale
    x = augment_batch(coords, scale, False, None)
    record: list[np.ndarray] = []
    with no_grad():
        if isinstance(model, TruncatedDistanceModel):
            depth = model.config.n_layers
            if not 0 <= layer < depth:
                raise ValueError(f"layer must be in [0, {depth})")
            out = model(x, record)
            if layer == depth - 1:
                return out.data
            return record[layer].mean(axis=1)
        if isinstance(model, MaskedLMModel):
            depth = model.config.n_layers
            if not 0 <= layer < depth:
                raise ValueError(f"layer must be in [0, {depth})")
            b, L = coords.shape[:2]
            if isolate or tokens is None:
                tok = np.full((b, L), token_id, dtype=np.int64)
            else:
                tok = np.asarray(tokens, dtype=np.int64)
            positions = np.zeros(L, dtype=np.int64) if isolate else None
            model(tok, x, positions=positions, record=record)
            return record[layer].mean(axis=1)
    raise TypeError(f"cannot profile {type(model).__name__}")


def attention_vs_distance(model, clouds, layer: int, isolate: bool = True, tokens=None,
                          bucket_width: float = 1.0, batch: int = 256, **kw) -> AttentionProfile:
    """Mean attention per rounded pairwise distance (ordered pairs, no diagonal).

    Distances are measured on the coordinates as given (the model's own
    rescaling is applied internally), and rounded to the nearest multiple
    of ``bucket_width``.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    dists, vals = [], []
    for i in range(0, len(clouds), batch):
        chunk = clouds[i : i + batch]
        tok = None if tokens is None else np.asarray(tokens)[i : i + batch]
        att = attention_matrices(model, chunk, layer, isolate, tok, **kw)
        dists.append(_off_diagonal(pairwise_distances(chunk)).reshape(-1))
        vals.append(_off_diagonal(att).reshape(-1))
    return _bucketize(np.concatenate(dists), np.concatenate(vals), bucket_width, layer)


def spearman(profile: AttentionProfile, min_count: int = 5) -> float:
    x, y, _ = profile.arrays(min_count)
    if len(x) < 3:
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)


# -- Gaussian fitting ---------------------------------------------------------

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _linear_part(x, y, w, sigma):
    """Weighted least squares for (a, c) at fixed sigma; returns (a, c, sse)."""
    phi = np.exp(-x * x / (2.0 * sigma * sigma))
    sw = np.sqrt(w)
    A = np.stack([phi * sw, sw], axis=1)
    coef, *_ = np.linalg.lstsq(A, y * sw, rcond=None)
    r = A @ coef - y * sw
    return float(coef[0]), float(coef[1]), float(r @ r)


def fit_gaussian(profile: AttentionProfile, min_count: int = 5, grid: int = 241) -> GaussianFit:
    """Weighted fit of ``a exp(-x^2 / (2 sigma^2)) + c`` to a profile.

    A log-spaced sigma grid (relative to the largest distance) with the
    closed-form (a, c) solve at each point, then golden-section search on
    log sigma around the best grid point. Buckets with fewer than
    ``min_count`` samples are ignored.
    """
    x, y, w = profile.arrays(min_count)
    if len(x) < 4:
        raise ValueError(f"need at least 4 buckets with >= {min_count} samples, got {len(x)}")
    wsum = w.sum()
    mean = float((w * y).sum() / wsum)
    var = float((w * (y - mean) ** 2).sum() / wsum)
    xmax = float(np.max(np.abs(x))) or 1.0
    if var <= 1e-30 * max(mean * mean, 1e-300):
        return GaussianFit(0.0, xmax, mean, math.sqrt(var), reliable=False)

    # work in units of the largest distance so the fit is scale-free
    u = x / xmax
    logs = np.linspace(math.log(1e-3), math.log(1e3), grid)

    def f(s):
        return _linear_part(u, y, w, math.exp(s))[2]

    sse = np.array([f(s) for s in logs])
    i = int(np.argmin(sse))
    lo, hi = logs[max(i - 1, 0)], logs[min(i + 1, grid - 1)]
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(200):
        if hi - lo < 1e-6:
            break
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = f(d)
    # The objective is flat to rounding near its minimum, so comparisons
    # alone only locate it to ~sqrt(eps). Finish with parabolic steps over
    # well-separated points, whose vertex is insensitive to rounding.
    s_best = 0.5 * (lo + hi)
    # (The step shrinks to keep the cubic bias ~h^2 below the target.)
    for h in (1e-2, 1e-3, 1e-4, 1e-4):
        fm, f0, fp = f(s_best - h), f(s_best), f(s_best + h)
        curv = fp - 2 * f0 + fm
        if curv > 0:
            step = 0.5 * h * (fm - fp) / curv
            if abs(step) <= h:
                s_best += step
    best = min((logs[i], sse[i]), (s_best, f(s_best)), key=lambda t: t[1])
    sigma_u = math.exp(best[0])
    a, c0, s = _linear_part(u, y, w, sigma_u)
    sigma = sigma_u * xmax
    # a boundary optimum means the data never bends within range
    reliable = 0 < i < grid - 1
    return GaussianFit(a, sigma, c0, math.sqrt(s / wsum), reliable)


def constant_fit_rmse(profile: AttentionProfile, min_count: int = 5) -> float:
    x, y, w = profile.arrays(min_count)
    mean = (w * y).sum() / w.sum()
    return float(np.sqrt((w * (y - mean) ** 2).sum() / w.sum()))


# -- result files -------------------------------------------------------------


@dataclass
class Series:
    label: str
    x: list
    y: list
    style: str = "line"  # "line", "scatter" or "both"


@dataclass
class Chart:
    filename: str
    title: str
    xlabel: str
    ylabel: str
    series: list[Series] = field(default_factory=list)
    logx: bool = False
    logy: bool = False


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    columns: list[str] = []
    for row in rows:
        for k in row:
            if k not in columns:
                columns.append(k)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in columns])
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        conv = {}
        for k, v in row.items():
            try:
                conv[k] = int(v)
            except ValueError:
                try:
                    conv[k] = float(v)
                except ValueError:
                    conv[k] = {"True": True, "False": False}.get(v, v)
        out.append(conv)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_json(obj, path) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def render_svg(chart: Chart, path) -> Path:
    """Static, self-contained SVG; identical inputs give identical bytes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "distattn", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for s in chart.series:
            if s.style in ("scatter", "both"):
                ax.plot(s.x, s.y, "o", ms=3, label=s.label if s.style == "scatter" else None)
            if s.style in ("line", "both"):
                ax.plot(s.x, s.y, "-", lw=1.5, label=s.label)
        if chart.logx:
            ax.set_xscale("log")
        if chart.logy:
            ax.set_yscale("log")
        ax.set_title(chart.title)
        ax.set_xlabel(chart.xlabel)
        ax.set_ylabel(chart.ylabel)
        if any(s.label for s in chart.series):
            ax.legend(fontsize=8)
        fig.tight_layout()
        path = Path(path)
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        finally:
            plt.close(fig)
    return path


def profile_chart(profile: AttentionProfile, fit: GaussianFit | None = None, unit: str = "distance",
                  min_count: int = 5) -> Chart:
    x, y, _ = profile.arrays(min_count)
    series = [Series("mean attention", x.tolist(), y.tolist(), "scatter")]
    if fit is not None:
        grid = np.linspace(0.0, float(x.max()) if len(x) else 1.0, 200)
        series.append(Series(f"fit: sigma={fit.sigma:.4g}", grid.tolist(), fit(grid).tolist()))
    return Chart(f"profile_layer{profile.layer}.svg", f"Attention vs distance, layer {profile.layer}",
                 unit, "mean attention", series)


def emit_results(result, path, charts: list[Chart] | None = None, fit: GaussianFit | None = None) -> list[Path]:
    """Write a result to ``path`` (a directory) as CSV/JSON plus SVG charts.

    ``ExperimentResult`` -> ``config.json``, ``metrics.csv``, ``summary.json``
    and one SVG per chart. ``AttentionProfile`` -> ``profile_layer<k>.csv``
    and its SVG (with ``fit`` overlaid). ``GaussianFit`` -> ``fit.json``.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    written: list[Path] = []
    if isinstance(result, ExperimentResult):
        written.append(write_json(result.config, out / "config.json"))
        written.append(write_csv(result.metrics, out / "metrics.csv"))
        written.append(write_json({"name": result.name, "seed": result.seed, "summary": result.summary},
                                  out / "summary.json"))
    elif isinstance(result, AttentionProfile):
        written.append(write_csv(result.rows(), out / f"profile_layer{result.layer}.csv"))
        charts = (charts or []) + [profile_chart(result, fit)]
    elif isinstance(result, GaussianFit):
        written.append(write_json(asdict(result), out / "fit.json"))
    else:
        raise TypeError(f"cannot emit {type(result).__name__}")
    for chart in charts or []:
        written.append(render_svg(chart, out / chart.filename))
    return written
