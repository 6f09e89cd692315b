"""Losses, Adam, learning-rate schedules, masking and the two training loops."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .geometry import augment_batch, pairwise_distances, target_matrix
from .model import MaskedLMModel, ModelConfig, TruncatedDistanceModel
from .results import ExperimentResult
from .tensor import Tensor, make_rng, no_grad

log = logging.getLogger(__name__)

# substream keys passed to make_rng(seed, key)
_SPLIT, _INIT, _SHUFFLE, _AUGMENT, _EVAL, _MASK = range(6)


@dataclass
class TrainConfig:
    batch_size: int = 16
    peak_lr: float = 4e-4
    warmup_steps: int = 4000
    decay: str = "quadratic"  # or "inverse_square"
    total_steps: int | None = None
    epochs: int | None = None
    seed: int = 0
    val_fraction: float = 0.1
    rotate_augment: bool = True
    coord_scale: float = 1.0 / 16.0
    # epochs averaged for the reported "final" losses
    rolling_window: int = 5

    def validate(self) -> None:
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay not in ("quadratic", "inverse_square"):
            raise ValueError(f"unknown decay {self.decay!r}")
        if self.total_steps is None and self.epochs is None:
            raise ValueError("set total_steps or epochs")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.coord_scale <= 0:
            raise ValueError("coord_scale must be positive")


@dataclass
class MaskingSpec:
    mask_rate: float = 0.15
    mask_token_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    mask_token_id: int = 8
    # random replacements are drawn from ids 0..n_real_tokens-1
    n_real_tokens: int = 8

    def validate(self) -> None:
        if not 0 <= self.mask_rate < 1:
            raise ValueError("mask_rate must be in [0, 1)")
        total = self.mask_token_frac + self.random_frac + self.keep_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"masking fractions sum to {total}, not 1")


@dataclass
class SyntheticChainSpec:
    chain_length: int = 64
    step_length: float = 3.8
    vocab_size: int = 8
    neighbor_radius: float = 12.0
    # neighbour counts are binned in runs of this width before capping
    count_bin: int = 3
    label_noise: float = 0.1
    count: int = 1000
    max_retries: int = 200

    def validate(self) -> None:
        if self.step_length <= 0:
            raise ValueError("step_length must be positive")
        if self.neighbor_radius <= self.step_length:
            raise ValueError("neighbor_radius must exceed step_length")
        if not 0 <= self.label_noise <= 1:
            raise ValueError("label_noise must be in [0, 1]")
        if self.count_bin < 1:
            raise ValueError("count_bin must be >= 1")


# -- losses, schedule, optimiser ----------------------------------------------


def l1_attention_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute entry difference, diagonal included."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return T.mean(T.tabs(pred - target))


def lr_at_step(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warm-up to ``peak_lr`` over ``warmup_steps``, then decay."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    w, peak = cfg.warmup_steps, cfg.peak_lr
    if step <= w:
        return peak * (step / w)
    if cfg.decay == "inverse_square":
        return peak * (w / step) ** 2
    total = total_steps if total_steps is not None else cfg.total_steps
    if total is None:
        raise ValueError("quadratic decay needs a total step count")
    if step >= total:
        return 0.0
    return peak * (1.0 - (step - w) / (total - w)) ** 2


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of the flat ``params`` array, in place."""
    if params.shape != state.m.shape or grads.shape != params.shape:
        raise ValueError("optimizer state does not match parameters")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError(f"non-finite gradient at Adam step {state.t + 1}")
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _total_steps(cfg: TrainConfig, steps_per_epoch: int) -> int:
    if cfg.total_steps is not None:
        return int(cfg.total_steps)
    return int(cfg.epochs) * steps_per_epoch


def _rolling(values: list[float], window: int) -> float:
    tail = [v for v in values[-window:] if v is not None]
    return float(np.mean(tail)) if tail else float("nan")


# -- simulated-points task ----------------------------------------------------


def evaluate_truncated(model: TruncatedDistanceModel, clouds: np.ndarray, p: float, s: float,
                       scale: float, rotate: bool, rng: np.random.Generator, batch: int = 512) -> float:
    total = 0.0
    with no_grad():
        for i in range(0, len(clouds), batch):
            raw = clouds[i : i + batch]
            x = augment_batch(raw, scale, rotate, rng)
            pred = model(x).data
            total += np.abs(pred - target_matrix(raw, p, s)).mean(axis=(1, 2)).sum()
    return float(total / len(clouds))


def constant_baseline(clouds: np.ndarray, p: float, s: float) -> float:
    """l1 loss of the best input-independent matrix (entrywise median)."""
    t = target_matrix(clouds, p, s)
    return float(np.abs(t - np.median(t, axis=0)).mean())


def train_truncated(cfg: TrainConfig, model_cfg: ModelConfig, clouds: np.ndarray, p: float, s: float,
                    val_clouds: np.ndarray | None = None, name: str = "train_truncated") -> ExperimentResult:
    """Fit the truncated model's output to exp(-(d/s)^p).

    Targets come from the original coordinates; the model only ever sees
    recentred, (optionally) rotated and rescaled copies. Validation uses
    the held-out split of ``clouds`` unless ``val_clouds`` is given.
    """
    cfg.validate()
    started = time.perf_counter()
    clouds = np.asarray(clouds, dtype=np.float64)
    if val_clouds is None:
        tr, va = split_indices(len(clouds), cfg.val_fraction, make_rng(cfg.seed, _SPLIT))
        train, val = clouds[tr], clouds[va]
    else:
        train, val = clouds, np.asarray(val_clouds, dtype=np.float64)
    if len(val) == 0:
        raise ValueError("validation set is empty")

    model_cfg = replace(model_cfg, coord_scale=cfg.coord_scale)
    model = TruncatedDistanceModel(model_cfg, make_rng(cfg.seed, _INIT))
    state = AdamState.zeros(model.theta.size)
    shuffle_rng = make_rng(cfg.seed, _SHUFFLE)
    aug_rng = make_rng(cfg.seed, _AUGMENT)
    bs = cfg.batch_size
    steps_per_epoch = math.ceil(len(train) / bs)
    total = _total_steps(cfg, steps_per_epoch)

    rows: list[dict] = []
    best_val, best_theta, best_epoch = math.inf, model.theta.copy(), 0
    step = epoch = 0
    while step < total:
        order = shuffle_rng.permutation(len(train))
        loss_sum, seen = 0.0, 0
        for start in range(0, len(train), bs):
            raw = train[order[start : start + bs]]
            x = augment_batch(raw, cfg.coord_scale, cfg.rotate_augment, aug_rng)
            model.zero_grad()
            loss = l1_attention_loss(model(x), target_matrix(raw, p, s))
            T.backward(loss)
            step += 1
            lr = lr_at_step(step, cfg, total)
            adam_step(model.theta, model.grad, state, lr)
            loss_sum += loss.item() * len(raw)
            seen += len(raw)
            if step >= total:
                break
        epoch += 1
        val_loss = evaluate_truncated(model, val, p, s, cfg.coord_scale, cfg.rotate_augment, make_rng(cfg.seed, _EVAL))
        rows.append({"epoch": epoch, "step": step, "lr": lr, "train_loss": loss_sum / seen, "val_loss": val_loss})
        if val_loss < best_val:
            best_val, best_theta, best_epoch = val_loss, model.theta.copy(), epoch

    w = cfg.rolling_window
    final_train = _rolling([r["train_loss"] for r in rows], w)
    final_val = _rolling([r["val_loss"] for r in rows], w)
    summary = {
        "p": p,
        "s": s,
        "epochs": epoch,
        "steps": step,
        "n_train": len(train),
        "n_val": len(val),
        "final_train_loss": final_train,
        "final_val_loss": final_val,
        "final_gap": abs(final_train - final_val),
        "last_val_loss": rows[-1]["val_loss"],
        "best_val_loss": best_val,
        "best_epoch": best_epoch,
        "constant_baseline": constant_baseline(val, p, s),
    }
    log.info("%s p=%g: val %.5f (baseline %.5f)", name, p, final_val, summary["constant_baseline"])
    return ExperimentResult(
        name=name,
        config={"train": asdict(cfg), "model": asdict(model_cfg), "p": p, "s": s},
        seed=cfg.seed,
        metrics=rows,
        summary=summary,
        wall_clock=time.perf_counter() - started,
        artifacts={"model": model, "best_theta": best_theta, "val_clouds": val, "train_clouds": train},
    )


# -- masked-token task --------------------------------------------------------


def apply_masking(tokens, spec: MaskingSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style corruption: returns (corrupted tokens, boolean loss mask).

    Each position is selected with probability ``mask_rate``; selected
    positions become the mask token, a random real token, or stay as they
    are in the proportions given by ``spec``. All selected positions,
    including unchanged ones, are in the loss mask.
    """
    spec.validate()
    tokens = np.asarray(tokens, dtype=np.int64)
    selected = rng.random(tokens.shape) < spec.mask_rate
    u = rng.random(tokens.shape)
    random_ids = rng.integers(0, spec.n_real_tokens, size=tokens.shape)
    out = tokens.copy()
    to_mask = selected & (u < spec.mask_token_frac)
    to_random = selected & (u >= spec.mask_token_frac) & (u < spec.mask_token_frac + spec.random_frac)
    out[to_mask] = spec.mask_token_id
    out[to_random] = random_ids[to_random]
    return out, selected


def _self_avoiding_walk(spec: SyntheticChainSpec, rng: np.random.Generator) -> np.ndarray | None:
    step, min_d = spec.step_length, 0.8 * spec.step_length
    pts = np.zeros((spec.chain_length, 3))
    for i in range(1, spec.chain_length):
        for _ in range(spec.max_retries):
            v = rng.standard_normal(3)
            cand = pts[i - 1] + v * (step / np.linalg.norm(v))
            if np.min(np.linalg.norm(pts[:i] - cand, axis=1)) >= min_d:
                pts[i] = cand
                break
        else:
            return None
    return pts


def neighbor_counts(points: np.ndarray, radius: float) -> np.ndarray:
    """Per point, the number of points closer than ``radius`` that are not chain-adjacent."""
    d = pairwise_distances(points)
    idx = np.arange(points.shape[-2])
    far = np.abs(idx[:, None] - idx[None, :]) > 1
    return ((d < radius) & far).sum(axis=-1)


def chain_labels(points: np.ndarray, spec: SyntheticChainSpec) -> np.ndarray:
    """Noise-free labels: binned neighbour count, with the top class absorbing the tail."""
    return np.minimum(neighbor_counts(points, spec.neighbor_radius) // spec.count_bin, spec.vocab_size - 1)


def generate_synthetic_chains(spec: SyntheticChainSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Self-avoiding 3-D walks with structure-determined token labels.

    Returns ``(tokens, coords)`` with shapes (count, L) and (count, L, 3).
    """
    spec.validate()
    coords = np.empty((spec.count, spec.chain_length, 3))
    for c in range(spec.count):
        for _ in range(spec.max_retries):
            walk = _self_avoiding_walk(spec, rng)
            if walk is not None:
                break
        else:
            raise RuntimeError(f"self-avoiding walk failed after {spec.max_retries} restarts")
        coords[c] = walk
    labels = chain_labels(coords, spec)
    flip = rng.random(labels.shape) < spec.label_noise
    labels = np.where(flip, rng.integers(0, spec.vocab_size, size=labels.shape), labels)
    return labels.astype(np.int64), coords


def _masked_eval(model: MaskedLMModel, tokens, coords, spec: MaskingSpec, scale: float,
                 rng: np.random.Generator, with_coords: bool, batch: int = 64) -> dict:
    """Cross-entropy and recovery over all selected positions, plus the
    cross-entropy over the subset whose input was replaced by the mask token
    (there the input itself carries no hint of the answer)."""
    ce_sum = correct = count = 0.0
    ce_mask_sum = mask_count = 0.0
    per_class_hit = np.zeros(spec.n_real_tokens)
    per_class_n = np.zeros(spec.n_real_tokens)
    with no_grad():
        for i in range(0, len(tokens), batch):
            tok = tokens[i : i + batch]
            corrupted, sel = apply_masking(tok, spec, rng)
            x = augment_batch(coords[i : i + batch], scale, True, rng) if with_coords else None
            logits = model(corrupted, x).data
            shifted = logits - logits.max(axis=-1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            picked = np.take_along_axis(logp, tok[..., None], axis=-1)[..., 0]
            hit = logits.argmax(axis=-1) == tok
            masked = sel & (corrupted == spec.mask_token_id)
            ce_sum += -(picked[sel]).sum()
            ce_mask_sum += -(picked[masked]).sum()
            correct += hit[sel].sum()
            count += sel.sum()
            mask_count += masked.sum()
            np.add.at(per_class_n, tok[sel], 1)
            np.add.at(per_class_hit, tok[sel], hit[sel])
    return {
        "ce": float(ce_sum / max(count, 1)),
        "ce_mask": float(ce_mask_sum / max(mask_count, 1)),
        "recovery": float(correct / max(count, 1)),
        "per_class_recovery": (per_class_hit / np.maximum(per_class_n, 1)).tolist(),
    }


def uninformative_ce_floor(vocab: int, spec: MaskingSpec | None = None) -> float:
    """Best achievable cross-entropy over all selected positions when labels
    carry no information, given that kept tokens stay visible.

    At a selected position whose input is a real token v, the answer is v
    with probability (keep + random/V) / (keep + random); elsewhere it is
    uniform. Mask-token positions cost ln V.
    """
    spec = spec or MaskingSpec()
    shown = spec.keep_frac + spec.random_frac
    if shown == 0:
        return math.log(vocab)
    p_same = (spec.keep_frac + spec.random_frac / vocab) / shown
    p_other = (1.0 - p_same) / (vocab - 1)
    h_shown = -(p_same * math.log(p_same) + (vocab - 1) * p_other * math.log(p_other)) if p_other > 0 else 0.0
    return spec.mask_token_frac * math.log(vocab) + shown * h_shown


def train_masked(cfg: TrainConfig, model_cfg: ModelConfig, chains: tuple[np.ndarray, np.ndarray],
                 with_coords: bool, masking: MaskingSpec | None = None,
                 name: str = "train_masked") -> ExperimentResult:
    """Masked-token training on ``(tokens, coords)`` chains, split by chain."""
    cfg.validate()
    started = time.perf_counter()
    tokens, coords = chains
    tokens = np.asarray(tokens, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.float64)
    n_real = int(model_cfg.vocab_size) - 1
    masking = masking or MaskingSpec(mask_token_id=n_real, n_real_tokens=n_real)

    mcfg = replace(model_cfg, with_coords=with_coords, coord_scale=cfg.coord_scale)
    model = MaskedLMModel(mcfg, make_rng(cfg.seed, _INIT))
    tr, va = split_indices(len(tokens), cfg.val_fraction, make_rng(cfg.seed, _SPLIT))
    state = AdamState.zeros(model.theta.size)
    shuffle_rng = make_rng(cfg.seed, _SHUFFLE)
    aug_rng = make_rng(cfg.seed, _AUGMENT)
    mask_rng = make_rng(cfg.seed, _MASK)
    bs = cfg.batch_size
    steps_per_epoch = math.ceil(len(tr) / bs)
    total = _total_steps(cfg, steps_per_epoch)

    rows: list[dict] = []
    step = epoch = 0
    while step < total:
        order = tr[shuffle_rng.permutation(len(tr))]
        loss_sum = weight = 0.0
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            corrupted, sel = apply_masking(tokens[idx], masking, mask_rng)
            x = augment_batch(coords[idx], cfg.coord_scale, cfg.rotate_augment, aug_rng) if with_coords else None
            model.zero_grad()
            if not sel.any():
                continue
            loss = T.cross_entropy(model(corrupted, x), tokens[idx], sel)
            T.backward(loss)
            step += 1
            lr = lr_at_step(step, cfg, total)
            adam_step(model.theta, model.grad, state, lr)
            loss_sum += loss.item() * sel.sum()
            weight += sel.sum()
            if step >= total:
                break
        epoch += 1
        ev = _masked_eval(model, tokens[va], coords[va], masking, cfg.coord_scale,
                          make_rng(cfg.seed, _EVAL), with_coords)
        rows.append({
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "train_ce": loss_sum / max(weight, 1),
            "val_ce": ev["ce"],
            "val_ce_mask": ev["ce_mask"],
            "val_recovery": ev["recovery"],
        })

    w = cfg.rolling_window
    summary = {
        "with_coords": with_coords,
        "epochs": epoch,
        "steps": step,
        "final_train_ce": _rolling([r["train_ce"] for r in rows], w),
        "final_val_ce": _rolling([r["val_ce"] for r in rows], w),
        "final_val_ce_mask": _rolling([r["val_ce_mask"] for r in rows], w),
        "final_val_recovery": _rolling([r["val_recovery"] for r in rows], w),
        "per_class_recovery": ev["per_class_recovery"],
        "n_parameters": int(model.theta.size),
    }
    log.info("%s coords=%s: val ce %.4f", name, with_coords, summary["final_val_ce"])
    return ExperimentResult(
        name=name,
        config={"train": asdict(cfg), "model": asdict(mcfg), "masking": asdict(masking)},
        seed=cfg.seed,
        metrics=rows,
        summary=summary,
        wall_clock=time.perf_counter() - started,
        artifacts={"model": model, "val_index": va},
    )
