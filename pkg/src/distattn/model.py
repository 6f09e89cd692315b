"""Pre-norm transformer encoder and the two model heads built on it.

``TruncatedDistanceModel`` embeds raw coordinates with one affine map, runs
``n_layers - 1`` full pre-norm encoder layers, applies the final LayerNorm
and stops after the query/key maps of a single head in the last layer. Its
output is that head's unnormalised attention matrix.

``MaskedLMModel`` is a conventional token encoder with sinusoidal positions
and an optional coordinate embedding added to the token embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_layers: int = 3
    d_model: int = 256
    n_heads: int = 8
    d_ff: int = 1024
    activation: str = "relu"
    head_dim_truncated: int = 32
    spatial_dim: int = 3
    vocab_size: int | None = None
    use_sinusoidal_pe: bool = False
    coord_scale: float = 1.0 / 16.0
    with_coords: bool = True
    ln_eps: float = 1e-5
    # "head": divide scores by sqrt(head width); "model": by sqrt(d_model)
    score_scale: str = "head"
    logit_clamp: float = 30.0

    def validate(self, truncated: bool = True) -> None:
        if self.d_model < 1 or self.d_ff < 1 or self.n_heads < 1:
            raise ValueError("d_model, d_ff and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.activation.lower() not in ("relu", "gelu", "reglu", "swiglu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.score_scale not in ("head", "model"):
            raise ValueError(f"score_scale must be 'head' or 'model', got {self.score_scale!r}")
        if truncated:
            if self.n_layers < 1:
                raise ValueError("truncated model needs n_layers >= 1")
            if self.head_dim_truncated < 1:
                raise ValueError("head_dim_truncated must be >= 1")
            if self.spatial_dim < 1:
                raise ValueError("spatial_dim must be >= 1")
        else:
            if self.vocab_size is None or self.vocab_size < 2:
                raise ValueError("masked-LM model needs vocab_size >= 2")
            if self.use_sinusoidal_pe and self.d_model % 2:
                raise ValueError("sinusoidal encoding needs an even d_model")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


def simulated_default() -> ModelConfig:
    """Architecture of the simulated-points experiments at full size."""
    return ModelConfig()


# -- modules ------------------------------------------------------------------


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        bound = math.sqrt(1.0 / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self._eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self._h = n_heads
        self._hd = d_model // n_heads

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self._h, self._hd).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, record: list | None = None) -> Tensor:
        b, n, d = x.shape
        q, k, v = self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self._hd))
        attn = T.softmax(scores)
        if record is not None:
            record.append(attn.data)
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, kind: str, rng: np.random.Generator):
        width = 2 * d_ff if T.is_gated(kind) else d_ff
        self.up = Linear(d_model, width, rng)
        self.down = Linear(d_ff, d_model, rng)
        self._kind = kind

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.activation(self.up(x), self._kind))


class EncoderLayer(Module):
    """x + Attn(LN(x)), then x + FF(LN(x))."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.ln_attn = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln_ff = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.activation, rng)

    def __call__(self, x: Tensor, record: list | None = None) -> Tensor:
        x = x + self.attn(self.ln_attn(x), record)
        return x + self.ff(self.ln_ff(x))


def sinusoidal_pe(length: int, d_model: int) -> np.ndarray:
    """Interleaved sin/cos positional encoding with wavelength base 10,000."""
    if d_model % 2:
        raise ValueError(f"sinusoidal encoding needs an even d_model, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


class _Model(Module):
    config: ModelConfig
    kind = "base"

    def flatten(self) -> None:
        """Move every parameter (and its grad) into one contiguous buffer.

        Afterwards ``self.theta`` and ``self.grad`` are flat float64 arrays
        whose slices back each parameter, so optimisers can update in one shot.
        """
        params = self.parameters()
        total = sum(p.size for p in params)
        theta = np.empty(total)
        grad = np.zeros(total)
        off = 0
        for p in params:
            n = p.size
            theta[off : off + n] = p.data.reshape(-1)
            p.data = theta[off : off + n].reshape(p.shape)
            p.grad = grad[off : off + n].reshape(p.shape)
            off += n
        self._theta = theta
        self._grad = grad

    @property
    def theta(self) -> np.ndarray:
        return self._theta

    @property
    def grad(self) -> np.ndarray:
        return self._grad

    def zero_grad(self) -> None:
        self._grad.fill(0.0)

    def parameter_table(self) -> list[tuple[str, tuple]]:
        return [(name, p.shape) for name, p in self.named_parameters()]


class TruncatedDistanceModel(_Model):
    kind = "truncated"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate(truncated=True)
        self.config = cfg
        self.coord_embed = Linear(cfg.spatial_dim, cfg.d_model, rng)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers - 1)]
        self.final_ln = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.q = Linear(cfg.d_model, cfg.head_dim_truncated, rng)
        self.k = Linear(cfg.d_model, cfg.head_dim_truncated, rng)
        self.flatten()

    def _scale(self) -> float:
        c = self.config
        return math.sqrt(c.head_dim_truncated if c.score_scale == "head" else c.d_model)

    def logits(self, coords, record: list | None = None) -> Tensor:
        x = np.asarray(coords, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.shape[1] < 2:
            raise ValueError(f"need at least 2 points, got {x.shape[1]}")
        if x.shape[2] != self.config.spatial_dim:
            raise ValueError(f"expected {self.config.spatial_dim}-d points, got {x.shape[2]}")
        h = self.coord_embed(Tensor(x, copy=False))
        for layer in self.layers:
            h = layer(h, record)
        h = self.final_ln(h)
        q, k = self.q(h), self.k(h)
        s = T.matmul(q, k.transpose(0, 2, 1)) * (1.0 / self._scale())
        return s[0] if squeeze else s

    def __call__(self, coords, record: list | None = None) -> Tensor:
        lim = self.config.logit_clamp
        return T.exp(T.clamp(self.logits(coords, record), -lim, lim))


def forward_truncated(model: TruncatedDistanceModel, coords) -> Tensor:
    """Unnormalised single-head attention, shape (L, L) or (B, L, L)."""
    return model(coords)


class MaskedLMModel(_Model):
    kind = "masked_lm"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate(truncated=False)
        self.config = cfg
        self.token_embed = Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.d_model)), requires_grad=True)
        if cfg.with_coords:
            self.coord_embed = Linear(cfg.spatial_dim, cfg.d_model, rng)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_ln = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.out = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.flatten()

    def __call__(self, tokens, coords=None, positions=None, record: list | None = None) -> Tensor:
        """Vocabulary logits for every position.

        ``positions`` overrides the 0..L-1 index fed to the positional
        encoding (used to pin all tokens to one index when profiling).
        """
        ids = np.asarray(tokens, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        cfg = self.config
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        b, n = ids.shape
        h = T.embedding(self.token_embed, ids)
        if coords is not None and cfg.with_coords:
            x = np.asarray(coords, dtype=np.float64)
            if x.ndim == 2:
                x = x[None]
            if x.shape[:2] != (b, n):
                raise ValueError("coords must have one point per token")
            h = h + self.coord_embed(Tensor(x, copy=False))
        if cfg.use_sinusoidal_pe:
            if positions is None:
                pe = sinusoidal_pe(n, cfg.d_model)
            else:
                pos = np.asarray(positions, dtype=np.int64)
                table = sinusoidal_pe(int(pos.max()) + 1, cfg.d_model)
                pe = table[pos]
            h = h + pe
        for layer in self.layers:
            h = layer(h, record)
        logits = self.out(self.final_ln(h))
        return logits[0] if squeeze else logits


def forward_masked_lm(model: MaskedLMModel, tokens, coords=None) -> Tensor:
    return model(tokens, coords)


def build(config: ModelConfig, rng: np.random.Generator, kind: str = "truncated") -> _Model:
    if kind == "truncated":
        return TruncatedDistanceModel(config, rng)
    if kind == "masked_lm":
        return MaskedLMModel(config, rng)
    raise ValueError(f"unknown model kind {kind!r}")


# -- parameter accounting -----------------------------------------------------


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def _affine(i: int, o: int) -> int:
    return i * o + o


def layer_parameter_count(cfg: ModelConfig) -> int:
    d, f = cfg.d_model, cfg.d_ff
    up = 2 * f if T.is_gated(cfg.activation) else f
    return 4 * _affine(d, d) + _affine(d, up) + _affine(f, d) + 2 * (2 * d)


def expected_parameter_count(cfg: ModelConfig, kind: str = "truncated") -> int:
    """Closed-form count, independent of any built model."""
    d = cfg.d_model
    if kind == "truncated":
        return (
            _affine(cfg.spatial_dim, d)
            + (cfg.n_layers - 1) * layer_parameter_count(cfg)
            + 2 * d
            + 2 * _affine(d, cfg.head_dim_truncated)
        )
    coords = _affine(cfg.spatial_dim, d) if cfg.with_coords else 0
    v = cfg.vocab_size
    return v * d + coords + cfg.n_layers * layer_parameter_count(cfg) + 2 * d + _affine(d, v)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(model: _Model, path) -> Path:
    """Write config, kind and the flat parameter vector to a ``.npz`` file.

    Parameters are stored in ``named_parameters`` order; the order is also
    written out as ``names``/``shapes`` so the file is self-describing.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = model.parameter_table()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": asdict(model.config),
        "names": [n for n, _ in table],
        "shapes": [list(s) for _, s in table],
    }
    with open(path, "wb") as fh:
        np.savez(fh, manifest=np.array(json.dumps(manifest, sort_keys=True)), theta=model.theta)
    return path


def load_checkpoint(path) -> _Model:
    with np.load(Path(path), allow_pickle=False) as z:
        manifest = json.loads(str(z["manifest"]))
        theta = np.array(z["theta"])
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    cfg = ModelConfig.from_dict(manifest["config"])
    model = build(cfg, T.make_rng(0), manifest["kind"])
    if model.theta.shape != theta.shape:
        raise ValueError("checkpoint parameter vector does not match its config")
    model.theta[:] = theta
    return model
