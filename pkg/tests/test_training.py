import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distattn import tensor as T
from distattn.geometry import generate_clouds, pairwise_distances
from distattn.model import ModelConfig
from distattn.tensor import Tensor, finite_diff_check, make_rng
from distattn.training import (
    AdamState,
    MaskingSpec,
    SyntheticChainSpec,
    TrainConfig,
    adam_step,
    apply_masking,
    chain_labels,
    constant_baseline,
    generate_synthetic_chains,
    l1_attention_loss,
    lr_at_step,
    neighbor_counts,
    split_indices,
    train_masked,
    train_truncated,
    uninformative_ce_floor,
)

TINY_MODEL = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, head_dim_truncated=5)


# -- loss ------------------------------------------------------------------------


def test_l1_zero_and_offset():
    t = np.random.default_rng(0).uniform(size=(4, 4))
    assert l1_attention_loss(Tensor(t), t).item() == 0.0
    assert l1_attention_loss(Tensor(t + 0.5), t).item() == pytest.approx(0.5, abs=1e-15)


def test_l1_shape_mismatch():
    with pytest.raises(ValueError):
        l1_attention_loss(Tensor(np.zeros((3, 3))), np.zeros((3, 4)))


def test_l1_subgradient_is_sign_over_l_squared():
    rng = np.random.default_rng(1)
    target = rng.uniform(size=(5, 5))
    pred = Tensor(target + rng.choice([-1, 1], size=(5, 5)) * rng.uniform(0.1, 0.5, size=(5, 5)), requires_grad=True)
    T.backward(l1_attention_loss(pred, target))
    np.testing.assert_allclose(pred.grad, np.sign(pred.data - target) / 25, atol=1e-17)
    pred2 = Tensor(pred.data.copy(), requires_grad=True)
    assert finite_diff_check(lambda p: l1_attention_loss(p, target), pred2) < 1e-8


# -- schedule ------------------------------------------------------------------------


def test_lr_default_schedule():
    cfg = TrainConfig(total_steps=100_000)
    assert lr_at_step(4000, cfg) == pytest.approx(4e-4, abs=1e-20)
    assert lr_at_step(2000, cfg) == pytest.approx(2e-4, abs=1e-20)


def test_lr_inverse_square():
    cfg = TrainConfig(decay="inverse_square", total_steps=10)
    assert lr_at_step(8000, cfg) == pytest.approx(1e-4, rel=1e-14)


def test_lr_quadratic_reaches_zero():
    cfg = TrainConfig(warmup_steps=10, total_steps=110)
    assert lr_at_step(60, cfg) == pytest.approx(cfg.peak_lr * 0.25, rel=1e-14)
    assert lr_at_step(110, cfg) == 0.0
    assert lr_at_step(500, cfg) == 0.0


@given(st.integers(1, 5000), st.sampled_from(["quadratic", "inverse_square"]))
def test_lr_continuous_at_peak_and_bounded(w, decay):
    cfg = TrainConfig(warmup_steps=w, total_steps=3 * w + 2, decay=decay)
    assert lr_at_step(w, cfg) == cfg.peak_lr
    assert lr_at_step(w + 1, cfg) == pytest.approx(cfg.peak_lr, rel=3.0 / w + 1e-12)
    assert all(0 <= lr_at_step(s, cfg) <= cfg.peak_lr for s in (1, w, w + 1, 2 * w, 3 * w + 2))


def test_lr_rejects_step_zero():
    with pytest.raises(ValueError):
        lr_at_step(0, TrainConfig(total_steps=10))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=0, total_steps=5).validate()
    with pytest.raises(ValueError):
        TrainConfig(peak_lr=0.0, total_steps=5).validate()
    with pytest.raises(ValueError):
        TrainConfig().validate()
    with pytest.raises(ValueError):
        MaskingSpec(keep_frac=0.2).validate()
    with pytest.raises(ValueError):
        SyntheticChainSpec(neighbor_radius=3.0).validate()
    with pytest.raises(ValueError):
        SyntheticChainSpec(count_bin=0).validate()


# -- Adam ----------------------------------------------------------------------------------


def test_adam_first_step_is_lr_sign():
    g = np.array([0.3, -2.0, 1e-3])
    p = np.zeros(3)
    adam_step(p, g, AdamState.zeros(3), 0.01)
    np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_zero_grad_zero_update():
    p = np.ones(4)
    adam_step(p, np.zeros(4), AdamState.zeros(4), 0.1)
    np.testing.assert_array_equal(p, np.ones(4))


def test_adam_convex_quadratic():
    rng = np.random.default_rng(0)
    a = np.diag(rng.uniform(0.5, 2.0, 6))
    p = rng.normal(size=6) * 3
    loss0 = 0.5 * p @ a @ p
    state = AdamState.zeros(6)
    for _ in range(200):
        adam_step(p, a @ p, state, 0.1)
    assert 0.5 * p @ a @ p <= loss0 / 100


def test_adam_rejects_non_finite():
    state = AdamState.zeros(2)
    with pytest.raises(FloatingPointError):
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), state, 0.1)
    assert state.t == 0


# -- masking ------------------------------------------------------------------------------------


def test_masking_statistics():
    spec = MaskingSpec()
    tokens = make_rng(0).integers(0, 8, size=100_000)
    out, sel = apply_masking(tokens, spec, make_rng(1))
    frac = sel.mean()
    assert abs(frac - 0.15) <= 0.005
    mask_share = (out[sel] == spec.mask_token_id).mean()
    assert abs(mask_share - 0.80) <= 0.01
    # unselected positions are untouched
    np.testing.assert_array_equal(out[~sel], tokens[~sel])


def test_masking_rate_zero():
    tokens = np.arange(8).repeat(4)
    out, sel = apply_masking(tokens, replace(MaskingSpec(), mask_rate=0.0), make_rng(0))
    np.testing.assert_array_equal(out, tokens)
    assert not sel.any()


def test_kept_positions_are_in_loss_mask():
    spec = MaskingSpec(mask_rate=0.5, mask_token_frac=0.0, random_frac=0.0, keep_frac=1.0)
    tokens = make_rng(0).integers(0, 8, size=1000)
    out, sel = apply_masking(tokens, spec, make_rng(3))
    np.testing.assert_array_equal(out, tokens)
    assert 400 < sel.sum() < 600


def test_uninformative_floor_matches_plug_in_estimate():
    """Oracle: plug-in conditional entropy of the label given the corrupted
    input, on uniform labels, over selected positions only."""
    spec = MaskingSpec()
    tokens = make_rng(0).integers(0, 8, size=1_000_000)
    out, sel = apply_masking(tokens, spec, make_rng(1))
    x, y = out[sel], tokens[sel]
    joint = np.zeros((9, 8))
    np.add.at(joint, (x, y), 1)
    joint /= joint.sum()
    cond = joint / joint.sum(1, keepdims=True)
    nz = joint > 0
    h = -(joint[nz] * np.log(cond[nz])).sum()
    assert uninformative_ce_floor(8, spec) == pytest.approx(h, abs=5e-3)
    assert uninformative_ce_floor(8, spec) < math.log(8)


def test_uninformative_floor_without_visible_tokens_is_log_v():
    spec = MaskingSpec(mask_token_frac=1.0, random_frac=0.0, keep_frac=0.0)
    assert uninformative_ce_floor(8, spec) == math.log(8)


# -- synthetic chains ----------------------------------------------------------------------------


def test_chain_geometry():
    spec = SyntheticChainSpec(count=20)
    tokens, coords = generate_synthetic_chains(spec, make_rng(0))
    assert tokens.shape == (20, 64) and coords.shape == (20, 64, 3)
    steps = np.linalg.norm(np.diff(coords, axis=1), axis=-1)
    np.testing.assert_allclose(steps, 3.8, atol=1e-9)
    d = pairwise_distances(coords)
    off = ~np.eye(64, dtype=bool)
    assert d[:, off].min() >= 0.8 * 3.8 - 1e-12
    assert tokens.min() >= 0 and tokens.max() < 8


@pytest.mark.parametrize("radius, width", [(12.0, 3), (6.0, 1)])
def test_noise_free_labels_follow_neighbour_counts(radius, width):
    spec = SyntheticChainSpec(count=5, label_noise=0.0, neighbor_radius=radius, count_bin=width)
    tokens, coords = generate_synthetic_chains(spec, make_rng(1))
    for t, c in zip(tokens, coords):
        # oracle: brute-force loop over pairs
        counts = [sum(1 for j in range(64) if abs(i - j) > 1 and np.linalg.norm(c[i] - c[j]) < radius)
                  for i in range(64)]
        np.testing.assert_array_equal(t, np.minimum([k // width for k in counts], 7))
        np.testing.assert_array_equal(neighbor_counts(c, radius), counts)
        np.testing.assert_array_equal(chain_labels(c, spec), t)


def test_full_noise_labels_are_uniform():
    spec = SyntheticChainSpec(count=200, label_noise=1.0)
    tokens, _ = generate_synthetic_chains(spec, make_rng(2))
    freq = np.bincount(tokens.ravel(), minlength=8) / tokens.size
    # binomial standard error of each class frequency is about 0.0033
    assert np.all(np.abs(freq - 1 / 8) < 0.015)


def _mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def test_labels_depend_on_structure_more_than_position():
    spec = SyntheticChainSpec(count=10_000, chain_length=16)
    tokens, coords = generate_synthetic_chains(spec, make_rng(4))
    counts = np.stack([neighbor_counts(c, spec.neighbor_radius) for c in coords])
    index = np.broadcast_to(np.arange(16), tokens.shape)
    mi_count = _mutual_information(tokens.ravel(), np.minimum(counts, 20).ravel())
    mi_index = _mutual_information(tokens.ravel(), index.ravel())
    assert mi_count > 5 * mi_index


def test_chain_generation_deterministic():
    spec = SyntheticChainSpec(count=3, chain_length=10)
    a = generate_synthetic_chains(spec, make_rng(7))
    b = generate_synthetic_chains(spec, make_rng(7))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_chain_rejection_failure_raises():
    # a step that can never satisfy the excluded-volume rule after bounded retries
    spec = SyntheticChainSpec(count=1, chain_length=400, max_retries=1)
    with pytest.raises(RuntimeError):
        generate_synthetic_chains(spec, make_rng(0))


# -- training loops ---------------------------------------------------------------------------


def test_split_indices_partition():
    tr, va = split_indices(50, 0.1, make_rng(0))
    assert len(va) == 5 and len(tr) == 45
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(50))


@pytest.fixture(scope="module")
def small_run():
    clouds = generate_clouds(200, 5, 3, 0, 200, make_rng(0))
    cfg = TrainConfig(total_steps=400, warmup_steps=50, peak_lr=2e-3, seed=3)
    return cfg, clouds, train_truncated(cfg, TINY_MODEL, clouds, 2.0, 200.0)


def test_train_truncated_records_epochs(small_run):
    cfg, clouds, res = small_run
    rows = res.metrics
    assert rows[-1]["step"] == 400
    assert [r["epoch"] for r in rows] == list(range(1, len(rows) + 1))
    assert {"epoch", "step", "lr", "train_loss", "val_loss"} <= set(rows[0])
    assert res.summary["n_val"] == 20 and res.summary["n_train"] == 180
    # summary scalars recomputable from the metric table
    tail = [r["val_loss"] for r in rows[-cfg.rolling_window:]]
    assert res.summary["final_val_loss"] == pytest.approx(np.mean(tail), rel=1e-12)


def test_train_truncated_learns_something(small_run):
    _, _, res = small_run
    assert res.metrics[-1]["val_loss"] < res.metrics[0]["val_loss"]
    assert res.summary["final_val_loss"] < res.summary["constant_baseline"]


def test_train_truncated_deterministic(small_run):
    cfg, clouds, res = small_run
    again = train_truncated(cfg, TINY_MODEL, clouds, 2.0, 200.0)
    assert again.metrics == res.metrics
    assert again.artifacts["model"].theta.tobytes() == res.artifacts["model"].theta.tobytes()


def test_constant_baseline_is_median_l1():
    clouds = generate_clouds(51, 4, 3, 0, 200, make_rng(0))
    from distattn.geometry import target_matrix

    t = target_matrix(clouds, 2.0, 200.0)
    base = constant_baseline(clouds, 2.0, 200.0)
    for c in (np.mean(t, 0), np.median(t, 0) + 0.01):
        assert base <= np.abs(t - c).mean()


def test_train_masked_runs_and_is_deterministic():
    chains = generate_synthetic_chains(SyntheticChainSpec(count=24, chain_length=12), make_rng(0))
    mcfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, activation="gelu", vocab_size=9,
                       use_sinusoidal_pe=True)
    cfg = TrainConfig(total_steps=12, warmup_steps=3, peak_lr=1e-3, coord_scale=0.25, val_fraction=0.25)
    a = train_masked(cfg, mcfg, chains, True)
    b = train_masked(cfg, mcfg, chains, True)
    assert a.metrics == b.metrics
    assert {"train_ce", "val_ce", "val_ce_mask", "val_recovery"} <= set(a.metrics[0])
    assert len(a.summary["per_class_recovery"]) == 8
    plain = train_masked(cfg, mcfg, chains, False)
    assert plain.summary["n_parameters"] == a.summary["n_parameters"] - (3 * 8 + 8)
    assert all(math.isfinite(r["val_ce"]) for r in plain.metrics)
