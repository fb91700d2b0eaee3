import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mft.errors import ConfigError, ContractError
from mft.evaluate import (
    TABLE_COLUMNS,
    UndefinedMetricError,
    VARIANTS,
    ablation_csv,
    ablation_run,
    attention_summary,
    compute_metrics,
    roc_auc,
    variant_config,
)
from mft.gradcheck import random_clips
from mft.model import MFTConfig, forward, init_parameters, param_count, parameter_shapes
from mft.train import TrainConfig

TOY = MFTConfig(n_frames=4, model_dim=8, heads=2, ffn_hidden=16, mlp_hidden=8)


def brute_force_counts(scores, labels, threshold):
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        if s >= threshold:
            tp += y == 1
            fp += y == 0
        else:
            fn += y == 1
            tn += y == 0
    return tp, fp, tn, fn


def brute_force_auc(scores, labels):
    """Probability a random positive outscores a random negative, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def test_hand_example():
    r = compute_metrics([0.9, 0.4, 0.2, 0.1], [1, 1, 0, 0])
    assert (r.acc, r.precision, r.recall) == (0.75, 1.0, 0.5)
    assert r.f1 == pytest.approx(2 / 3)
    assert (r.tp, r.fp, r.tn, r.fn) == (1, 0, 2, 1)
    assert r.auc == 1.0


def test_perfect_and_degenerate():
    r = compute_metrics([0.9, 0.8, 0.1], [1, 1, 0])
    assert (r.acc, r.auc, r.f1, r.precision, r.recall) == (1.0, 1.0, 1.0, 1.0, 1.0)
    r = compute_metrics([0.1, 0.2, 0.3], [1, 0, 1])
    assert r.precision == 0.0 and r.recall == 0.0 and r.f1 == 0.0
    assert compute_metrics([0.7, 0.8], [1, 1]).auc is None


def test_input_errors():
    with pytest.raises(ContractError):
        compute_metrics([], [])
    with pytest.raises(ContractError):
        compute_metrics([0.1, 0.2], [1])
    with pytest.raises(ContractError):
        compute_metrics([0.1], [2])


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.2], [1, 1, 0]) == 1.0
    assert roc_auc([0.1, 0.2, 0.9], [1, 1, 0]) == 0.0
    assert roc_auc([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.3, 0.4], [0, 0])


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 40))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding forces ties
        labels = rng.integers(0, 2, n)
        threshold = float(rng.choice([0.5, 0.3, 0.75]))
        r = compute_metrics(scores, labels, threshold)
        assert (r.tp, r.fp, r.tn, r.fn) == brute_force_counts(scores, labels, threshold)
        assert r.tp + r.fp + r.tn + r.fn == n
        if 0 < labels.sum() < n:
            assert abs(r.auc - brute_force_auc(scores, labels)) <= 1e-12


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(-40, 40), st.integers(0, 1)), min_size=2, max_size=30))
def test_auc_invariant_under_monotone_transform(pairs):
    # a coarse grid keeps the transforms strictly monotone in floating point
    scores = np.array([p[0] / 8 for p in pairs])
    labels = np.array([p[1] for p in pairs])
    if labels.min() == labels.max():
        return
    base = roc_auc(scores, labels)
    assert roc_auc(np.tanh(scores / 3) * 2 + 7, labels) == pytest.approx(base, abs=1e-12)
    assert roc_auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_recall_monotone_in_threshold(pairs, t1, t2):
    lo, hi = sorted((t1, t2))
    scores = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    assert compute_metrics(scores, labels, hi).recall <= compute_metrics(scores, labels, lo).recall


def test_variant_grid():
    assert list(VARIANTS) == ["full", "v1", "v2", "v3", "v4", "v5"]
    base = MFTConfig()
    assert not variant_config(base, "v1").use_E and variant_config(base, "v1").use_P
    assert not variant_config(base, "v2").use_P
    v3 = variant_config(base, "v3")
    assert not v3.use_P and not v3.use_E
    assert variant_config(base, "v4").ccr_mode == "mean_pool"
    assert variant_config(base, "v5").ccr_mode == "modality_attn"
    with pytest.raises(ConfigError):
        variant_config(base, "v6")


def test_ccr_variants_differ_only_in_ccr_block():
    full = parameter_shapes(MFTConfig())
    for name in ("v4", "v5"):
        shapes = parameter_shapes(variant_config(MFTConfig(), name))
        changed = set(full) ^ set(shapes)
        assert changed and all(k.startswith(("gc.", "ma.")) for k in changed)
    assert param_count(variant_config(MFTConfig(), "v4")) == param_count(MFTConfig()) - (4 * 128 * 128 + 128)


def test_attention_summary():
    params = init_parameters(TOY, seed=1)
    clips = random_clips(TOY, 7, seed=2)
    summary = attention_summary(params, clips, batch_size=3)
    assert summary.tokens == ("global", "P", "L", "V", "E")
    assert summary.gc.shape == (2, 1, 5) and summary.mc.shape == (2, 5, 5)
    np.testing.assert_allclose(summary.gc.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(summary.mc.sum(-1), 1.0, atol=1e-6)
    d = summary.to_dict()
    assert d["tokens"] == ["global", "P", "L", "V", "E"]
    assert np.array(d["gc"]["head_mean"]).shape == (1, 5)
    single = attention_summary(params, clips[:1])
    _, trace = forward(clips[0], params)
    np.testing.assert_allclose(single.gc, trace.gc, rtol=1e-6)
    np.testing.assert_allclose(single.mc, trace.mc, rtol=1e-6)
    with pytest.raises(ContractError):
        attention_summary(params, [])


def test_ablation_run_is_deterministic():
    train_clips, val_clips, test_clips = random_clips(TOY, 16, 1), random_clips(TOY, 6, 2), random_clips(TOY, 6, 3)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=2)
    variants = list(VARIANTS)
    a = ablation_run(TOY, variants, train_clips, val_clips, test_clips, cfg)
    b = ablation_run(TOY, variants, train_clips, val_clips, test_clips, cfg)
    assert [r.variant for r in a] == variants
    assert ablation_csv(a) == ablation_csv(b)
    lines = ablation_csv(a).splitlines()
    assert lines[0].split(",") == list(TABLE_COLUMNS)
    assert len(lines) == 7
    with pytest.raises(ConfigError):
        ablation_run(TOY, ["full", "bogus"], train_clips, val_clips, test_clips, cfg)
