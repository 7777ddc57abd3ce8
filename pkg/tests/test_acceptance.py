"""Acceptance suite: the package's pinned behavioural claims, one test each.

Each test prints a single PASS/FAIL line (visible with -v through the test
name, and in captured output with -s) and enforces its runtime budget.
"""
import contextlib
import dataclasses
import json
import time

import numpy as np
import pytest
import torch

from nerdseg.backbone import BackboneConfig, build_backbone, extract_features, param_count
from nerdseg.cli import main as cli_main
from nerdseg.coords import normalize_positions, position_field
from nerdseg.data import SynthConfig, generate_border_bias, samples_to_arrays
from nerdseg.diagnostics import feature_stats, shift_score
from nerdseg.heads import (
    CalibratorMLP,
    baseline_logits,
    calibrate_c,
    calibrate_m,
    identity_bias_m,
    nerdc_logits,
    nerdm_logits,
)
from nerdseg.metrics import (
    asd,
    connected_components,
    dice,
    hd,
    hd95,
    lesion_counts,
    lesion_metrics,
    surface_distances,
)
from nerdseg.model import ModelConfig, SegmentationModel
from nerdseg.train import TrainConfig, lr_at, mean_sample_dice, train_model

from oracles import (
    brute_components,
    brute_dice,
    brute_lesion_counts,
    brute_nearest_rank,
    brute_surface_distances,
    finite_diff_grads,
)


@contextlib.contextmanager
def criterion(number: int, label: str, budget: float):
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget:.0f}s"
    except BaseException:
        print(f"FAIL [{number}] {label}")
        raise
    print(f"PASS [{number}] {label} ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------


def test_c1_identity_calibrators_reduce_to_baseline_bitwise():
    with criterion(1, "identity-initialized heads equal the baseline bitwise", 10.0):
        rng = np.random.default_rng(101)
        generator = torch.Generator().manual_seed(7)
        for _ in range(50):
            h = int(rng.integers(1, 24))
            w = int(rng.integers(1, 24))
            c = int(rng.integers(1, 12))
            feats = torch.tensor(rng.normal(size=(h, w, c)))
            weight32 = torch.tensor(
                rng.normal(size=(c,)).astype(np.float32))
            weight = weight32.double()
            field = normalize_positions(position_field(h, w))
            reference = baseline_logits(feats, weight)

            mlp_m = CalibratorMLP(2 * c, hidden=(16,), generator=generator,
                                  identity_bias=identity_bias_m(c)).double()
            affine = calibrate_m(mlp_m, field)
            assert torch.equal(nerdm_logits(feats, affine, weight), reference)

            mlp_c = CalibratorMLP(c, hidden=(16,), generator=generator,
                                  identity_bias=weight32).double()
            weight_field = calibrate_c(mlp_c, field)
            assert torch.equal(nerdc_logits(feats, weight_field), reference)


def _relative_error(analytic, numeric) -> float:
    num = np.sqrt(sum(float(((a - f) ** 2).sum()) for a, f in zip(analytic, numeric)))
    den = np.sqrt(sum(float((f ** 2).sum()) for f in numeric))
    return num / den


def _grad_check(loss_fn, params) -> float:
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().numpy().copy() for p in params]
    numeric = finite_diff_grads(loss_fn, params, step=1e-6)
    return _relative_error(analytic, numeric)


def test_c2_gradients_match_central_finite_differences():
    with criterion(2, "analytic gradients match central differences <= 1e-3", 120.0):
        rng = np.random.default_rng(55)
        generator = torch.Generator().manual_seed(13)
        c = 3
        field = normalize_positions(position_field(5, 4))
        feats = torch.tensor(rng.normal(size=(5, 4, c)))
        probe = torch.tensor(rng.normal(size=(5, 4)))
        weight = torch.tensor(rng.normal(size=(c,)), requires_grad=True)

        mlp_m = CalibratorMLP(2 * c, hidden=(8,), generator=generator).double()
        params_m = list(mlp_m.parameters()) + [weight]
        err_m = _grad_check(
            lambda: (nerdm_logits(feats, calibrate_m(mlp_m, field), weight)
                     * probe).sum(),
            params_m,
        )
        assert err_m <= 1e-3, f"affine calibrator gradient error {err_m:.2e}"

        mlp_c = CalibratorMLP(c, hidden=(8,), generator=generator).double()
        field_c = normalize_positions(position_field(4, 4))
        feats_c = torch.tensor(rng.normal(size=(4, 4, c)))
        probe_c = torch.tensor(rng.normal(size=(4, 4)))
        err_c = _grad_check(
            lambda: (nerdc_logits(feats_c, calibrate_c(mlp_c, field_c))
                     * probe_c).sum(),
            list(mlp_c.parameters()),
        )
        assert err_c <= 1e-3, f"weight-field calibrator gradient error {err_c:.2e}"

        backbone = build_backbone(
            BackboneConfig(filters=(1, 1, 2, 2, 2), feature_channels=2,
                           norm="none"), seed=0).double()
        with torch.no_grad():
            # nudge every parameter off the zero-bias init so no ReLU or
            # pooling input sits exactly on a kink, where central
            # differences measure something the analytic gradient cannot
            for p in backbone.parameters():
                p.add_(torch.empty_like(p).uniform_(-0.05, 0.05,
                                                    generator=generator))
        image = torch.tensor(rng.normal(0.3, 0.2, size=(1, 16, 16, 1)))
        probe_b = torch.tensor(rng.normal(size=(1, 16, 16, 2)))
        err_b = _grad_check(
            lambda: (extract_features(backbone, image) * probe_b).sum(),
            list(backbone.parameters()),
        )
        assert err_b <= 1e-3, f"backbone gradient error {err_b:.2e}"


def test_c3_metrics_match_brute_force_oracles():
    with criterion(3, "metrics equal brute-force oracles on 200 fuzzed masks", 120.0):
        rng = np.random.default_rng(33)
        surfaces_checked = 0
        for _ in range(200):
            shape = (int(rng.integers(1, 11)), int(rng.integers(1, 11)),
                     int(rng.integers(1, 4)))
            pred = rng.random(shape) < rng.uniform(0.15, 0.6)
            gt = rng.random(shape) < rng.uniform(0.15, 0.6)
            spacing = tuple(float(s) for s in rng.uniform(0.4, 3.0, size=3))
            connectivity = int(rng.choice([6, 26]))

            assert dice(pred, gt) == brute_dice(pred, gt)

            pred_set = connected_components(pred, connectivity)
            gt_set = connected_components(gt, connectivity)
            assert [c.tolist() for c in pred_set.components] == \
                brute_components(pred, connectivity)
            assert [c.tolist() for c in gt_set.components] == \
                brute_components(gt, connectivity)

            counts = lesion_counts(pred_set, gt_set)
            oracle_gl, oracle_pl, oracle_detected, oracle_matched = \
                brute_lesion_counts(brute_components(pred, connectivity),
                                    brute_components(gt, connectivity))
            assert counts.gt_total == oracle_gl
            assert counts.pred_total == oracle_pl
            assert counts.gt_detected == oracle_detected
            assert counts.pred_matched == oracle_matched

            scores = lesion_metrics(counts)
            if oracle_gl + oracle_pl == 0:
                assert scores.ldice == 1.0
            else:
                assert scores.ldice == 2.0 * oracle_detected / (oracle_gl + oracle_pl)
            assert scores.ltpr == (None if oracle_gl == 0
                                   else oracle_detected / oracle_gl)
            if oracle_pl == 0:
                assert scores.lppv is None and scores.lfpr is None
            else:
                assert scores.lppv == oracle_matched / oracle_pl
                assert scores.lfpr == 1.0 - oracle_matched / oracle_pl

            if pred.any() and gt.any():
                surfaces_checked += 1
                got = surface_distances(pred, gt, spacing)
                want_pg, want_gp = brute_surface_distances(pred, gt, spacing)
                np.testing.assert_allclose(got.pred_to_gt, want_pg, atol=1e-9)
                np.testing.assert_allclose(got.gt_to_pred, want_gp, atol=1e-9)
                assert abs(hd(got) - max(want_pg.max(), want_gp.max())) <= 1e-9
                want95 = max(brute_nearest_rank(want_pg, 95),
                             brute_nearest_rank(want_gp, 95))
                assert abs(hd95(got) - want95) <= 1e-9
                pooled = np.concatenate([want_pg, want_gp])
                assert abs(asd(got) - pooled.mean()) <= 1e-9
        assert surfaces_checked >= 50


def test_c4_learning_rate_schedule():
    with criterion(4, "90-epoch schedule decays at epochs 45, 63, and 81", 10.0):
        config = TrainConfig(epochs=90)
        expected = {0: 1e-3, 44: 1e-3, 45: 5e-4, 62: 5e-4, 63: 2.5e-4,
                    80: 2.5e-4, 81: 1.25e-4, 89: 1.25e-4}
        for epoch, rate in expected.items():
            assert lr_at(epoch, config) == rate, (epoch, lr_at(epoch, config))


def test_c5_position_field_identities_all_sizes():
    with criterion(5, "distance identities hold on every size 1..64", 10.0):
        for h in range(1, 65):
            rows = np.arange(h, dtype=np.float64)[:, None]
            for w in range(1, 65):
                cols = np.arange(w, dtype=np.float64)[None, :]
                raw = position_field(h, w)
                v = raw.values
                assert np.array_equal(v[..., 0] + v[..., 2],
                                      np.full((h, w), h - 1.0))
                assert np.array_equal(v[..., 3] + v[..., 1],
                                      np.full((h, w), w - 1.0))
                assert np.array_equal(v[..., 0], np.broadcast_to(rows, (h, w)))
                assert np.array_equal(v[..., 3], np.broadcast_to(cols, (h, w)))
                n = normalize_positions(raw).values
                assert n.min() >= 0.0 and n.max() <= 1.0
                vertical = n[..., 0] + n[..., 2]
                horizontal = n[..., 3] + n[..., 1]
                np.testing.assert_allclose(
                    vertical, 1.0 if h > 1 else 0.0, atol=1e-12)
                np.testing.assert_allclose(
                    horizontal, 1.0 if w > 1 else 0.0, atol=1e-12)


BORDER_BIAS_CONFIG = SynthConfig(rule="rings", band=4, blob_radius=(1.0, 1.5),
                                 blob_count=(6, 12), seed=0)
BORDER_BIAS_TRAIN = TrainConfig(epochs=15)
BORDER_BIAS_FILTERS = (8, 16, 32, 64, 128)


def test_c6_coordinate_head_beats_baseline_on_border_bias():
    with criterion(6, "nerdc beats the baseline by >= 5 Dice points", 900.0):
        dataset = generate_border_bias(BORDER_BIAS_CONFIG)
        train = samples_to_arrays(dataset.splits["train"])
        val = samples_to_arrays(dataset.splits["val"])
        test_x, test_y = samples_to_arrays(dataset.splits["test"])
        means = {}
        for head in ("baseline", "nerdc"):
            scores = []
            for seed in (0, 1, 2):
                model = SegmentationModel(
                    ModelConfig(backbone=BackboneConfig(
                        filters=BORDER_BIAS_FILTERS), head=head),
                    seed=seed,
                )
                config = dataclasses.replace(BORDER_BIAS_TRAIN, seed=seed)
                result = train_model(model, train, val, config)
                masks = result.model.predict_mask(test_x)
                scores.append(mean_sample_dice(masks, test_y > 0.5))
            means[head] = float(np.mean(scores))
            print(f"  {head}: per-seed test dice "
                  f"{[round(s, 4) for s in scores]} mean {means[head]:.4f}")
        margin = means["nerdc"] - means["baseline"]
        assert margin >= 0.05, (
            f"nerdc mean {means['nerdc']:.4f} vs baseline "
            f"{means['baseline']:.4f}: margin {100 * margin:.1f} points"
        )


def test_c7_calibrator_parameter_overhead():
    with criterion(7, "calibrator overhead < 3%; small nerdc < big baseline", 60.0):
        low_nerdc = SegmentationModel(
            ModelConfig(backbone=BackboneConfig(filters="low"), head="nerdc"))
        low_nerdm = SegmentationModel(
            ModelConfig(backbone=BackboneConfig(filters="low"), head="nerdm"))
        backbone_params = param_count(low_nerdc.backbone)
        for model in (low_nerdc, low_nerdm):
            overhead = model.calibrator_param_count()
            assert 0 < overhead < 0.03 * backbone_params, (
                f"{model.config.head} adds {overhead} parameters, "
                f"{100 * overhead / backbone_params:.2f}% of the backbone"
            )
        high_baseline = SegmentationModel(
            ModelConfig(backbone=BackboneConfig(filters="high"), head="baseline"))
        assert param_count(low_nerdc) < param_count(high_baseline)


def _pipeline(root) -> bytes:
    root.mkdir(parents=True, exist_ok=True)
    synth_config = root / "synth.json"
    synth_config.write_text(json.dumps({
        "height": 32, "width": 32, "train": 8, "val": 3, "test": 3,
        "blob_count": [1, 2], "blob_radius": [2.0, 3.0], "band": 8,
        "rule": "border", "seed": 3,
    }))
    data = root / "data"
    assert cli_main(["synth", "--config", str(synth_config),
                     "--out", str(data)]) == 0
    experiment = root / "experiment.json"
    experiment.write_text(json.dumps({
        "data": {"path": str(data)},
        "model": {"backbone": {"filters": [2, 2, 4, 4, 4], "norm": "none"},
                  "head": "nerdc", "calibrator_hidden": [8]},
        "train": {"epochs": 2, "batch_size": 4},
        "seeds": [0],
    }))
    run = root / "run"
    assert cli_main(["train", "--config", str(experiment),
                     "--out", str(run)]) == 0
    metrics = root / "metrics"
    assert cli_main(["evaluate", "--run", str(run), "--data", str(data),
                     "--split", "test", "--out", str(metrics)]) == 0
    return (metrics / "metrics_seed0.csv").read_bytes()


def test_c8_pipeline_is_deterministic(tmp_path):
    with criterion(8, "synth/train/evaluate reruns give identical CSV bytes", 300.0):
        first = _pipeline(tmp_path / "a")
        second = _pipeline(tmp_path / "b")
        assert first == second
        assert b"dice" in first


def test_c9_border_shift_exceeds_interior_control():
    with criterion(9, "untrained backbone border shift beats control 2/3 seeds", 60.0):
        rng = np.random.default_rng(7)
        images = rng.normal(0.0, 1.0, size=(8, 64, 64, 1)).astype(np.float32)
        wins = 0
        for seed in range(3):
            backbone = build_backbone(
                BackboneConfig(filters=(4, 4, 8, 8, 8), norm="none"), seed=seed)
            stats = feature_stats(backbone, images, batch_size=4)
            border = shift_score(stats, band=4)
            control = shift_score(stats, band=4, offset=4)
            wins += border > control
        assert wins >= 2, f"border shift beat the control in only {wins}/3 seeds"
