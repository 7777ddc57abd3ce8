import numpy as np
import pytest
import torch

from nerdseg import (
    CalibratorMLP,
    baseline_logits,
    cached_position_field,
    calibrate_c,
    calibrate_m,
    nerdc_logits,
    nerdm_logits,
    position_field,
    segment,
)
from nerdseg.errors import ConfigError, ContractViolation, ShapeError
from nerdseg.heads import identity_bias_m

from oracles import (
    finite_diff_grads,
    loop_affine_logits,
    loop_baseline_logits,
    loop_weightfield_logits,
    mlp_param_ledger,
)


def _features(rng, h, w, c, dtype=np.float64):
    return torch.from_numpy(rng.normal(size=(h, w, c)).astype(dtype))


def test_baseline_logits_match_loop_oracle(rng):
    feats = _features(rng, 5, 7, 3)
    weight = torch.from_numpy(rng.normal(size=3))
    out = baseline_logits(feats, weight)
    assert np.allclose(out.numpy(), loop_baseline_logits(feats.numpy(), weight.numpy()),
                       rtol=0, atol=1e-12)


def test_nerdm_logits_match_loop_oracle(rng):
    h, w, c = 6, 4, 3
    feats = _features(rng, h, w, c)
    mlp = CalibratorMLP(2 * c, hidden=(8, 8), seed=2).double()
    field = cached_position_field(h, w)
    calib = calibrate_m(mlp, field)
    weight = torch.from_numpy(rng.normal(size=c))
    out = nerdm_logits(feats, calib, weight)
    expected = loop_affine_logits(feats.numpy(), calib.inv_scale.detach().numpy(),
                                  calib.shift.detach().numpy(), weight.numpy())
    assert np.allclose(out.detach().numpy(), expected, rtol=0, atol=1e-12)


def test_nerdc_logits_match_loop_oracle(rng):
    h, w, c = 4, 9, 2
    feats = _features(rng, h, w, c)
    mlp = CalibratorMLP(c, hidden=(8,), seed=3).double()
    weights = calibrate_c(mlp, cached_position_field(h, w))
    out = nerdc_logits(feats, weights)
    expected = loop_weightfield_logits(feats.numpy(), weights.detach().numpy())
    assert np.allclose(out.detach().numpy(), expected, rtol=0, atol=1e-12)


def test_documented_affine_example():
    # two channels, inv_scale 2 and 1, shift -1 and 0, weight (1, 1),
    # features (0.5, -0.5) -> 2*0.5 - 1 + (-0.5) = -0.5
    feats = torch.tensor([[[0.5, -0.5]]])
    calib_inv = torch.tensor([[[2.0, 1.0]]])
    calib_shift = torch.tensor([[[-1.0, 0.0]]])
    from nerdseg.heads import ScaleShift

    out = nerdm_logits(feats, ScaleShift(calib_inv, calib_shift), torch.ones(2))
    assert float(out) == pytest.approx(-0.5, abs=1e-12)


def test_identity_calibrators_reduce_to_baseline_bitwise(rng):
    h, w, c = 12, 10, 5
    field = cached_position_field(h, w)
    weight = torch.from_numpy(rng.normal(size=c).astype(np.float32))
    mlp_m = CalibratorMLP(2 * c, seed=0, identity_bias=identity_bias_m(c))
    mlp_c = CalibratorMLP(c, seed=0, identity_bias=weight)
    for trial in range(20):
        feats = _features(rng, h, w, c, dtype=np.float32)
        ref = baseline_logits(feats, weight)
        via_m = nerdm_logits(feats, calibrate_m(mlp_m, field), weight)
        via_c = nerdc_logits(feats, calibrate_c(mlp_c, field))
        assert torch.equal(via_m, ref)
        assert torch.equal(via_c, ref)


def test_identity_bias_with_positive_scale_softplus():
    c = 3
    mlp = CalibratorMLP(2 * c, seed=1, identity_bias=identity_bias_m(c, positive_scale=True))
    calib = calibrate_m(mlp, cached_position_field(4, 4), positive_scale=True)
    assert torch.allclose(calib.inv_scale, torch.ones_like(calib.inv_scale), atol=1e-6)
    assert torch.equal(calib.shift, torch.zeros_like(calib.shift))


def test_calibrator_is_position_sensitive_by_default():
    mlp = CalibratorMLP(4, seed=7)
    weights = calibrate_c(mlp, cached_position_field(8, 8))
    corner, center = weights[0, 0], weights[4, 4]
    assert not torch.allclose(corner, center)


def test_calibrator_param_count_and_shapes():
    mlp = CalibratorMLP(16, hidden=(64, 64), seed=0)
    expected = mlp_param_ledger(4, (64, 64), 16)
    assert sum(p.numel() for p in mlp.parameters()) == expected
    out = calibrate_c(mlp, cached_position_field(5, 6))
    assert out.shape == (5, 6, 16)
    calib = calibrate_m(CalibratorMLP(16, seed=0), cached_position_field(5, 6))
    assert calib.inv_scale.shape == (5, 6, 8)
    assert calib.shift.shape == (5, 6, 8)


def test_same_seed_reproduces_calibrator():
    a = CalibratorMLP(6, seed=9)
    b = CalibratorMLP(6, seed=9)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_calibrate_requires_normalized_field(rng):
    mlp = CalibratorMLP(4, seed=0)
    raw = position_field(4, 4)
    with pytest.raises(ContractViolation):
        calibrate_c(mlp, raw)
    with pytest.raises(ContractViolation):
        calibrate_m(CalibratorMLP(8, seed=0), raw)


def test_calibrate_m_needs_even_output():
    with pytest.raises(ConfigError):
        calibrate_m(CalibratorMLP(5, seed=0), cached_position_field(4, 4))


def test_shape_errors_name_the_mismatch(rng):
    feats = _features(rng, 4, 4, 3, dtype=np.float32)
    with pytest.raises(ShapeError, match="channel"):
        baseline_logits(feats, torch.ones(2))
    mlp = CalibratorMLP(3, seed=0)
    weights = calibrate_c(mlp, cached_position_field(5, 4))
    with pytest.raises(ShapeError, match="spatial"):
        nerdc_logits(feats.float(), weights)


def test_calibrator_gradients_match_finite_differences(rng):
    h, w, c = 5, 4, 2
    feats = _features(rng, h, w, c)
    target = torch.from_numpy((rng.random((h, w)) > 0.5).astype(np.float64))
    field = cached_position_field(h, w)
    weight = torch.from_numpy(rng.normal(size=c))

    for kind in ("m", "c"):
        mlp = CalibratorMLP(2 * c if kind == "m" else c, hidden=(8,), seed=4).double()

        def loss_fn():
            if kind == "m":
                logits = nerdm_logits(feats, calibrate_m(mlp, field), weight)
            else:
                logits = nerdc_logits(feats, calibrate_c(mlp, field))
            return torch.nn.functional.binary_cross_entropy_with_logits(logits, target)

        loss = loss_fn()
        params = list(mlp.parameters())
        analytic = torch.autograd.grad(loss, params)
        numeric = finite_diff_grads(loss_fn, params)
        a = np.concatenate([g.numpy().ravel() for g in analytic])
        n = np.concatenate([g.ravel() for g in numeric])
        rel = np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n))
        assert rel <= 1e-6, f"{kind}: rel err {rel}"


def test_segment_threshold_semantics():
    logits = np.array([-1.0, 0.0, 2.0])
    assert segment(logits, 0.5).tolist() == [False, True, True]
    # sigmoid(0) = 0.5 sits exactly on the default threshold -> foreground
    assert segment(torch.tensor([0.0]), 0.5).tolist() == [True]
    assert segment(logits, 0.9).tolist() == [False, False, False]
    assert segment(logits, 0.1).tolist() == [True, True, True]
    with pytest.raises(ConfigError):
        segment(logits, 0.0)
    with pytest.raises(ConfigError):
        segment(logits, 1.0)


def test_segment_agrees_with_direct_sigmoid(rng):
    logits = rng.normal(size=(17, 13)) * 3
    probs = 1.0 / (1.0 + np.exp(-logits))
    for threshold in (0.25, 0.5, 0.75):
        assert np.array_equal(segment(logits, threshold), probs >= threshold)
