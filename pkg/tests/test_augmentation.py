import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from defront.augmentation import (
    AugmentationDecision,
    AugmentationPolicy,
    RandomStream,
    apply_defrontalization,
    augmented_sample,
    calibrate_policy,
    calibrate_threshold,
    calibration_report,
    compute_error_cache,
    decide,
    error_key,
    load_error_cache,
    replace_background,
    save_error_cache,
)
from defront.data import SyntheticFaceSpec, synthetic_landmarks
from defront.errors import EmptyInput, InfeasibleTarget, InvalidState, ModelNotLoaded, PolicyUncalibrated
from defront.geometry import ARCFACE_TEMPLATE, AlignedFace, Transform2D, alignment_error, bisect_horizontal
from defront.nets import DefrontModel, NetConfig


def synthetic_errors(n, seed=0):
    rng = np.random.default_rng(seed)
    yaws = np.clip(rng.normal(0, 25, n), -90, 90)
    return np.array([alignment_error(synthetic_landmarks(SyntheticFaceSpec(int(i), float(y)))) for i, y in enumerate(yaws)])


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return DefrontModel(NetConfig(flow_width=4, generator_width=4)).eval()


def symmetric_face(seed=0):
    rng = np.random.default_rng(seed)
    img = rng.random((112, 112, 3)).astype(np.float32)
    img = 0.5 * (img + img[:, ::-1])
    return AlignedFace(img, Transform2D.identity())


class TestCalibration:
    def test_uniform_quantile(self):
        errs = np.random.default_rng(0).random(100_000)
        assert calibrate_threshold(errs, 0.2, 1.0) == pytest.approx(0.2, abs=0.01)

    def test_probability_scales_quantile(self):
        errs = np.random.default_rng(1).random(100_000)
        assert calibrate_threshold(errs, 0.2, 0.5) == pytest.approx(0.4, abs=0.01)

    def test_equal_errors_warn(self):
        t = calibrate_threshold([2.0] * 50, 0.2)
        assert t == 2.0
        report = calibration_report([2.0] * 50, t, 0.2)
        assert report["realized_fraction"] in (0.0, 1.0)
        assert report["warnings"]

    def test_errors(self):
        with pytest.raises(EmptyInput):
            calibrate_threshold([], 0.2)
        with pytest.raises(InfeasibleTarget):
            calibrate_threshold([1.0, 2.0], 0.6, 0.5)

    def test_full_quantile_admits_everything(self):
        errs = [1.0, 2.0, 3.0]
        t = calibrate_threshold(errs, 1.0)
        assert all(e < t for e in errs)

    def test_synthetic_errors_realize_target(self):
        errs = synthetic_errors(5000)
        policy, report = calibrate_policy(errs, AugmentationPolicy(target_fraction=0.2))
        assert abs(np.mean(errs < policy.error_threshold) - 0.2) <= 0.02
        assert abs(report["realized_fraction"] - 0.2) <= 0.02
        assert sum(report["histogram"]["counts"]) == 5000

    @given(st.lists(st.floats(0, 50), min_size=20, max_size=200, unique=True), st.floats(0.05, 0.5))
    def test_expected_fraction_property(self, errs, target):
        # distinct errors: the quantile lands within one sample of the target
        t = calibrate_threshold(errs, target)
        eligible = np.mean(np.asarray(errs) < t)
        assert abs(eligible - target) <= 1.0 / len(errs) + 1e-12


class TestDecide:
    def test_uncalibrated(self):
        with pytest.raises(PolicyUncalibrated):
            decide(1.0, AugmentationPolicy(), RandomStream(0))

    def test_gate_above_threshold_never_fires(self):
        policy = AugmentationPolicy(error_threshold=1.0)
        stream = RandomStream(3)
        assert not any(decide(e, policy, stream, i).apply for i, e in enumerate(np.linspace(1.0, 30.0, 10_000)))

    def test_side_split(self):
        policy = AugmentationPolicy(error_threshold=10.0)
        sides = [decide(0.0, policy, RandomStream(7), i).side for i in range(10_000)]
        assert abs(sides.count("left") / 10_000 - 0.5) <= 0.02

    def test_determinism_and_order_independence(self):
        policy = AugmentationPolicy(error_threshold=5.0, apply_probability=0.5)
        errs = np.random.default_rng(0).random(500) * 10
        a = [decide(e, policy, RandomStream(11), i) for i, e in enumerate(errs)]
        b = [decide(e, policy, RandomStream(11), i) for i, e in enumerate(errs)]
        assert a == b
        order = np.random.default_rng(1).permutation(500)
        shuffled = {int(i): decide(errs[i], policy, RandomStream(11), int(i)) for i in order}
        assert [shuffled[i] for i in range(500)] == a

    def test_sequential_stream_matches_indexed(self):
        policy = AugmentationPolicy(error_threshold=5.0)
        seq = RandomStream(2)
        assert [decide(1.0, policy, seq) for _ in range(20)] == [decide(1.0, policy, RandomStream(2), i) for i in range(20)]

    def test_fresh_side_per_visit(self):
        policy = AugmentationPolicy(error_threshold=5.0)
        n = 100
        sides = {decide(1.0, policy, RandomStream(0), epoch * n + 3).side for epoch in range(20)}
        assert sides == {"left", "right"}

    def test_decision_validation(self):
        with pytest.raises(ValueError):
            AugmentationDecision(True)
        with pytest.raises(ValueError):
            AugmentationDecision(False, "left")


class TestApply:
    def test_contract_and_determinism(self, model):
        face = symmetric_face()
        a = apply_defrontalization(face, "left", model)
        b = apply_defrontalization(face, "left", model)
        assert a.image.shape == (112, 112, 3)
        assert 0 <= a.image.min() and a.image.max() <= 1
        np.testing.assert_array_equal(a.image, b.image)

    def test_mirror_symmetric_face(self, model):
        face = symmetric_face(2)
        left = apply_defrontalization(face, "left", model)
        right = apply_defrontalization(face, "right", model)
        np.testing.assert_allclose(right.image, left.image[:, ::-1], atol=1e-6)

    def test_errors(self, model):
        face = symmetric_face()
        with pytest.raises(ModelNotLoaded):
            apply_defrontalization(face, "left", None)
        with pytest.raises(InvalidState):
            apply_defrontalization(bisect_horizontal(face, "left"), "left", model)
        model.train()
        try:
            with pytest.raises(InvalidState):
                apply_defrontalization(face, "left", model)
        finally:
            model.eval()

    def test_background(self, model):
        res = apply_defrontalization(symmetric_face(), "left", model)
        out = replace_background(res, (1.0, 0.0, 0.0))
        assert out.shape == (112, 112, 3)


class TestAugmentedSample:
    def test_threshold_zero_is_raw(self, model):
        face = symmetric_face()
        for i in range(20):
            img, label, d = augmented_sample(face, 0.0, 7, AugmentationPolicy.disabled(), model, RandomStream(0), i)
            assert not d.apply and label == 7
            np.testing.assert_array_equal(img, face.image)

    def test_infinite_threshold_always_applies(self, model):
        face = symmetric_face()
        policy = AugmentationPolicy(error_threshold=math.inf)
        for i in range(5):
            img, label, d = augmented_sample(face, 1e6, "id3", policy, model, RandomStream(0), i)
            assert d.apply and label == "id3"
            assert not np.array_equal(img, face.image)

    def test_epoch_fraction(self):
        errs = synthetic_errors(10_000, seed=4)
        policy, _ = calibrate_policy(errs, AugmentationPolicy(target_fraction=0.2))
        stream = RandomStream(9)
        hits = [decide(e, policy, stream, i) for i, e in enumerate(errs)]
        frac = np.mean([h.apply for h in hits])
        assert abs(frac - 0.2) <= 0.02


class TestErrorCache:
    def test_round_trip(self, tmp_path):
        lms = synthetic_landmarks(SyntheticFaceSpec(1, 20.0))
        cache = compute_error_cache([("a.png", lms), ("b.png", ARCFACE_TEMPLATE)])
        save_error_cache(tmp_path / "c.json", cache)
        assert load_error_cache(tmp_path / "c.json") == cache
        assert cache[error_key("b.png")] == pytest.approx(0, abs=1e-9)

    def test_rejects_negative(self, tmp_path):
        (tmp_path / "c.json").write_text('{"x": -1}')
        with pytest.raises(ValueError):
            load_error_cache(tmp_path / "c.json")
