import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from defront.augmentation import AugmentationPolicy
from defront.data import SyntheticFaceSpec, generate_synthetic_face
from defront.estimators import DefrontalizationAugmenter, FaceAligner, FaceEmbedder
from defront.nets import DefrontModel, NetConfig
from defront.training import EmbedTrainConfig

TINY = NetConfig(flow_width=4, generator_width=4, backbone_width=8, embedding_dim=16)


def samples(n=3):
    out = []
    for i in range(n):
        img, lms, _ = generate_synthetic_face(SyntheticFaceSpec(i, 10.0 * i))
        out.append((img, lms))
    return out


def test_aligner():
    X = samples()
    al = FaceAligner().fit(X)
    out = al.transform(X)
    assert out.shape == (3, 112, 112, 3)
    errs = al.alignment_errors(X)
    assert errs.shape == (3,) and (errs >= 0).all()
    with pytest.raises(ValueError):
        al.transform([(X[0][0],)])


def test_augmenter_params_and_fit():
    torch.manual_seed(0)
    aug = DefrontalizationAugmenter(DefrontModel(TINY).eval(), target_fraction=0.25, random_state=3)
    assert aug.get_params()["target_fraction"] == 0.25
    assert clone(aug).get_params()["random_state"] == 3
    with pytest.raises(NotFittedError):
        aug.transform(np.zeros((1, 112, 112, 3)), errors=[0.0])
    errs = np.random.default_rng(0).random(1000)
    aug.fit(errs)
    assert aug.threshold_ == pytest.approx(0.25, abs=0.05)
    X = np.random.default_rng(1).random((4, 112, 112, 3)).astype(np.float32)
    out = aug.transform(X, errors=[0.0, 0.0, 9.0, 9.0])
    np.testing.assert_array_equal(out[2:], X[2:])
    np.testing.assert_array_equal(aug.transform(X, errors=[0.0] * 4), aug.transform(X, errors=[0.0] * 4))
    with pytest.raises(ValueError):
        aug.transform(X, errors=[0.0])
    with pytest.raises(ValueError):
        aug.transform(X[:, :50])


def test_embedder_fit_predict():
    rng = np.random.default_rng(0)
    centres = rng.random((3, 1, 1, 3)).astype(np.float32)
    y = np.repeat(["a", "b", "c"], 8)
    X = np.clip(centres[np.repeat(np.arange(3), 8)] + 0.02 * rng.standard_normal((24, 112, 112, 3)), 0, 1).astype(np.float32)
    cfg = EmbedTrainConfig(epochs=4, batch_size=8, accumulation_steps=1, margin_scale=16, policy=AugmentationPolicy.disabled())
    est = FaceEmbedder(TINY, cfg).fit(X, y)
    emb = est.transform(X)
    assert emb.shape == (24, 16)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1, atol=1e-5)
    assert set(est.predict(X)) <= {"a", "b", "c"}
    assert list(est.classes_) == ["a", "b", "c"]
    assert clone(est).get_params()["train_config"] == cfg
    with pytest.raises(ValueError):
        est.fit(X, y[:3])
