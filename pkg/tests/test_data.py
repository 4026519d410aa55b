import json
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from defront.data import (
    DEFAULT_NAME_MAP,
    DetectorClient,
    FacePairRecord,
    GalleryEntry,
    SyntheticFaceSpec,
    TestPair,
    build_synthetic_dataset,
    directory_digest,
    fetch_landmarks,
    generate_synthetic_face,
    load_face_manifest,
    load_gallery,
    load_pair_manifest,
    load_test_pairs,
    read_image,
    write_gallery,
    write_image,
    write_pair_manifest,
    write_test_pairs,
)
from defront.errors import AuthFailure, DetectorMiss, DetectorTimeout, MissingFile, ParseError
from defront.geometry import ARCFACE_TEMPLATE, FRONTAL_NAMES, LandmarkSet

FRONTAL = ARCFACE_TEMPLATE.array(FRONTAL_NAMES).tolist()
PROFILE = [[50.0, 60.0], [52.0, 85.0], [10.0, 55.0]]


def manifest_line(**over):
    obj = {"id": "a", "frontal": "f.png", "profile": "p.png", "frontal_lms": FRONTAL, "profile_lms": PROFILE}
    obj.update(over)
    return json.dumps(obj)


class TestPairManifest:
    def test_empty(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("")
        assert load_pair_manifest(tmp_path / "m.jsonl") == []

    def test_one_record(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(manifest_line() + "\n")
        (rec,) = load_pair_manifest(tmp_path / "m.jsonl", check_paths=False)
        assert rec.identity_id == "a"
        assert rec.frontal_path == tmp_path / "f.png"
        assert rec.frontal_landmarks["nose_top"] == ARCFACE_TEMPLATE["nose_top"]
        assert rec.profile_landmarks["ear_point"] == (10.0, 55.0)

    def test_wrong_landmark_count_names_line(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(manifest_line() + "\n" + manifest_line(frontal_lms=FRONTAL[:2]) + "\n")
        with pytest.raises(ParseError) as ei:
            load_pair_manifest(tmp_path / "m.jsonl", check_paths=False)
        assert ei.value.line == 2
        assert ":2:" in str(ei.value)

    def test_bad_json_and_missing_image(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("{not json\n")
        with pytest.raises(ParseError):
            load_pair_manifest(tmp_path / "m.jsonl")
        (tmp_path / "m.jsonl").write_text(manifest_line() + "\n")
        with pytest.raises(ParseError):
            load_pair_manifest(tmp_path / "m.jsonl", check_paths=True)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            load_pair_manifest(tmp_path / "nope.jsonl")

    @given(st.lists(st.tuples(st.floats(0, 200), st.floats(0, 200)), min_size=8, max_size=8), st.text("abc", min_size=1, max_size=5))
    def test_round_trip(self, pts, ident):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as d:
            d = Path(d)
            rec = FacePairRecord(
                ident,
                d / "x" / "f.png",
                d / "x" / "p.png",
                LandmarkSet.from_array(FRONTAL_NAMES, pts[:5]),
                LandmarkSet.from_array(("nose_top", "mouth_right", "ear_point"), pts[5:]),
                "bright",
            )
            write_pair_manifest(d / "m.jsonl", [rec])
            (back,) = load_pair_manifest(d / "m.jsonl", check_paths=False)
            assert back == rec


class TestTestPairs:
    def test_parse(self, tmp_path):
        (tmp_path / "t.txt").write_text("a.png b.png 1\nc.png d.png 0\n")
        pairs = load_test_pairs(tmp_path / "t.txt")
        assert pairs[0] == TestPair(tmp_path / "a.png", tmp_path / "b.png", True)
        assert not pairs[1].same_identity

    def test_bad_label(self, tmp_path):
        (tmp_path / "t.txt").write_text("a.png b.png 2\n")
        with pytest.raises(ParseError):
            load_test_pairs(tmp_path / "t.txt")

    def test_protocol_sized_file(self, tmp_path):
        pairs = [TestPair(tmp_path / f"{i}a.png", tmp_path / f"{i}b.png", i % 2 == 0) for i in range(6000)]
        write_test_pairs(tmp_path / "t.txt", pairs)
        back = load_test_pairs(tmp_path / "t.txt")
        assert len(back) == 6000
        assert back == pairs

    def test_gallery_round_trip_and_validation(self, tmp_path):
        entries = [GalleryEntry("a", tmp_path / "a.png", 0), GalleryEntry("a", tmp_path / "b.png", -90)]
        write_gallery(tmp_path / "g.jsonl", entries)
        assert list(load_gallery(tmp_path / "g.jsonl")) == entries
        (tmp_path / "g.jsonl").write_text(json.dumps({"id": "a", "path": "a.png", "yaw_deg": 20}) + "\n")
        with pytest.raises(ParseError):
            load_gallery(tmp_path / "g.jsonl")


def dense_body():
    pts = dict(zip(FRONTAL_NAMES, FRONTAL))
    lm = {DEFAULT_NAME_MAP[n][0]: {"x": p[0], "y": p[1]} for n, p in pts.items()}
    return {"faces": [{"landmark": lm}]}


class Resp:
    def __init__(self, status, body=None):
        self.status_code = status
        self._body = body

    def json(self):
        return self._body


class Session:
    def __init__(self, *responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, data=None, timeout=None):
        self.calls.append(timeout)
        r = self.responses.pop(0)
        if isinstance(r, Exception):
            raise r
        return r


def client(session, **kw):
    return DetectorClient("http://detector", "key", session=session, sleep=lambda s: None, **kw)


IMG = np.zeros((20, 20, 3), np.float32)


class TestDetector:
    def test_parses_fixture(self):
        lms = fetch_landmarks(client(Session(Resp(200, dense_body()))), IMG)
        assert set(lms.points) == set(FRONTAL_NAMES)
        assert lms["left_eye"] == ARCFACE_TEMPLATE["left_eye"]

    def test_auth_failure_is_not_retried(self):
        s = Session(Resp(401), Resp(200, dense_body()))
        with pytest.raises(AuthFailure) as ei:
            fetch_landmarks(client(s), IMG)
        assert not ei.value.retriable
        assert len(s.calls) == 1

    def test_no_face(self):
        with pytest.raises(DetectorMiss):
            fetch_landmarks(client(Session(Resp(200, {"faces": []}))), IMG)

    def test_partial_response_is_a_miss(self):
        body = dense_body()
        del body["faces"][0]["landmark"]["nose_tip"]
        with pytest.raises(DetectorMiss):
            fetch_landmarks(client(Session(Resp(200, body))), IMG)

    def test_retries_server_errors(self):
        s = Session(Resp(503), TimeoutError(), Resp(200, dense_body()))
        assert fetch_landmarks(client(s), IMG)["nose_top"] == ARCFACE_TEMPLATE["nose_top"]
        assert len(s.calls) == 3

    def test_timeout_is_retriable(self):
        with pytest.raises(DetectorTimeout) as ei:
            fetch_landmarks(client(Session(TimeoutError(), TimeoutError(), TimeoutError())), IMG)
        assert ei.value.retriable

    def test_never_waits_past_deadline(self):
        class Slow(Session):
            def post(self, url, data=None, timeout=None):
                assert timeout <= 0.3 + 1e-6
                time.sleep(min(timeout, 0.12))
                raise TimeoutError()

        c = DetectorClient("http://x", "k", timeout=0.3, retries=10, backoff=0.01, session=Slow())
        t0 = time.monotonic()
        with pytest.raises(DetectorTimeout):
            c.detect(IMG)
        assert time.monotonic() - t0 < 0.3 + 0.15

    def test_fetch_many(self):
        s = Session(*[Resp(200, dense_body()) for _ in range(3)])
        assert len(client(s).fetch_many([IMG] * 3)) == 3

    def test_from_env(self, monkeypatch):
        monkeypatch.delenv("DETECTOR_ENDPOINT", raising=False)
        with pytest.raises(AuthFailure):
            DetectorClient.from_env()
        monkeypatch.setenv("DETECTOR_ENDPOINT", "http://e")
        monkeypatch.setenv("DETECTOR_KEY", "k")
        assert DetectorClient.from_env().endpoint == "http://e"


class TestSynthetic:
    def test_frontal_symmetry(self):
        _, lms, _ = generate_synthetic_face(SyntheticFaceSpec(7, 0.0, shape_jitter=0.0))
        c = 64.0
        assert lms["left_eye"].x - c == pytest.approx(c - lms["right_eye"].x, abs=1e-9)
        assert lms["mouth_left"].x - c == pytest.approx(c - lms["mouth_right"].x, abs=1e-9)
        assert lms["nose_top"].x == pytest.approx(c, abs=1e-9)

    def test_deterministic(self):
        a = generate_synthetic_face(SyntheticFaceSpec(3, 45.0))
        b = generate_synthetic_face(SyntheticFaceSpec(3, 45.0))
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]

    def test_foreshortening(self):
        def extent(yaw):
            _, lms, _ = generate_synthetic_face(SyntheticFaceSpec(11, yaw))
            return abs(lms["right_eye"].x - lms["left_eye"].x)

        assert extent(90.0) < 0.1 * extent(0.0)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticFaceSpec(1, 120.0)

    def test_image_io_round_trip(self, tmp_path):
        img, _, _ = generate_synthetic_face(SyntheticFaceSpec(2, 30.0))
        write_image(tmp_path / "a.png", img)
        np.testing.assert_allclose(read_image(tmp_path / "a.png"), img, atol=0.5 / 255 + 1e-6)


class TestSyntheticDataset:
    def test_counts(self, tmp_path):
        ds = build_synthetic_dataset(tmp_path / "d", 2, poses=(0, 90), seed=0)
        assert len(list((tmp_path / "d" / "images").glob("*.png"))) == 4
        assert len(load_pair_manifest(ds.pair_manifest)) == 2

    def test_digest_is_pure(self, tmp_path):
        a = build_synthetic_dataset(tmp_path / "a", 3, poses=(0, 45), seed=5, train_per_identity=2)
        b = build_synthetic_dataset(tmp_path / "b", 3, poses=(0, 45), seed=5, train_per_identity=2)
        c = build_synthetic_dataset(tmp_path / "c", 3, poses=(0, 45), seed=6, train_per_identity=2)
        assert directory_digest(a.root) == directory_digest(b.root) != directory_digest(c.root)

    def test_manifests_consistent(self, tiny_dataset):
        faces = load_face_manifest(tiny_dataset.faces)
        assert len(faces) == 16
        pairs = load_test_pairs(tiny_dataset.test_pairs)
        train = {str(f.path) for f in faces} | {str(r.frontal_path) for r in load_pair_manifest(tiny_dataset.pair_manifest)}
        assert not train & {str(p) for pr in pairs for p in (pr.path_a, pr.path_b)}
        labels = [p.same_identity for p in pairs]
        assert sum(labels) == len(labels) // 2

    def test_raw_pixels_separate_identities(self, tmp_path):
        ds = build_synthetic_dataset(tmp_path / "d", 64, poses=(0, 90), seed=1)
        same, diff = [], []
        for p in load_test_pairs(ds.test_pairs):
            a = read_image(p.path_a).ravel()
            b = read_image(p.path_b).ravel()
            cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            (same if p.same_identity else diff).append(cos)
        assert np.mean(same) > np.mean(diff)
