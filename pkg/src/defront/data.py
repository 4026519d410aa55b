"""Dataset formats, the landmark detector client, and the synthetic face generator."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import cv2
import numpy as np

from .errors import (
    AuthFailure,
    DetectorError,
    DetectorMiss,
    DetectorTimeout,
    IOFailure,
    MissingFile,
    ParseError,
)
from .geometry import (
    FRONTAL_NAMES,
    LANDMARK_NAMES,
    MOUTH_NAMES,
    LandmarkSet,
    LandmarkSource,
    select_mouth_corner,
)

log = logging.getLogger(__name__)

PROFILE_ORDER = ("nose_top", "<mouth>", "ear_point")


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class FacePairRecord:
    identity_id: str
    frontal_path: Path
    profile_path: Path
    frontal_landmarks: LandmarkSet
    profile_landmarks: LandmarkSet
    illumination_tag: str | None = None

    @property
    def profile_mouth(self) -> str:
        return select_mouth_corner(self.profile_landmarks)


@dataclass(frozen=True)
class TestPair:
    __test__ = False  # not a pytest class

    path_a: Path
    path_b: Path
    same_identity: bool

    def __post_init__(self):
        if Path(self.path_a) == Path(self.path_b):
            raise ValueError(f"test pair paths must differ: {self.path_a}")


@dataclass(frozen=True)
class GalleryEntry:
    identity_id: str
    path: Path
    yaw_deg: int


@dataclass
class IdentityGallery:
    entries: list[GalleryEntry] = field(default_factory=list)

    def frontal_subset(self) -> "IdentityGallery":
        """One frontal (0 degree) entry per identity; raises on duplicates."""
        from .errors import DuplicateGalleryIdentity

        seen: dict[str, GalleryEntry] = {}
        for e in self.entries:
            if e.yaw_deg != 0:
                continue
            if e.identity_id in seen:
                raise DuplicateGalleryIdentity(f"identity {e.identity_id} has more than one frontal entry")
            seen[e.identity_id] = e
        return IdentityGallery(list(seen.values()))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class FaceRecord:
    """One training image for the embedding model."""

    path: Path
    identity_id: str
    yaw: float
    landmarks: LandmarkSet
    alignment_error: float | None = None


# ---------------------------------------------------------------------------
# manifest IO


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else (base / path)


def _relative(base: Path, p: Path) -> str:
    try:
        return os.path.relpath(Path(p), base)
    except ValueError:  # different drive
        return str(p)


def _parse_points(value, n: int, key: str, lineno: int, path) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(f"{key} is not numeric", lineno, path) from None
    if arr.shape != (n, 2):
        raise ParseError(f"{key} must be {n}x2 coordinates, got shape {arr.shape}", lineno, path)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{key} has non-finite values", lineno, path)
    return arr


def _iter_jsonl(path: Path):
    if not path.exists():
        raise MissingFile(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno, path) from None
            if not isinstance(obj, dict):
                raise ParseError("record is not a JSON object", lineno, path)
            yield lineno, obj


def load_pair_manifest(path, check_paths: bool = True) -> list[FacePairRecord]:
    path = Path(path)
    base = path.parent
    out = []
    for lineno, obj in _iter_jsonl(path):
        missing = [k for k in ("id", "frontal", "profile", "frontal_lms", "profile_lms") if k not in obj]
        if missing:
            raise ParseError(f"missing keys: {', '.join(missing)}", lineno, path)
        f_pts = _parse_points(obj["frontal_lms"], 5, "frontal_lms", lineno, path)
        p_pts = _parse_points(obj["profile_lms"], 3, "profile_lms", lineno, path)
        mouth = obj.get("profile_mouth", "mouth_left")
        if mouth not in MOUTH_NAMES:
            raise ParseError(f"profile_mouth must be one of {MOUTH_NAMES}", lineno, path)
        rec = FacePairRecord(
            identity_id=str(obj["id"]),
            frontal_path=_resolve(base, obj["frontal"]),
            profile_path=_resolve(base, obj["profile"]),
            frontal_landmarks=LandmarkSet.from_array(FRONTAL_NAMES, f_pts),
            profile_landmarks=LandmarkSet.from_array(("nose_top", mouth, "ear_point"), p_pts),
            illumination_tag=obj.get("illumination_tag"),
        )
        if check_paths:
            for p in (rec.frontal_path, rec.profile_path):
                if not p.exists():
                    raise ParseError(f"image does not exist: {p}", lineno, path)
        out.append(rec)
    return out


def write_pair_manifest(path, records: Iterable[FacePairRecord]) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            mouth = r.profile_mouth
            obj = {
                "id": r.identity_id,
                "frontal": _relative(base, r.frontal_path),
                "profile": _relative(base, r.profile_path),
                "frontal_lms": r.frontal_landmarks.array(FRONTAL_NAMES).tolist(),
                "profile_lms": r.profile_landmarks.array(("nose_top", mouth, "ear_point")).tolist(),
                "profile_mouth": mouth,
            }
            if r.illumination_tag is not None:
                obj["illumination_tag"] = r.illumination_tag
            fh.write(json.dumps(obj) + "\n")


def load_test_pairs(path) -> list[TestPair]:
    """Whitespace triplets ``path_a path_b label``; file order is preserved."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such file: {path}")
    base = path.parent
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(f"expected 3 fields, got {len(parts)}", lineno, path)
            a, b, label = parts
            if label not in ("0", "1"):
                raise ParseError(f"label must be 0 or 1, got {label!r}", lineno, path)
            try:
                pairs.append(TestPair(_resolve(base, a), _resolve(base, b), label == "1"))
            except ValueError as exc:
                raise ParseError(str(exc), lineno, path) from None
    return pairs


def write_test_pairs(path, pairs: Iterable[TestPair]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{_relative(path.parent, p.path_a)} {_relative(path.parent, p.path_b)} {int(p.same_identity)}\n")


def load_gallery(path) -> IdentityGallery:
    path = Path(path)
    entries = []
    for lineno, obj in _iter_jsonl(path):
        for k in ("id", "path", "yaw_deg"):
            if k not in obj:
                raise ParseError(f"missing key {k}", lineno, path)
        yaw = obj["yaw_deg"]
        if isinstance(yaw, bool) or not isinstance(yaw, int):
            raise ParseError(f"yaw_deg must be an integer, got {yaw!r}", lineno, path)
        if yaw % 15 != 0:
            raise ParseError(f"yaw_deg must be a multiple of 15, got {yaw}", lineno, path)
        entries.append(GalleryEntry(str(obj["id"]), _resolve(path.parent, obj["path"]), yaw))
    return IdentityGallery(entries)


def write_gallery(path, gallery: Iterable[GalleryEntry]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for e in gallery:
            fh.write(json.dumps({"id": e.identity_id, "path": _relative(path.parent, e.path), "yaw_deg": int(e.yaw_deg)}) + "\n")


def load_face_manifest(path) -> list[FaceRecord]:
    path = Path(path)
    out = []
    for lineno, obj in _iter_jsonl(path):
        for k in ("id", "path", "yaw", "landmarks"):
            if k not in obj:
                raise ParseError(f"missing key {k}", lineno, path)
        pts = _parse_points(obj["landmarks"], len(LANDMARK_NAMES), "landmarks", lineno, path)
        err = obj.get("error")
        out.append(
            FaceRecord(
                path=_resolve(path.parent, obj["path"]),
                identity_id=str(obj["id"]),
                yaw=float(obj["yaw"]),
                landmarks=LandmarkSet.from_array(LANDMARK_NAMES, pts, LandmarkSource.synthetic),
                alignment_error=None if err is None else float(err),
            )
        )
    return out


def write_face_manifest(path, records: Iterable[FaceRecord]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "id": r.identity_id,
                "path": _relative(path.parent, r.path),
                "yaw": r.yaw,
                "landmarks": r.landmarks.array(LANDMARK_NAMES).tolist(),
            }
            if r.alignment_error is not None:
                obj["error"] = r.alignment_error
            fh.write(json.dumps(obj) + "\n")


def read_image(path) -> np.ndarray:
    """RGB float32 image in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise MissingFile(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_image(path, image) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), img):
        raise IOFailure(f"cannot write image {path}")


# ---------------------------------------------------------------------------
# landmark detector client

DEFAULT_NAME_MAP = {
    "left_eye": ["left_eye_center"],
    "right_eye": ["right_eye_center"],
    "nose_top": ["nose_tip"],
    "mouth_left": ["mouth_left_corner"],
    "mouth_right": ["mouth_right_corner"],
    "ear_point": ["contour_left1"],
}


def load_name_map(path) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    out = {}
    for name, keys in raw.items():
        if name not in LANDMARK_NAMES:
            raise ParseError(f"unknown landmark name {name!r} in name map", path=path)
        out[name] = [keys] if isinstance(keys, str) else list(keys)
    return out


@dataclass
class DetectorClient:
    """HTTP client for a dense landmark detection service.

    ``session`` only needs a ``post(url, data=..., timeout=...)`` method
    returning an object with ``status_code`` and ``json()``; it defaults to a
    ``requests.Session``.
    """

    endpoint: str
    api_key: str
    timeout: float = 10.0
    retries: int = 3
    backoff: float = 0.5
    name_map: Mapping[str, Sequence[str]] = field(default_factory=lambda: dict(DEFAULT_NAME_MAP))
    max_in_flight: int = 4
    session: object = None
    sleep: Callable[[float], None] = time.sleep

    @classmethod
    def from_env(cls, **kwargs) -> "DetectorClient":
        endpoint = os.environ.get("DETECTOR_ENDPOINT")
        key = os.environ.get("DETECTOR_KEY")
        if not endpoint or not key:
            raise AuthFailure("DETECTOR_ENDPOINT and DETECTOR_KEY must be set")
        return cls(endpoint=endpoint, api_key=key, **kwargs)

    def _session(self):
        if self.session is None:
            import requests

            self.session = requests.Session()
        return self.session

    def detect(self, image) -> dict:
        """POST the image and return the decoded JSON body.

        Timeouts and 5xx responses are retried with exponential backoff;
        the whole call never runs past ``timeout`` seconds.
        """
        payload = {
            "api_key": self.api_key,
            "image_base64": _encode_png(image),
            "return_landmark": "2",
        }
        deadline = time.monotonic() + self.timeout
        last: Exception | None = None
        for attempt in range(self.retries):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                resp = self._session().post(self.endpoint, data=payload, timeout=remaining)
            except Exception as exc:  # transport errors from any session implementation
                if _is_timeout(exc):
                    last = DetectorTimeout(f"detector timed out after {self.timeout}s")
                else:
                    last = DetectorError(f"detector transport error: {exc}")
                    last.retriable = True
            else:
                status = int(getattr(resp, "status_code", 200))
                if status in (401, 403):
                    raise AuthFailure(f"detector rejected credentials (HTTP {status})")
                if status >= 500 or status == 429:
                    last = DetectorError(f"detector returned HTTP {status}")
                    last.retriable = True
                elif status >= 400:
                    raise DetectorError(f"detector returned HTTP {status}")
                else:
                    return resp.json()
            wait = self.backoff * (2**attempt)
            if attempt + 1 < self.retries and time.monotonic() + wait < deadline:
                self.sleep(wait)
            elif attempt + 1 < self.retries:
                break
        if isinstance(last, DetectorTimeout) or last is None:
            raise DetectorTimeout(f"detector did not answer within {self.timeout}s")
        raise last

    def fetch_many(self, images, required=FRONTAL_NAMES) -> list[LandmarkSet]:
        with ThreadPoolExecutor(max_workers=max(1, self.max_in_flight)) as pool:
            return list(pool.map(lambda im: fetch_landmarks(self, im, required), images))


def _is_timeout(exc: Exception) -> bool:
    if isinstance(exc, TimeoutError):
        return True
    return type(exc).__name__ in {"Timeout", "ReadTimeout", "ConnectTimeout", "TimeoutException"}


def _encode_png(image) -> str:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise DetectorError("image could not be encoded")
    return base64.b64encode(buf.tobytes()).decode("ascii")


def landmarks_from_response(body: Mapping, name_map: Mapping[str, Sequence[str]], required=FRONTAL_NAMES) -> LandmarkSet:
    faces = body.get("faces") or []
    if not faces:
        raise DetectorMiss("detector found no face")
    dense = faces[0].get("landmark") or {}
    points = {}
    for name in required:
        keys = name_map.get(name)
        if not keys:
            raise DetectorMiss(f"no dense mapping configured for {name}")
        try:
            xs = [float(dense[k]["x"]) for k in keys]
            ys = [float(dense[k]["y"]) for k in keys]
        except (KeyError, TypeError, ValueError):
            raise DetectorMiss(f"detector response lacks points for {name}") from None
        points[name] = (sum(xs) / len(xs), sum(ys) / len(ys))
    return LandmarkSet(points, LandmarkSource.detector)


def fetch_landmarks(client: DetectorClient, image, required=FRONTAL_NAMES) -> LandmarkSet:
    return landmarks_from_response(client.detect(image), client.name_map, required)


# ---------------------------------------------------------------------------
# synthetic faces

EAR_VISIBLE_YAW = 60.0


@dataclass(frozen=True)
class SyntheticFaceSpec:
    identity_seed: int
    yaw: float = 0.0
    illumination: float = 1.0
    size: int = 128
    shape_jitter: float = 0.02

    def __post_init__(self):
        if not -90.0 <= self.yaw <= 90.0:
            raise ValueError("yaw must be within [-90, 90] degrees")
        if not 0.5 <= self.illumination <= 1.5:
            raise ValueError("illumination must be within [0.5, 1.5]")
        if self.size < 32:
            raise ValueError("size must be at least 32 pixels")


@dataclass(frozen=True)
class _Identity:
    skin: np.ndarray
    hair: np.ndarray
    iris: np.ndarray
    lips: np.ndarray
    mark: np.ndarray
    mark_pos: tuple[float, float]
    hair_line: float
    eye_dx: float
    eye_y: float
    nose_y: float
    mouth_dx: float
    mouth_y: float


def _identity(seed: int, jitter: float) -> _Identity:
    rng = np.random.default_rng([seed, 0x5EED])
    colour = lambda lo, hi: rng.uniform(lo, hi, size=3)  # noqa: E731
    j = lambda: 1.0 + jitter * rng.uniform(-1.0, 1.0)  # noqa: E731
    # Proportions follow the five-point template: eye half-gap 0.34 head radii.
    return _Identity(
        skin=colour(0.35, 0.95),
        hair=colour(0.0, 1.0),
        iris=colour(0.0, 0.8),
        lips=colour(0.3, 1.0),
        mark=colour(0.0, 1.0),
        mark_pos=(float(rng.uniform(0.35, 0.6)), float(rng.uniform(-0.05, 0.3))),
        hair_line=float(rng.uniform(-0.75, -0.5)),
        eye_dx=0.34 * j(),
        eye_y=-0.25 * j(),
        nose_y=0.138 * j(),
        mouth_dx=0.282 * j(),
        mouth_y=0.536 * j(),
    )


_HEAD_Y = 1.3  # vertical semi-axis in head radii


def _surface_z(x: float, y: float, bulge: float = 0.0) -> float:
    return math.sqrt(max(0.05, 1.0 - x * x - (y / _HEAD_Y) ** 2)) + bulge


def synthetic_landmarks_3d(ident: _Identity, yaw: float) -> dict[str, np.ndarray]:
    """Head-frame 3D landmarks (units of head radius)."""
    ear_x = -0.97 if yaw >= 0 else 0.97
    pts = {
        "left_eye": (-ident.eye_dx, ident.eye_y, _surface_z(ident.eye_dx, ident.eye_y)),
        "right_eye": (ident.eye_dx, ident.eye_y, _surface_z(ident.eye_dx, ident.eye_y)),
        "nose_top": (0.0, ident.nose_y, _surface_z(0.0, ident.nose_y, 0.1)),
        "mouth_left": (-ident.mouth_dx, ident.mouth_y, _surface_z(ident.mouth_dx, ident.mouth_y, 0.08)),
        "mouth_right": (ident.mouth_dx, ident.mouth_y, _surface_z(ident.mouth_dx, ident.mouth_y, 0.08)),
        "ear_point": (ear_x, ident.eye_y + 0.2, -0.15),
    }
    return {k: np.asarray(v, dtype=np.float64) for k, v in pts.items()}


class _Projector:
    def __init__(self, size: int, yaw_deg: float):
        self.size = size
        self.radius = 0.34 * size
        self.cx = size / 2.0
        self.cy = size / 2.0 + 0.02 * size
        t = math.radians(yaw_deg)
        self.c, self.s = math.cos(t), math.sin(t)

    def __call__(self, p) -> tuple[float, float]:
        x, y, z = p
        return (self.cx + self.radius * (x * self.c + z * self.s), self.cy + self.radius * y)

    def depth(self, p) -> float:
        x, _, z = p
        return -x * self.s + z * self.c


def synthetic_landmarks(spec: SyntheticFaceSpec) -> LandmarkSet:
    """Projected landmarks of a synthetic face, without rendering the image."""
    proj = _Projector(spec.size, spec.yaw)
    lms3d = synthetic_landmarks_3d(_identity(spec.identity_seed, spec.shape_jitter), spec.yaw)
    return LandmarkSet({k: proj(v) for k, v in lms3d.items()}, LandmarkSource.synthetic)


def _draw_ellipse(canvas, centre, axes, colour, shift=4):
    k = 1 << shift
    c = (int(round(centre[0] * k)), int(round(centre[1] * k)))
    a = (max(1, int(round(axes[0] * k))), max(1, int(round(axes[1] * k))))
    cv2.ellipse(canvas, c, a, 0, 0, 360, tuple(float(v) for v in colour), -1, cv2.LINE_AA, shift)


def generate_synthetic_face(spec: SyntheticFaceSpec):
    """Render a procedural face and return ``(image, landmarks, yaw)``.

    The image is an RGB float32 array in [0, 1] on a black background;
    landmarks are exact projections of the same head model that drew it.
    """
    ident = _identity(spec.identity_seed, spec.shape_jitter)
    proj = _Projector(spec.size, spec.yaw)
    R = proj.radius
    canvas = np.zeros((spec.size, spec.size, 3), dtype=np.float32)

    _draw_ellipse(canvas, (proj.cx, proj.cy), (R, _HEAD_Y * R), ident.skin)
    # hair cap: everything above the hair line inside the head silhouette
    hair = np.zeros_like(canvas)
    _draw_ellipse(hair, (proj.cx, proj.cy), (R, _HEAD_Y * R), ident.hair)
    cut = int(round(proj.cy + ident.hair_line * R))
    canvas[: max(cut, 0)] = hair[: max(cut, 0)]

    lms3d = synthetic_landmarks_3d(ident, spec.yaw)
    fore = lambda p: max(0.0, proj.depth(p))  # noqa: E731

    for name in ("left_eye", "right_eye"):
        p = lms3d[name]
        if proj.depth(p) > 0.05:
            w = 0.1 * R * max(0.2, fore(p))
            _draw_ellipse(canvas, proj(p), (w, 0.055 * R), (0.97, 0.97, 0.97))
            _draw_ellipse(canvas, proj(p), (0.55 * w, 0.045 * R), ident.iris)

    mx, my = ident.mark_pos
    for sign in (-1.0, 1.0):
        p = np.array([sign * mx, my, _surface_z(mx, my)])
        if proj.depth(p) > 0.05:
            _draw_ellipse(canvas, proj(p), (0.09 * R * max(0.2, fore(p)), 0.09 * R), ident.mark)

    mouth_mid = np.array([0.0, ident.mouth_y, _surface_z(0.0, ident.mouth_y, 0.1)])
    poly = [lms3d["mouth_left"], mouth_mid, lms3d["mouth_right"]]
    for a, b in zip(poly[:-1], poly[1:]):
        if min(proj.depth(a), proj.depth(b)) > -0.05:
            pa, pb = proj(a), proj(b)
            k = 16
            cv2.line(
                canvas,
                (int(round(pa[0] * k)), int(round(pa[1] * k))),
                (int(round(pb[0] * k)), int(round(pb[1] * k))),
                tuple(float(v) for v in ident.lips),
                max(1, int(round(0.05 * R))),
                cv2.LINE_AA,
                4,
            )

    bridge = np.array([0.0, ident.eye_y + 0.08, _surface_z(0.0, ident.eye_y + 0.08, 0.06)])
    tip = lms3d["nose_top"]
    pa, pb = proj(bridge), proj(tip)
    nose_col = tuple(float(v) for v in ident.skin * 0.7)
    cv2.line(
        canvas,
        (int(round(pa[0] * 16)), int(round(pa[1] * 16))),
        (int(round(pb[0] * 16)), int(round(pb[1] * 16))),
        nose_col,
        max(1, int(round(0.06 * R))),
        cv2.LINE_AA,
        4,
    )
    _draw_ellipse(canvas, pb, (0.07 * R, 0.05 * R), nose_col)

    if abs(spec.yaw) >= EAR_VISIBLE_YAW:
        _draw_ellipse(canvas, proj(lms3d["ear_point"]), (0.09 * R, 0.2 * R), ident.skin * 0.55 + 0.1)

    # illumination: global gain with a mild left-to-right gradient
    ramp = 1.0 + 0.15 * (np.linspace(-1.0, 1.0, spec.size, dtype=np.float32))
    canvas *= spec.illumination * ramp[None, :, None]
    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)

    landmarks = LandmarkSet({k: proj(v) for k, v in lms3d.items()}, LandmarkSource.synthetic)
    return image, landmarks, float(spec.yaw)


def quantize_image(image) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass
class SyntheticDataset:
    root: Path
    pair_manifest: Path
    test_pairs: Path
    gallery: Path
    probes: Path
    faces: Path | None = None

    def digest(self) -> str:
        return directory_digest(self.root)


def directory_digest(root) -> str:
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()


def _yaw_tag(yaw: float) -> str:
    return f"{'p' if yaw >= 0 else 'm'}{abs(int(round(yaw))):02d}"


def build_synthetic_dataset(
    out_dir,
    n_identities: int,
    poses: Sequence[int] = (0, 90),
    seed: int = 0,
    size: int = 128,
    train_per_identity: int = 0,
    train_yaw_sigma: float = 25.0,
    n_test_pairs: int | None = None,
) -> SyntheticDataset:
    """Render a paired frontal/profile dataset plus held-out evaluation files.

    Layout under ``out_dir``::

        images/        one render per (identity, pose) used for pair training
        pairs.jsonl    frontal/profile pair manifest (one record per non-zero pose)
        faces/         optional embedding-training renders (continuous yaw)
        faces.jsonl
        test/          held-out renders (different illumination) for evaluation
        test_pairs.txt balanced same/different pairs over test/ images
        gallery.jsonl  one frontal test render per identity
        probes.jsonl   non-frontal test renders
    """
    if n_identities < 2:
        raise ValueError("need at least two identities")
    poses = sorted(set(int(p) for p in poses), key=lambda p: (abs(p), p))
    if 0 not in poses:
        raise ValueError("poses must include the frontal pose 0")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {root}: {exc}") from exc
    rng = np.random.default_rng([seed, 17])
    ident_seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=n_identities)]
    ids = [f"id{i:04d}" for i in range(n_identities)]

    records: list[FacePairRecord] = []
    for ident, iseed in zip(ids, ident_seeds):
        rendered = {}
        for yaw in poses:
            illum = float(rng.uniform(0.8, 1.2))
            img, lms, _ = generate_synthetic_face(SyntheticFaceSpec(iseed, yaw, illum, size))
            path = root / "images" / f"{ident}_{_yaw_tag(yaw)}.png"
            write_image(path, img)
            rendered[yaw] = (path, lms)
        f_path, f_lms = rendered[0]
        for yaw in poses:
            if yaw == 0:
                continue
            p_path, p_lms = rendered[yaw]
            mouth = select_mouth_corner(p_lms.subset(("nose_top", "mouth_left", "mouth_right", "ear_point")))
            records.append(
                FacePairRecord(
                    identity_id=ident,
                    frontal_path=f_path,
                    profile_path=p_path,
                    frontal_landmarks=f_lms.subset(FRONTAL_NAMES),
                    profile_landmarks=p_lms.subset(("nose_top", mouth, "ear_point")),
                )
            )
    pair_manifest = root / "pairs.jsonl"
    write_pair_manifest(pair_manifest, records)

    faces_path = None
    if train_per_identity > 0:
        faces = []
        for ident, iseed in zip(ids, ident_seeds):
            for k in range(train_per_identity):
                yaw = float(np.clip(rng.normal(0.0, train_yaw_sigma), -90.0, 90.0))
                illum = float(rng.uniform(0.7, 1.3))
                img, lms, _ = generate_synthetic_face(SyntheticFaceSpec(iseed, round(yaw, 3), illum, size))
                path = root / "faces" / f"{ident}_{k:03d}.png"
                write_image(path, img)
                faces.append(FaceRecord(path, ident, round(yaw, 3), lms))
        faces_path = root / "faces.jsonl"
        write_face_manifest(faces_path, faces)

    # held-out evaluation renders: illumination outside the training draws' centre
    test_imgs: dict[tuple[str, int], Path] = {}
    test_records = []
    for ident, iseed in zip(ids, ident_seeds):
        for yaw in sorted(set(poses) | {-p for p in poses}):
            illum = float(rng.uniform(0.6, 1.4))
            img, lms, _ = generate_synthetic_face(SyntheticFaceSpec(iseed, yaw, illum, size))
            path = root / "test" / f"{ident}_{_yaw_tag(yaw)}.png"
            write_image(path, img)
            test_imgs[(ident, yaw)] = path
            test_records.append(FaceRecord(path, ident, float(yaw), lms))
    write_face_manifest(root / "test" / "landmarks.jsonl", test_records)

    gallery_entries = [GalleryEntry(i, test_imgs[(i, 0)], 0) for i in ids]
    probe_entries = [GalleryEntry(i, test_imgs[(i, y)], y) for (i, y) in test_imgs if y != 0]
    write_gallery(root / "gallery.jsonl", gallery_entries)
    write_gallery(root / "probes.jsonl", probe_entries)

    # verification pairs: frontal vs every pose, half same identity, half different
    test_yaws = sorted({y for (_, y) in test_imgs})
    n_pairs = n_test_pairs or 2 * len(ids) * len(test_yaws)
    n_pairs -= n_pairs % 2
    pairs = []
    for k in range(n_pairs):
        ia = int(rng.integers(len(ids)))
        yaw = test_yaws[int(rng.integers(len(test_yaws)))]
        if k % 2 == 0:
            ib = ia
            if yaw == 0:
                yaw = test_yaws[-1]
        else:
            ib = int(rng.integers(len(ids) - 1))
            ib += ib >= ia
        a, b = ids[ia], ids[ib]
        pairs.append(TestPair(test_imgs[(a, 0)], test_imgs[(b, yaw)], a == b))
    test_pairs = root / "test_pairs.txt"
    write_test_pairs(test_pairs, pairs)
    return SyntheticDataset(root, pair_manifest, test_pairs, root / "gallery.jsonl", root / "probes.jsonl", faces_path)
