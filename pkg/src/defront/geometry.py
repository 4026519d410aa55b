"""Landmark geometry: similarity/affine solving, frontal and profile alignment.

All coordinates are image-space pixels with the origin at the top-left corner
and y pointing down.  Aligned faces are always 112x112.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Sequence

import cv2
import numpy as np

from .errors import DegenerateInput, InvalidState, MissingLandmark

ALIGNED_SIZE = 112
HALF = ALIGNED_SIZE // 2

FRONTAL_NAMES = ("left_eye", "right_eye", "nose_top", "mouth_left", "mouth_right")
LANDMARK_NAMES = FRONTAL_NAMES + ("ear_point",)
MOUTH_NAMES = ("mouth_left", "mouth_right")


class Point2D(NamedTuple):
    x: float
    y: float


class LandmarkSource(str, Enum):
    detector = "detector"
    annotation = "annotation"
    synthetic = "synthetic"


class TransformKind(str, Enum):
    similarity = "similarity"
    affine = "affine"


class FaceSide(str, Enum):
    full = "full"
    left_half = "left_half"
    right_half = "right_half"


@dataclass(frozen=True)
class LandmarkSet:
    points: Mapping[str, Point2D]
    source: LandmarkSource = LandmarkSource.annotation

    def __post_init__(self):
        pts = {}
        for name, p in self.points.items():
            if name not in LANDMARK_NAMES:
                raise ValueError(f"unknown landmark name {name!r}")
            x, y = float(p[0]), float(p[1])
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError(f"landmark {name} is not finite: {p}")
            pts[name] = Point2D(x, y)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "source", LandmarkSource(self.source))

    def __getitem__(self, name: str) -> Point2D:
        try:
            return self.points[name]
        except KeyError:
            raise MissingLandmark(f"landmark {name!r} not present") from None

    def __contains__(self, name: str) -> bool:
        return name in self.points

    def array(self, names: Sequence[str]) -> np.ndarray:
        """(len(names), 2) float64 array; raises MissingLandmark on a gap."""
        return np.array([self[n] for n in names], dtype=np.float64)

    def require(self, names: Iterable[str]) -> None:
        missing = [n for n in names if n not in self.points]
        if missing:
            raise MissingLandmark(f"missing landmarks: {', '.join(missing)}")

    def transformed(self, transform: "Transform2D") -> "LandmarkSet":
        names = list(self.points)
        moved = transform.apply(self.array(names))
        return LandmarkSet(dict(zip(names, map(tuple, moved))), self.source)

    def subset(self, names: Iterable[str]) -> "LandmarkSet":
        return LandmarkSet({n: self[n] for n in names}, self.source)

    @classmethod
    def from_array(cls, names, arr, source=LandmarkSource.annotation) -> "LandmarkSet":
        arr = np.asarray(arr, dtype=np.float64).reshape(len(names), 2)
        return cls({n: tuple(p) for n, p in zip(names, arr)}, source)


# Canonical 112x112 five-point template used by ArcFace-style alignment.
ARCFACE_TEMPLATE = LandmarkSet(
    {
        "left_eye": (38.2946, 51.6963),
        "right_eye": (73.5318, 51.5014),
        "nose_top": (56.0252, 71.7366),
        "mouth_left": (41.5493, 92.3655),
        "mouth_right": (70.7299, 92.2041),
    },
    LandmarkSource.annotation,
)


@dataclass(frozen=True)
class Transform2D:
    matrix: np.ndarray
    kind: TransformKind = TransformKind.affine

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(2, 3)
        if not np.all(np.isfinite(m)):
            raise DegenerateInput("transform matrix is not finite")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "kind", TransformKind(self.kind))
        if self.kind is TransformKind.similarity:
            a, b = m[0, 0], m[1, 0]
            if not (np.isclose(m[1, 1], a, atol=1e-6) and np.isclose(m[0, 1], -b, atol=1e-6)):
                raise ValueError("similarity transform must have linear part s*R")
            if math.hypot(a, b) <= 0:
                raise ValueError("similarity transform must have positive scale")

    @classmethod
    def identity(cls) -> "Transform2D":
        return cls(np.eye(2, 3), TransformKind.similarity)

    @property
    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def compose(self, first: "Transform2D") -> "Transform2D":
        """Return ``self ∘ first`` (apply ``first``, then ``self``)."""
        m = (self.homogeneous @ first.homogeneous)[:2]
        both_sim = self.kind is TransformKind.similarity and first.kind is TransformKind.similarity
        return Transform2D(m, TransformKind.similarity if both_sim else TransformKind.affine)

    def inverse(self) -> "Transform2D":
        det = np.linalg.det(self.matrix[:, :2])
        if abs(det) < 1e-12:
            raise DegenerateInput("transform is not invertible")
        return Transform2D(np.linalg.inv(self.homogeneous)[:2], self.kind)

    @property
    def scale(self) -> float:
        if self.kind is not TransformKind.similarity:
            raise InvalidState("scale is only defined for similarity transforms")
        return float(math.hypot(self.matrix[0, 0], self.matrix[1, 0]))

    @property
    def rotation(self) -> float:
        """Rotation angle in radians (similarity only)."""
        if self.kind is not TransformKind.similarity:
            raise InvalidState("rotation is only defined for similarity transforms")
        return float(math.atan2(self.matrix[1, 0], self.matrix[0, 0]))

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2].copy()

    @classmethod
    def from_params(cls, scale: float, rotation: float, tx: float, ty: float) -> "Transform2D":
        c, s = scale * math.cos(rotation), scale * math.sin(rotation)
        return cls(np.array([[c, -s, tx], [s, c, ty]]), TransformKind.similarity)


@dataclass(frozen=True)
class AlignedFace:
    image: np.ndarray
    transform: Transform2D
    residual_error: float = 0.0
    side: FaceSide = FaceSide.full
    landmarks: LandmarkSet | None = field(default=None, compare=False)

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.shape[:2] != (ALIGNED_SIZE, ALIGNED_SIZE):
            raise ValueError(f"aligned image must be 112x112, got {img.shape[:2]}")
        if not self.residual_error >= 0:
            raise ValueError("residual_error must be non-negative")
        object.__setattr__(self, "side", FaceSide(self.side))


def _as_points(points) -> np.ndarray:
    arr = np.array([tuple(p) for p in points], dtype=np.float64)
    return arr.reshape(-1, 2)


def solve_similarity(src, dst) -> Transform2D:
    """Least-squares similarity (scale, rotation, translation) mapping src to dst.

    Closed form, no reflection.  Exact for two distinct point pairs.
    """
    src, dst = _as_points(src), _as_points(dst)
    if len(src) != len(dst):
        raise DegenerateInput(f"point count mismatch: {len(src)} vs {len(dst)}")
    if len(src) < 2:
        raise DegenerateInput("need at least two point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    p, q = src - mu_s, dst - mu_d
    denom = float(np.sum(p * p))
    if denom < 1e-18:
        raise DegenerateInput("source points are all coincident")
    a = float(np.sum(p * q)) / denom
    b = float(np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0])) / denom
    if math.hypot(a, b) < 1e-12:
        raise DegenerateInput("destination points are all coincident")
    lin = np.array([[a, -b], [b, a]])
    t = mu_d - lin @ mu_s
    return Transform2D(np.column_stack([lin, t]), TransformKind.similarity)


def solve_affine_exact(src, dst) -> Transform2D:
    """Affine map sending each of three source points exactly onto its target."""
    src, dst = _as_points(src), _as_points(dst)
    if src.shape != (3, 2) or dst.shape != (3, 2):
        raise DegenerateInput("exact affine needs exactly three point pairs")
    A = np.column_stack([src, np.ones(3)])
    # twice the triangle area
    if abs(np.linalg.det(A)) < 1e-9:
        raise DegenerateInput("source points are collinear")
    m = np.linalg.solve(A, dst).T
    return Transform2D(m, TransformKind.affine)


def _to_float_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.size == 0:
        raise DegenerateInput("image is empty")
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32, copy=False)


def warp_image(image, transform: Transform2D, size: int = ALIGNED_SIZE) -> np.ndarray:
    """Bilinear warp with edge clamping into a size x size canvas."""
    img = _to_float_image(image)
    out = cv2.warpAffine(
        img,
        transform.matrix.astype(np.float64),
        (size, size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REPLICATE,
    )
    if img.ndim == 3 and out.ndim == 2:
        out = out[:, :, None]
    return np.clip(out, 0.0, 1.0)


def _mean_residual(transform: Transform2D, src: np.ndarray, dst: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(transform.apply(src) - dst, axis=1)))


def align_frontal(image, landmarks: LandmarkSet, template: LandmarkSet = ARCFACE_TEMPLATE) -> AlignedFace:
    landmarks.require(FRONTAL_NAMES)
    template.require(FRONTAL_NAMES)
    src = landmarks.array(FRONTAL_NAMES)
    dst = template.array(FRONTAL_NAMES)
    tf = solve_similarity(src, dst)
    return AlignedFace(
        image=warp_image(image, tf),
        transform=tf,
        residual_error=_mean_residual(tf, src, dst),
        side=FaceSide.full,
        landmarks=landmarks.transformed(tf),
    )


def alignment_error(landmarks: LandmarkSet, template: LandmarkSet = ARCFACE_TEMPLATE) -> float:
    """Mean landmark distance (112-pixel space) after best-fit similarity to template."""
    landmarks.require(FRONTAL_NAMES)
    src = landmarks.array(FRONTAL_NAMES)
    dst = template.array(FRONTAL_NAMES)
    return _mean_residual(solve_similarity(src, dst), src, dst)


def select_mouth_corner(profile_lms: LandmarkSet) -> str:
    """Pick the mouth corner used for profile alignment.

    With a single corner present, that one; with both, the corner farther
    from the ear point (ties go to ``mouth_left``).
    """
    present = [n for n in MOUTH_NAMES if n in profile_lms]
    if not present:
        raise MissingLandmark("profile landmarks need a mouth corner")
    if len(present) == 1:
        return present[0]
    ear = np.asarray(profile_lms["ear_point"])
    dists = [np.linalg.norm(np.asarray(profile_lms[n]) - ear) for n in MOUTH_NAMES]
    return MOUTH_NAMES[int(np.argmax(dists))] if dists[0] != dists[1] else MOUTH_NAMES[0]


@dataclass(frozen=True)
class ProfileAlignment:
    stage_a: Transform2D
    stage_b: Transform2D
    mouth_name: str
    source_points: np.ndarray
    target_points: np.ndarray

    @property
    def transform(self) -> Transform2D:
        return self.stage_b.compose(self.stage_a)


def solve_profile_alignment(profile_lms: LandmarkSet, nose_y: float, mouth_y: float) -> ProfileAlignment:
    """Two-stage transform placing nose/mouth on the vertical midline and the ear at x=0."""
    profile_lms.require(("nose_top", "ear_point"))
    mouth_name = select_mouth_corner(profile_lms)
    nose, mouth, ear = (np.asarray(profile_lms[n], dtype=np.float64) for n in ("nose_top", mouth_name, "ear_point"))
    nose_t = np.array([HALF, nose_y], dtype=np.float64)
    mouth_t = np.array([HALF, mouth_y], dtype=np.float64)
    stage_a = solve_similarity([nose, mouth], [nose_t, mouth_t])
    ear_a = stage_a.apply(ear)
    src_b = np.stack([nose_t, mouth_t, ear_a])
    dst_b = np.stack([nose_t, mouth_t, [0.0, ear_a[1]]])
    stage_b = solve_affine_exact(src_b, dst_b)
    return ProfileAlignment(
        stage_a=stage_a,
        stage_b=stage_b,
        mouth_name=mouth_name,
        source_points=np.stack([nose, mouth, ear]),
        target_points=dst_b,
    )


def align_profile(image, profile_lms: LandmarkSet, frontal_ref: AlignedFace) -> AlignedFace:
    if frontal_ref.landmarks is None:
        raise MissingLandmark("frontal reference carries no aligned landmarks")
    mouth_name = select_mouth_corner(profile_lms)
    ref = frontal_ref.landmarks
    sol = solve_profile_alignment(profile_lms, ref["nose_top"].y, ref[mouth_name].y)
    tf = sol.transform
    return AlignedFace(
        image=warp_image(image, tf),
        transform=tf,
        residual_error=_mean_residual(tf, sol.source_points, sol.target_points),
        side=FaceSide.full,
        landmarks=profile_lms.transformed(tf),
    )


def bisect_horizontal(face: AlignedFace, side: str) -> AlignedFace:
    """Keep one half of the face; right halves are mirrored into the left columns."""
    if face.side is not FaceSide.full:
        raise InvalidState(f"face already bisected ({face.side.value})")
    side = {"left": "left_half", "right": "right_half"}.get(side, side)
    side = FaceSide(side)
    if side is FaceSide.full:
        raise ValueError("side must be left or right")
    img = np.asarray(face.image)
    out = np.zeros_like(img)
    if side is FaceSide.left_half:
        out[:, :HALF] = img[:, :HALF]
    else:
        out[:, :HALF] = img[:, HALF:][:, ::-1]
    return replace(face, image=out, side=side)
