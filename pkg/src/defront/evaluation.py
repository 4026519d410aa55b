"""Verification, identification and latency protocols."""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .data import FaceRecord, IdentityGallery, TestPair, read_image
from .errors import DuplicateGalleryIdentity, EmbeddingFailure, EmptyBin, MissingAnnotation, PipelineLoadFailure
from .geometry import align_frontal

N_FOLDS = 10
YAW_BINS = (15, 30, 45, 60, 75, 90)
AXES = ("pitch", "yaw", "roll")

Embedder = Callable[[Sequence[Path]], np.ndarray]


def cosine_similarity(a, b) -> float:
    """Dot product of unit-norm vectors, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


# ---------------------------------------------------------------------------
# verification


@dataclass
class VerificationResult:
    fold_accuracies: list[float]
    thresholds: list[float]
    fold_sizes: list[int]
    mean_accuracy: float

    def __post_init__(self):
        if len(self.fold_accuracies) != N_FOLDS:
            raise ValueError(f"expected {N_FOLDS} folds")

    def to_dict(self) -> dict:
        return asdict(self)


def fold_slices(n: int, n_folds: int = N_FOLDS) -> list[slice]:
    """Contiguous folds of ``n // n_folds`` items; the last fold takes the remainder."""
    if n < n_folds:
        raise ValueError(f"need at least {n_folds} pairs, got {n}")
    size = n // n_folds
    bounds = [i * size for i in range(n_folds)] + [n]
    return [slice(bounds[i], bounds[i + 1]) for i in range(n_folds)]


def best_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy-maximising threshold among midpoints of sorted unique scores.

    Prediction is ``same`` when ``score > threshold``.  Ties between
    candidates go to the smallest threshold.
    """
    u = np.unique(scores)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    order = np.argsort(scores, kind="stable")
    s_sorted, l_sorted = scores[order], labels[order]
    # positives above each candidate = total positives - positives at or below it
    pos_total = l_sorted.sum()
    cum_pos = np.concatenate([[0], np.cumsum(l_sorted)])
    cum_neg = np.concatenate([[0], np.cumsum(1 - l_sorted)])
    k = np.searchsorted(s_sorted, cands, side="right")
    correct = (pos_total - cum_pos[k]) + cum_neg[k]
    return float(cands[int(np.argmax(correct))])


def verify_scores(scores, labels) -> VerificationResult:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if scores.shape != labels.shape:
        raise ValueError("one label per score required")
    folds = fold_slices(len(scores))
    accs, ths, sizes = [], [], []
    for sl in folds:
        test = np.zeros(len(scores), bool)
        test[sl] = True
        t = best_threshold(scores[~test], labels[~test])
        pred = scores[test] > t
        accs.append(float(np.mean(pred == labels[test].astype(bool))))
        ths.append(t)
        sizes.append(int(test.sum()))
    mean = float(np.average(accs, weights=sizes))
    return VerificationResult(accs, ths, sizes, mean)


def _embed_unique(paths: Sequence[Path], embedder: Embedder) -> dict[str, np.ndarray]:
    uniq = list(dict.fromkeys(str(p) for p in paths))
    embs = np.asarray(embedder([Path(p) for p in uniq]), dtype=np.float64)
    if embs.shape[0] != len(uniq):
        raise EmbeddingFailure(uniq[0], ValueError("embedder returned the wrong number of rows"))
    return dict(zip(uniq, embs))


def pair_scores(pairs: Sequence[TestPair], embedder: Embedder) -> tuple[np.ndarray, np.ndarray]:
    table = _embed_unique([p for pr in pairs for p in (pr.path_a, pr.path_b)], embedder)
    scores = np.array([cosine_similarity(table[str(p.path_a)], table[str(p.path_b)]) for p in pairs])
    labels = np.array([int(p.same_identity) for p in pairs])
    return scores, labels


def verify_10fold(pairs: Sequence[TestPair], embedder: Embedder) -> VerificationResult:
    scores, labels = pair_scores(pairs, embedder)
    return verify_scores(scores, labels)


# ---------------------------------------------------------------------------
# identification


@dataclass
class IdentificationResult:
    per_pose_bin: dict[int, float]
    average: float
    counts: dict[int, int] = field(default_factory=dict)
    empty_bins: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_pose_bin": {str(k): v for k, v in self.per_pose_bin.items()},
            "average": self.average,
            "counts": {str(k): v for k, v in self.counts.items()},
            "empty_bins": self.empty_bins,
        }


def identify_embeddings(gallery_ids: Sequence[str], gallery_emb, probe_ids: Sequence[str], probe_yaws: Sequence[int], probe_emb, bins: Sequence[int] = YAW_BINS) -> IdentificationResult:
    if len(set(gallery_ids)) != len(gallery_ids):
        raise DuplicateGalleryIdentity("gallery identities must be unique")
    g = np.asarray(gallery_emb, dtype=np.float64)
    p = np.asarray(probe_emb, dtype=np.float64)
    nearest = np.argmax(p @ g.T, axis=1) if len(p) else np.zeros(0, int)
    hits = np.array([gallery_ids[j] == pid for j, pid in zip(nearest, probe_ids)], dtype=float)
    yaws = np.abs(np.asarray(probe_yaws, dtype=int))
    per, counts, empty = {}, {}, []
    for b in bins:
        sel = yaws == b
        counts[b] = int(sel.sum())
        if not sel.any():
            empty.append(b)
            continue
        per[b] = float(hits[sel].mean())
    if not per:
        raise EmptyBin("no probes fall in any yaw bin")
    return IdentificationResult(per, float(np.mean(list(per.values()))), counts, empty)


def identify_top1(gallery: IdentityGallery, probes: IdentityGallery, embedder: Embedder, bins: Sequence[int] = YAW_BINS) -> IdentificationResult:
    gal = gallery.frontal_subset()
    if len(gal) != len({e.identity_id for e in gallery}):
        raise DuplicateGalleryIdentity("every gallery identity needs exactly one frontal entry")
    table = _embed_unique([e.path for e in gal] + [e.path for e in probes], embedder)
    return identify_embeddings(
        [e.identity_id for e in gal],
        [table[str(e.path)] for e in gal],
        [e.identity_id for e in probes],
        [e.yaw_deg for e in probes],
        [table[str(e.path)] for e in probes],
        bins,
    )


# ---------------------------------------------------------------------------
# embedders


class BackboneEmbedder:
    """Align each image with its landmarks and embed it with a backbone."""

    def __init__(self, backbone, landmarks: Mapping[str, object], batch_size: int = 64):
        self.backbone = backbone.eval()
        self.landmarks = {str(k): v for k, v in landmarks.items()}
        self.batch_size = batch_size

    @classmethod
    def from_records(cls, backbone, records: Sequence[FaceRecord], **kw) -> "BackboneEmbedder":
        return cls(backbone, {str(r.path): r.landmarks for r in records}, **kw)

    def aligned(self, path) -> np.ndarray:
        try:
            return align_frontal(read_image(path), self.landmarks[str(path)]).image
        except Exception as exc:
            raise EmbeddingFailure(path, exc) from exc

    @torch.no_grad()
    def __call__(self, paths: Sequence[Path]) -> np.ndarray:
        from .nets import extract_embedding

        out = []
        for i in range(0, len(paths), self.batch_size):
            chunk = paths[i : i + self.batch_size]
            x = torch.from_numpy(np.stack([self.aligned(p).transpose(2, 0, 1) for p in chunk]).astype(np.float32))
            out.append(extract_embedding(self.backbone, x).numpy())
        return np.concatenate(out) if out else np.zeros((0, 0))


# ---------------------------------------------------------------------------
# latency


@dataclass
class BenchmarkResult:
    mean_ms: dict[str, float]
    std_ms: dict[str, float]
    iterations: int
    warmup: int
    hardware: dict[str, str]
    ratios: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if any(not v > 0 for v in self.mean_ms.values()):
            raise ValueError("latencies must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def hardware_fingerprint(device: str = "cpu") -> dict[str, str]:
    fp = {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "torch": torch.__version__,
        "threads": str(torch.get_num_threads()),
        "cpus": str(os.cpu_count()),
        "device": device,
    }
    if device.startswith("cuda") and torch.cuda.is_available():
        fp["gpu"] = torch.cuda.get_device_name(0)
    return fp


def _sync(device: str) -> None:
    if device.startswith("cuda") and torch.cuda.is_available():
        torch.cuda.synchronize()


@torch.no_grad()
def benchmark_inference(pipelines: Mapping[str, Callable], input_shape=(1, 3, 112, 112), iterations: int = 100, warmup: int = 10, device: str = "cpu", seed: int = 0) -> BenchmarkResult:
    """Per-call wall-clock latency of each pipeline on a fixed random input."""
    if iterations < 100 or warmup < 10:
        raise ValueError("need at least 100 timed iterations and 10 warmup calls")
    if not pipelines:
        raise PipelineLoadFailure("no pipelines to benchmark")
    for name, fn in pipelines.items():
        if not callable(fn):
            raise PipelineLoadFailure(f"pipeline {name!r} is not callable")
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(input_shape, generator=g).to(device)
    means, stds = {}, {}
    for name, fn in pipelines.items():
        for _ in range(warmup):
            fn(x)
        _sync(device)
        times = []
        for _ in range(iterations):
            t0 = time.perf_counter()
            fn(x)
            _sync(device)
            times.append((time.perf_counter() - t0) * 1e3)
        means[name] = float(np.mean(times))
        stds[name] = float(np.std(times))
    names = list(means)
    ratios = {f"{a}/{b}": means[a] / means[b] for a in names for b in names if a != b}
    return BenchmarkResult(means, stds, iterations, warmup, hardware_fingerprint(device), ratios)


def standard_pipelines(backbone, defront_model) -> dict[str, Callable]:
    """Embed-only and defrontalize-then-embed, both on a 112-pixel aligned input."""
    from .geometry import HALF

    backbone.eval()
    defront_model.eval()

    def embed_only(x):
        return backbone(x * 2 - 1)

    def defront_embed(x):
        half = x.clone()
        half[..., HALF:] = 0
        synth, _ = defront_model.synthesize(half)
        return backbone(synth * 2 - 1)

    return {"embed_only": embed_only, "defront_embed": defront_embed}


# ---------------------------------------------------------------------------
# pose statistics


def pose_pair_stats(pairs: Sequence[tuple[Mapping[str, float], Mapping[str, float]]]) -> dict[str, float]:
    """Mean absolute per-axis angle difference over annotated pairs."""
    if not pairs:
        raise MissingAnnotation("no annotated pairs")
    diffs = {a: [] for a in AXES}
    for k, (pa, pb) in enumerate(pairs):
        for a in AXES:
            if pa is None or pb is None or a not in pa or a not in pb:
                raise MissingAnnotation(f"pair {k} lacks a {a} annotation")
            diffs[a].append(abs(float(pa[a]) - float(pb[a])))
    return {a: float(np.mean(v)) for a, v in diffs.items()}


# ---------------------------------------------------------------------------
# reports


def write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_identification_csv(path, result: IdentificationResult) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["abs_yaw", "top1", "n"])
        for b, acc in sorted(result.per_pose_bin.items()):
            w.writerow([b, f"{acc:.6f}", result.counts.get(b, 0)])
        w.writerow(["average", f"{result.average:.6f}", sum(result.counts.values())])
