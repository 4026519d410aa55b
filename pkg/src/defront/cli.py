"""``defront`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .augmentation import AugmentationPolicy, calibrate_policy, compute_error_cache, save_error_cache
from .config import ExperimentConfig, config_from_dict, load_config
from .data import build_synthetic_dataset, load_face_manifest, load_gallery, load_pair_manifest, load_test_pairs, read_image, write_image
from .errors import ConfigInvalid, DefrontError, InputMissing
from .evaluation import (
    BackboneEmbedder,
    benchmark_inference,
    identify_top1,
    pose_pair_stats,
    standard_pipelines,
    verify_10fold,
    write_identification_csv,
    write_json,
)
from .geometry import bisect_horizontal
from .training import (
    align_pair,
    build_face_tensors,
    build_pair_tensors,
    load_backbone,
    load_defront_model,
    pretrain_flows,
    train_defront,
    train_embeddings,
)

log = logging.getLogger("defront")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "msg": record.getMessage()})


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise InputMissing(f"{what} not found: {path}")
    return Path(path)


class Context:
    """Resolved config, output directory and manifest bookkeeping for one command."""

    def __init__(self, args: argparse.Namespace):
        cfg = load_config(args.config) if args.config else config_from_dict({})
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out=str(args.out))
        self.cfg: ExperimentConfig = cfg
        self.out = Path(cfg.out)
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        try:
            self.device = torch.device(args.device)
        except RuntimeError as exc:
            raise ConfigInvalid(f"bad device {args.device!r}: {exc}") from exc
        if self.device.type == "cuda" and not torch.cuda.is_available():
            raise ConfigInvalid("cuda requested but not available")
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigInvalid("--workers must be positive")
            torch.set_num_threads(args.workers)
        torch.manual_seed(cfg.seed)
        np.random.seed(cfg.seed % 2**32)

    def path(self, given, default: str) -> Path:
        return Path(given) if given else self.out / default

    def manifest(self, command: str, started: float, status: str = "ok", error: dict | None = None) -> Path:
        path = self.out / "manifests" / f"{command}.json"
        payload = {
            "command": command,
            "version": __version__,
            "status": status,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "config": self.cfg.to_dict(),
            "started": started,
            "finished": time.time(),
        }
        if error:
            payload["error"] = error
        write_json(path, payload)
        return path


def _dataset_dir(ctx: Context) -> Path:
    return _require(ctx.path(getattr(ctx.args, "data", None), "dataset"), "dataset directory")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ctx: Context) -> None:
    d = ctx.cfg.data
    n = ctx.args.n if ctx.args.n is not None else d.n_identities
    root = ctx.path(ctx.args.data, "dataset")
    ds = build_synthetic_dataset(root, n, d.poses, ctx.cfg.seed, d.size, d.train_per_identity, d.train_yaw_sigma, d.n_test_pairs)
    ctx.outputs.update(dataset=str(ds.root), pairs=str(ds.pair_manifest), test_pairs=str(ds.test_pairs))
    if ds.faces:
        ctx.outputs["faces"] = str(ds.faces)


def cmd_align(ctx: Context) -> None:
    root = _dataset_dir(ctx)
    manifest = _require(root / "pairs.jsonl", "pair manifest")
    ctx.inputs["pairs"] = str(manifest)
    out_dir = ctx.path(None, "aligned")
    errors = {}
    done = set()
    for rec in load_pair_manifest(manifest):
        frontal, profile, _ = align_pair(rec)
        for src, face in ((rec.frontal_path, frontal), (rec.profile_path, profile)):
            if src in done:
                continue
            done.add(src)
            write_image(out_dir / Path(src).name, face.image)
            errors[str(src)] = face.residual_error
    sidecar = ctx.out / "alignment_errors.json"
    save_error_cache(sidecar, errors)
    ctx.outputs.update(aligned=str(out_dir), errors=str(sidecar))


def _face_records(root: Path):
    faces = root / "faces.jsonl"
    if faces.exists():
        return load_face_manifest(faces)
    raise InputMissing(f"{faces} not found; build the dataset with train_per_identity > 0")


def cmd_calibrate(ctx: Context) -> None:
    root = _dataset_dir(ctx)
    records = _face_records(root)
    ctx.inputs["faces"] = str(root / "faces.jsonl")
    cache = compute_error_cache((r.path, r.landmarks) for r in records)
    policy, report = calibrate_policy(list(cache.values()), ctx.cfg.augmentation)
    policy = replace(policy, rng_seed=ctx.cfg.seed)
    cache_path = ctx.out / "error_cache.json"
    save_error_cache(cache_path, cache)
    out = ctx.out / "calibration.json"
    write_json(out, {"policy": asdict(policy), "report": report})
    ctx.outputs.update(calibration=str(out), error_cache=str(cache_path))


def cmd_train_defront(ctx: Context) -> None:
    root = _dataset_dir(ctx)
    manifest = _require(root / "pairs.jsonl", "pair manifest")
    ctx.inputs["pairs"] = str(manifest)
    data = build_pair_tensors(load_pair_manifest(manifest))
    cfg = ctx.cfg.defront_config()
    out_dir = ctx.path(None, "defront")
    flows = pretrain_flows(data, cfg, ctx.cfg.nets, out_dir=out_dir)
    result = train_defront(data, cfg, flows, ctx.cfg.nets, out_dir=out_dir)
    summary = {
        "flow_photometric": [flows.initial_photometric, flows.final_photometric],
        "pixel": [result.initial_pixel, result.final_pixel],
    }
    write_json(out_dir / "summary.json", summary)
    ctx.outputs.update(checkpoint=str(out_dir / "defront.pt"), flows=str(out_dir / "flows.pt"), summary=str(out_dir / "summary.json"))


def cmd_defrontalize(ctx: Context) -> None:
    from .augmentation import apply_defrontalization
    from .geometry import align_frontal

    root = _dataset_dir(ctx)
    ckpt = _require(ctx.path(ctx.args.checkpoint, "defront/defront.pt"), "defrontalization checkpoint")
    ctx.inputs.update(checkpoint=str(ckpt), dataset=str(root))
    model = load_defront_model(ckpt)
    out_dir = ctx.path(None, "defrontalized")
    seen = set()
    for rec in load_pair_manifest(_require(root / "pairs.jsonl", "pair manifest")):
        if rec.frontal_path in seen:
            continue
        seen.add(rec.frontal_path)
        face = align_frontal(read_image(rec.frontal_path), rec.frontal_landmarks)
        stem = Path(rec.frontal_path).stem
        for side in ("left", "right"):
            res = apply_defrontalization(face, side, model)
            write_image(out_dir / f"{stem}_{side}.png", res.image)
            write_image(out_dir / f"{stem}_{side}_half.png", bisect_horizontal(face, side).image)
    ctx.outputs["defrontalized"] = str(out_dir)


def cmd_train_embed(ctx: Context) -> None:
    root = _dataset_dir(ctx)
    records = _face_records(root)
    calib = ctx.path(ctx.args.calibration, "calibration.json")
    if calib.exists():
        policy = AugmentationPolicy(**json.loads(calib.read_text())["policy"])
        ctx.inputs["calibration"] = str(calib)
    else:
        raise InputMissing(f"calibration not found: {calib}; run `defront calibrate` first")
    model = None
    if policy.error_threshold and policy.error_threshold > 0:
        ckpt = _require(ctx.path(ctx.args.defront, "defront/defront.pt"), "defrontalization checkpoint")
        ctx.inputs["defront"] = str(ckpt)
        model = load_defront_model(ckpt)
    test_paths = []
    tp = root / "test_pairs.txt"
    if tp.exists():
        test_paths = [p for pr in load_test_pairs(tp) for p in (pr.path_a, pr.path_b)]
    data = build_face_tensors(records)
    out_dir = ctx.path(None, "embed")
    res = train_embeddings(data, ctx.cfg.embed_config(policy), model, ctx.cfg.nets, out_dir, exclude_paths=test_paths)
    ctx.outputs.update(checkpoint=str(out_dir / "backbone.pt"), metrics=str(out_dir / "embed_metrics.jsonl"))
    write_json(out_dir / "summary.json", {"augmented_fractions": res.augmented_fractions, "optimizer_steps": res.optimizer_steps})


def cmd_eval(ctx: Context) -> None:
    root = _dataset_dir(ctx)
    ckpt = _require(ctx.path(ctx.args.checkpoint, "embed/backbone.pt"), "backbone checkpoint")
    ctx.inputs.update(checkpoint=str(ckpt), dataset=str(root))
    backbone = load_backbone(ckpt)
    test = load_face_manifest(_require(root / "test" / "landmarks.jsonl", "test landmarks"))
    embedder = BackboneEmbedder.from_records(backbone, test)
    out_dir = ctx.path(None, "eval")
    ver = verify_10fold(load_test_pairs(_require(root / "test_pairs.txt", "test pairs")), embedder)
    write_json(out_dir / "verification.json", ver.to_dict())
    ident = identify_top1(load_gallery(root / "gallery.jsonl"), load_gallery(root / "probes.jsonl"), embedder)
    write_json(out_dir / "identification.json", ident.to_dict())
    ctx.outputs.update(verification=str(out_dir / "verification.json"), identification=str(out_dir / "identification.json"))
    if ctx.cfg.evaluation.csv:
        write_identification_csv(out_dir / "identification.csv", ident)
        ctx.outputs["identification_csv"] = str(out_dir / "identification.csv")
    if ctx.args.poses:
        raw = json.loads(_require(Path(ctx.args.poses), "pose annotations").read_text())
        stats = pose_pair_stats([(p["a"], p["b"]) for p in raw])
        write_json(out_dir / "pose_stats.json", stats)
        ctx.outputs["pose_stats"] = str(out_dir / "pose_stats.json")
    log.info("verification accuracy %.4f, identification average %.4f", ver.mean_accuracy, ident.average)


def cmd_bench(ctx: Context) -> None:
    ckpt = _require(ctx.path(ctx.args.checkpoint, "embed/backbone.pt"), "backbone checkpoint")
    dckpt = _require(ctx.path(ctx.args.defront, "defront/defront.pt"), "defrontalization checkpoint")
    ctx.inputs.update(checkpoint=str(ckpt), defront=str(dckpt))
    backbone = load_backbone(ckpt).to(ctx.device)
    model = load_defront_model(dckpt).to(ctx.device)
    ev = ctx.cfg.evaluation
    res = benchmark_inference(standard_pipelines(backbone, model), iterations=ev.iterations, warmup=ev.warmup, device=str(ctx.device), seed=ctx.cfg.seed)
    out = ctx.out / "bench.json"
    write_json(out, res.to_dict())
    ctx.outputs["bench"] = str(out)


COMMANDS: dict[str, Callable[[Context], None]] = {
    "synth": cmd_synth,
    "align": cmd_align,
    "calibrate": cmd_calibrate,
    "train-defront": cmd_train_defront,
    "defrontalize": cmd_defrontalize,
    "train-embed": cmd_train_embed,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="cap on intra-op threads")
    common.add_argument("--device", default="cpu")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--data", type=Path, help="dataset directory (default: OUT/dataset)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="defront", description="Pose-augmented face embedding pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="render a synthetic paired dataset")
    p.add_argument("--n", type=int, help="number of identities")
    sub.add_parser("align", parents=[common], help="align the pair manifest images")
    sub.add_parser("calibrate", parents=[common], help="calibrate the augmentation error threshold")
    sub.add_parser("train-defront", parents=[common], help="pretrain flows and train the defrontalization model")
    p = sub.add_parser("defrontalize", parents=[common], help="dump synthesized profiles for inspection")
    p.add_argument("--checkpoint", type=Path)
    p = sub.add_parser("train-embed", parents=[common], help="train the embedding backbone")
    p.add_argument("--defront", type=Path)
    p.add_argument("--calibration", type=Path)
    p = sub.add_parser("eval", parents=[common], help="verification and identification reports")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--poses", type=Path, help="JSON list of {a: {pitch,yaw,roll}, b: {...}} annotations")
    p = sub.add_parser("bench", parents=[common], help="latency of embed-only vs defrontalize+embed")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--defront", type=Path)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    started = time.time()
    ctx = None
    try:
        ctx = Context(args)
        COMMANDS[args.command](ctx)
        ctx.manifest(args.command, started)
        return 0
    except DefrontError as exc:
        err = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        if ctx is not None:
            try:
                ctx.manifest(args.command, started, "failed", err)
            except OSError:
                pass
        return 2 if isinstance(exc, (ConfigInvalid, InputMissing)) else 1
    except (ValueError, OSError, RuntimeError) as exc:
        err = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
