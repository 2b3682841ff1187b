"""satgeo command line: gen, train, render, eval.

Exit codes: 0 success, 1 validation error, 2 missing input, 3 numeric failure.
Set SATGEO_THREADS to cap BLAS worker threads.
"""

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, runtime
from .camera import CameraError, load_camera
from .evaluation import EvaluationError, aligned_mae, extract_dsm, psnr, write_report
from .field import CheckpointError
from .io import ensure_dir, write_pfm, write_png
from .scenegen import SpecError, load_dataset, preset, validate_spec, volume_depth_map, write_dataset
from .training import (ConfigError, NumericError, TrainConfig, colorize_normals, load_for_render,
                       render_view, rendered_q, train)

log = logging.getLogger("satgeo")

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class MissingInput(Exception):
    pass


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"{what} not found: {path}")
    return path


def _refuse_nonempty(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
    return ensure_dir(out)


def version_stamp():
    stamp = {"satgeo": __version__}
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            stamp["git"] = rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


# --- gen ----------------------------------------------------------------------


def cmd_gen(args):
    if args.spec:
        spec = json.loads(_require(args.spec, "scene spec").read_text())
    else:
        spec = preset(args.preset)
    validate_spec(spec)
    _refuse_nonempty(args.out, args.force)
    write_dataset(args.out, spec, seed=args.seed, force=True)
    log.info("wrote %d views to %s", spec["cameras"]["count"], args.out)


# --- train --------------------------------------------------------------------


def build_config(args):
    base = {}
    if args.config:
        base = json.loads(_require(args.config, "config file").read_text())
    cfg = TrainConfig.from_dict(base)
    overrides = {"total_iterations": args.iterations, "batch_size": args.batch_size,
                 "n_samples": args.samples, "lr": args.lr, "p_n": args.p_n, "seed": args.seed,
                 "log_every": args.log_every, "checkpoint_every": args.checkpoint_every}
    d = cfg.to_dict()
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_planarity:
        d["use_planarity"] = False
    if args.no_granularity:
        d["use_granularity"] = False
    if args.no_depth_sup:
        d["use_depth_sup"] = False
    return TrainConfig.from_dict(d)


def cmd_train(args):
    if args.manifest:
        manifest = json.loads(_require(args.manifest, "manifest").read_text())
        cfg = TrainConfig.from_dict(manifest["config"])
        dataset = Path(args.dataset or manifest["dataset"])
        out = Path(args.out or manifest["output_dir"])
    else:
        if not args.dataset or not args.out:
            raise ConfigError("train needs DATASET and OUT (or --manifest)")
        cfg = build_config(args)
        dataset, out = Path(args.dataset), Path(args.out)
    _require(dataset / "scene.json", "dataset")
    _refuse_nonempty(out, args.force)
    ds = load_dataset(dataset)
    manifest = {"config": cfg.to_dict(), "version": version_stamp(), "seed": cfg.seed,
                "dataset": str(dataset.resolve()), "output_dir": str(out.resolve())}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def progress(row):
        log.info("iter %d  loss %.5f  color %.5f  planar %.4f  ds %.6f  psnr %.2f", *row)

    train(cfg, ds, out, progress=progress)
    log.info("checkpoint written to %s", out / "checkpoint.sgnf")


# --- render / eval ------------------------------------------------------------


def _load_checkpoint(path):
    params, tc, meta = load_for_render(_require(path, "checkpoint"))
    if "frame" not in meta:
        raise CheckpointError(f"{path}: checkpoint metadata lacks the scene frame")
    from .camera import SceneFrame
    return params, tc, meta, SceneFrame.from_dict(meta["frame"])


def _camera_for(args, meta):
    if args.camera:
        return load_camera(_require(args.camera, "camera file"))
    root = Path(args.dataset or meta.get("dataset", ""))
    path = root / "cameras" / f"{args.cam:03d}.json"
    return load_camera(_require(path, f"camera {args.cam}"))


def _sched(params, tc, t_render):
    if t_render is None or tc is None:
        return None
    return tc.granularity(params.config.pos_freqs)


def cmd_render(args):
    params, tc, meta, frame = _load_checkpoint(args.checkpoint)
    cam = _camera_for(args, meta)
    n = args.samples or (tc.n_samples if tc else 64)
    img, depth, normals = render_view(params, cam, frame, n, args.t_render,
                                      _sched(params, tc, args.t_render))
    out = ensure_dir(args.out)
    stem = f"{cam.image_id:03d}"
    write_png(out / f"render_{stem}.png", img)
    write_pfm(out / f"depth_{stem}.pfm", depth)
    write_pfm(out / f"normals_{stem}.pfm", normals)
    write_png(out / f"normals_{stem}.png", colorize_normals(normals))
    log.info("rendered view %d to %s", cam.image_id, out)


def _json_db(v):
    return "inf" if v == float("inf") else v


def cmd_eval(args):
    ds_root = _require(Path(args.dataset) / "scene.json", "dataset").parent
    ds = load_dataset(ds_root)
    out = _refuse_nonempty(args.out, args.force)
    per_view = []
    if args.ground_truth:
        scene = ds.scene()
        for cam in ds.cams:
            depth = volume_depth_map(scene, cam, args.samples or 256)
            dsm = extract_dsm(depth, cam, ds.frame, ds.dsm_gt)
            per_view.append(_score(cam, dsm, ds, out, None))
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --ground-truth")
        params, tc, meta, _ = _load_checkpoint(args.checkpoint)
        n = args.samples or (tc.n_samples if tc else 64)
        for cam in ds.cams:
            img, depth, _ = render_view(params, cam, ds.frame, n)
            dsm = extract_dsm(depth, cam, ds.frame, ds.dsm_gt, q=rendered_q(params, cam))
            per_view.append(_score(cam, dsm, ds, out, psnr(img, ds.images[cam.image_id])))
    finite = [v["psnr_db"] for v in per_view if isinstance(v["psnr_db"], float)]
    report = write_report(out / "report.json", [dict(v, psnr_db=_json_db(v["psnr_db"]))
                                                for v in per_view])
    if finite:
        log.info("mean MAE %.3f m, mean PSNR %.2f dB", report["mean_mae_m"], np.mean(finite))
    else:
        log.info("mean MAE %.3f m", report["mean_mae_m"])


def _score(cam, dsm, ds, out, p):
    err, offset = aligned_mae(dsm, ds.dsm_gt)
    dsm.save(out / f"dsm_{cam.image_id:03d}.pfm")
    return {"image_id": cam.image_id, "mae_m": err, "offset_m": offset, "psnr_db": p}


# --- parser -------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="satgeo", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--spec", help="scene spec JSON file")
    src.add_argument("--preset", default="toy-jax", help="named scene preset (default: toy-jax)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.add_argument("out", help="output dataset directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a field on a dataset")
    t.add_argument("dataset", nargs="?", help="dataset directory")
    t.add_argument("out", nargs="?", help="run directory")
    t.add_argument("--config", help="training config JSON; flags override it")
    t.add_argument("--manifest", help="re-run from a manifest.json written by a previous run")
    t.add_argument("--iterations", type=int, help="total iterations")
    t.add_argument("--batch-size", type=int, help="rays per batch")
    t.add_argument("--samples", type=int, help="samples per ray")
    t.add_argument("--lr", type=float, help="Adam learning rate")
    t.add_argument("--p-n", type=float, help="partial adjacent ray length fraction")
    t.add_argument("--seed", type=int, help="run seed")
    t.add_argument("--log-every", type=int, help="metrics row interval")
    t.add_argument("--checkpoint-every", type=int, help="extra checkpoint interval (0: off)")
    t.add_argument("--no-planarity", action="store_true", help="disable the planarity loss")
    t.add_argument("--no-granularity", action="store_true", help="disable frequency masking")
    t.add_argument("--no-depth-sup", action="store_true", help="disable sparse depth supervision")
    t.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render image, depth and normals for one camera")
    r.add_argument("checkpoint", help="checkpoint file")
    r.add_argument("out", help="output directory")
    r.add_argument("--cam", type=int, default=0, help="camera id in the dataset (default: 0)")
    r.add_argument("--dataset", help="dataset directory (default: the one trained on)")
    r.add_argument("--camera", help="camera JSON file instead of a dataset camera")
    r.add_argument("--samples", type=int, help="samples per ray (default: training value)")
    r.add_argument("--t-render", type=int, help="frequency-mask iteration (default: fully open)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="per-view DSM MAE and PSNR")
    e.add_argument("dataset", help="dataset directory")
    e.add_argument("out", help="output directory for report.json and DSMs")
    which = e.add_mutually_exclusive_group(required=True)
    which.add_argument("--checkpoint", help="checkpoint file to evaluate")
    which.add_argument("--ground-truth", action="store_true",
                       help="evaluate the generator's own density field instead")
    e.add_argument("--samples", type=int, help="samples per ray")
    e.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    runtime.keep_heap()
    try:
        limiter = runtime.cap_threads()
        try:
            args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (MissingInput, FileNotFoundError) as e:
        log.error("%s", e)
        return EXIT_MISSING
    except NumericError as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except (ConfigError, SpecError, CameraError, CheckpointError, EvaluationError,
            FileExistsError, ValueError, KeyError) as e:
        log.error("%s", e)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
