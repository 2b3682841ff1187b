"""Training loop: ray batching, loss assembly per schedule, Adam, checkpoints."""

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diff
from .camera import make_rays, partial_interval, sample_adjacent_batch, surface_points
from .encoding import GranularitySchedule
from .evaluation import psnr
from .field import FieldConfig, init_params, load_checkpoint, save_checkpoint
from .regularizers import (depth_supervised_loss, explicit_normal, loss_schedule,
                           patch_planarity, points_to_arrays)
from .rendering import (color_loss, render_depth, render_rays, stratified_sample,
                        uncertainty_loss)

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "loss_total", "loss_color", "loss_planar", "loss_ds", "psnr_probe"]


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_iterations: int = 20000
    batch_size: int = 256
    lr: float = 5e-4
    lr_schedule: str = "constant"  # or "cosine"
    n_samples: int = 64
    p_n: float = 0.5
    partial_mode: str = "centered"
    planar_weight: float = 0.1
    ds_weight: float = 1000.0
    ds_fraction: float = 0.25
    ds_batch: int = 64
    granularity_fraction: float = 0.10
    granularity_bias: float = None  # None: half the frequencies
    use_planarity: bool = True
    use_granularity: bool = True
    use_depth_sup: bool = True
    color_epochs: int = 2
    planar_start_epoch: int = 3
    shading: str = None
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    probe_size: int = 1024
    field: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("p_n", "ds_fraction", "granularity_fraction"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.p_n == 0:
            raise ConfigError("p_n must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be >= 1")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.shading not in (None, "sun"):
            raise ConfigError(f"unknown shading {self.shading!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        known = {f.name for f in dataclasses.fields(FieldConfig)} - {"n_images"}
        extra = set(self.field) - known
        if extra:
            raise ConfigError(f"unknown field option(s): {', '.join(sorted(extra))}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(extra))}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def field_config(self, n_images):
        return FieldConfig(n_images=n_images, **self.field)

    def granularity(self, n_freqs):
        return GranularitySchedule.for_training(self.total_iterations, n_freqs,
                                                self.granularity_fraction, self.granularity_bias)


def iterations_per_epoch(n_pixels, batch_size):
    return math.ceil(n_pixels / batch_size)


# --- Adam ---------------------------------------------------------------------


def adam_init(arrays):
    return {"step": 0, "m": {k: np.zeros_like(v) for k, v in arrays.items()},
            "v": {k: np.zeros_like(v) for k, v in arrays.items()}}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam on dicts of arrays; returns (new params, new state)."""
    if set(state["m"]) != set(params):
        raise ConfigError("optimizer state does not match the parameters")
    step = state["step"] + 1
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match {k} {p.shape}")
        m = beta1 * state["m"][k] + (1 - beta1) * g
        v = beta2 * state["v"][k] + (1 - beta2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[k] = (p - upd).astype(p.dtype)
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_p, {"step": step, "m": new_m, "v": new_v}


def learning_rate(config, iteration):
    if config.lr_schedule == "cosine":
        return config.lr * 0.5 * (1 + math.cos(math.pi * iteration / config.total_iterations))
    return config.lr


# --- one iteration ------------------------------------------------------------


@dataclass
class Streams:
    """Independent generators so switching a term off leaves the others untouched."""

    batch: np.random.Generator
    strat: np.random.Generator
    adjacent: np.random.Generator
    depth: np.random.Generator

    @classmethod
    def from_seed(cls, seed):
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)))


class Trainer:
    """Holds the dataset views, parameters and optimizer state of one run."""

    def __init__(self, config, dataset):
        self.config = config
        self.data = dataset
        self.cams = {c.image_id: c for c in dataset.cams}
        self.frame = dataset.frame
        n, h, w = dataset.images.shape[:3]
        self.shape = (n, h, w)
        self.ipe = iterations_per_epoch(n * h * w, config.batch_size)
        self.fconf = config.field_config(n)
        self.params = init_params(self.fconf, seed=config.seed)
        self.state = adam_init({k: t.data for k, t in self.params.tensors.items()})
        self.sched = config.granularity(self.fconf.pos_freqs)
        self.rng = Streams.from_seed(config.seed)
        ids, pix, X, wts = points_to_arrays(dataset.points)
        self.sparse = (ids, pix, X.astype(np.float32), wts.astype(np.float32))
        probe_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(5)[4])
        self.probe = self._draw_pixels(probe_rng, min(config.probe_size, n * h * w))

    def epoch(self, iteration):
        return iteration // self.ipe + 1

    def _draw_pixels(self, rng, count):
        n, h, w = self.shape
        flat = rng.integers(0, n * h * w, size=count)
        ids, rest = np.divmod(flat, h * w)
        v, u = np.divmod(rest, w)
        return ids, np.stack([u, v], axis=-1)

    def _rays(self, ids, pix):
        return make_rays(self.cams, self.frame, ids, pix, q=self.params["image.q"])

    def losses(self, iteration):
        """Forward pass of one iteration; returns (total, parts, batch record)."""
        cfg = self.config
        lw = loss_schedule(iteration, self.epoch(iteration), cfg)
        n_s = cfg.n_samples
        ids, pix = self._draw_pixels(self.rng.batch, cfg.batch_size)
        rays = self._rays(ids, pix)
        t = stratified_sample(rays.t_near, rays.t_far, n_s, self.rng.strat)
        out = render_rays(self.params, rays, t, self.cams, lw.mask_t, self.sched, cfg.shading)
        gt = self.data.images[ids, pix[:, 1], pix[:, 0]]
        if lw.uncertainty:
            photo = uncertainty_loss(out.color, gt, out.beta, out.tau, self.fconf.beta_min)
        else:
            photo = color_loss(out.color, gt)
        total = photo
        parts = {"color": photo.item(), "planar": 0.0, "ds": 0.0}
        if lw.planar > 0:
            lp = self.planar_term(rays, out.depth, lw.mask_t)
            total = total + lw.planar * lp
            parts["planar"] = lp.item()
        if lw.ds > 0:
            lds = self.ds_term(lw.mask_t)
            total = total + lw.ds * lds
            parts["ds"] = lds.item()
        return total, parts, {"iteration": iteration, "image_ids": ids, "pixels": pix, "t": t}

    def planar_term(self, rays, depth, mask_t):
        cfg = self.config
        _, h, w = self.shape
        (nx, ny), (sx, sy) = sample_adjacent_batch(rays.pixels[:, 0], rays.pixels[:, 1], (w, h),
                                                   self.rng.adjacent)
        center = depth.data  # centering is not differentiated
        pts = [surface_points(rays, depth)]
        for nb in (nx, ny):
            r = self._rays(rays.image_ids, nb)
            near, far, n_red = partial_interval(r.t_near, r.t_far, center, cfg.p_n, cfg.n_samples,
                                                mode=cfg.partial_mode)
            tn = stratified_sample(near.astype(np.float32), far.astype(np.float32), n_red,
                                   self.rng.strat)
            r.t_near = near.astype(np.float32)
            d, _ = render_depth(self.params, r, tn, mask_t, self.sched)
            pts.append(surface_points(r, d))
        return patch_planarity(pts[0], pts[1], pts[2], sx, sy)

    def ds_term(self, mask_t):
        ids, pix, X, wts = self.sparse
        if len(ids) == 0:
            return diff.Tensor(np.zeros((), np.float32))
        sel = self.rng.depth.integers(0, len(ids), size=self.config.ds_batch)
        rays = self._rays(ids[sel], pix[sel])
        t = stratified_sample(rays.t_near, rays.t_far, self.config.n_samples, self.rng.strat)
        d, _ = render_depth(self.params, rays, t, mask_t, self.sched)
        return depth_supervised_loss(d, X[sel], rays.origins, wts[sel], rays.t_near, rays.t_far)

    def step(self, iteration):
        total, parts, batch = self.losses(iteration)
        value = total.item()
        if not np.isfinite(value):
            return value, parts, batch
        leaves = self.params.leaves()
        grads = diff.backward(total, wrt=leaves)
        names = self.params.names()
        arrays = {k: self.params[k].data for k in names}
        new, self.state = adam_step(arrays, dict(zip(names, grads)), self.state,
                                    learning_rate(self.config, iteration))
        self.params = self.params.with_arrays(new)
        return value, parts, batch

    def probe_psnr(self, iteration):
        ids, pix = self.probe
        lw = loss_schedule(iteration, self.epoch(iteration), self.config)
        with diff.no_grad():
            rays = self._rays(ids, pix)
            t = stratified_sample(rays.t_near, rays.t_far, self.config.n_samples)
            out = render_rays(self.params, rays, t, self.cams, lw.mask_t, self.sched,
                              self.config.shading)
        return psnr(out.color.data, self.data.images[ids, pix[:, 1], pix[:, 0]])

    def checkpoint(self, path, iteration):
        meta = {"iteration": iteration, "train_config": self.config.to_dict(),
                "frame": self.frame.to_dict(), "dataset": str(self.data.root)}
        save_checkpoint(path, self.params, meta)


def _dump_batch(out, batch, parts):
    path = Path(out) / "nan_dump.npz"
    np.savez(path, **batch, **{f"loss_{k}": v for k, v in parts.items()})
    return path


def train(config, dataset, out, progress=None):
    """Run the optimization; writes metrics.csv, checkpoint.sgnf (+ interval checkpoints)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config, dataset)
    rows = []
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for it in range(config.total_iterations):
            value, parts, batch = trainer.step(it)
            if not np.isfinite(value):
                dump = _dump_batch(out, batch, parts)
                raise NumericError(f"non-finite loss at iteration {it}; batch dumped to {dump}")
            last = it == config.total_iterations - 1
            if it % config.log_every == 0 or last:
                row = [it, value, parts["color"], parts["planar"], parts["ds"],
                       trainer.probe_psnr(it)]
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
                f.flush()
                rows.append(row)
                if progress:
                    progress(row)
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0 and not last:
                trainer.checkpoint(out / f"checkpoint_{it + 1:06d}.sgnf", it + 1)
    trainer.checkpoint(out / "checkpoint.sgnf", config.total_iterations)
    return trainer, rows


def read_metrics(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header")
        return np.array([[float(v) for v in row] for row in reader])


# --- rendering a trained field ------------------------------------------------


def load_for_render(checkpoint, config=None):
    """Parameters, training config and frame metadata from a checkpoint."""
    params, meta = load_checkpoint(checkpoint, config)
    tc = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else None
    return params, tc, meta


def normal_map(points):
    """Unit normals (H, W, 3) from a (H, W, 3) grid of surface points."""
    h, w = points.shape[:2]
    if h < 2 or w < 2:
        raise ValueError("normal map needs at least a 2x2 image")
    vv, uu = np.mgrid[0:h, 0:w]
    sx = np.where(uu == w - 1, -1, 1)
    sy = np.where(vv == h - 1, -1, 1)
    p = points.reshape(-1, 3)
    p1 = points[vv, uu + sx].reshape(-1, 3)
    p2 = points[vv + sy, uu].reshape(-1, 3)
    with diff.no_grad():
        n, _ = explicit_normal(p, p1, p2, sx.ravel(), sy.ravel())
    return n.data.reshape(h, w, 3)


def colorize_normals(normals):
    return np.clip((normals + 1.0) / 2.0, 0.0, 1.0)


def render_view(params, cam, frame, n_samples=64, t_render=None, sched=None, chunk=4096,
                shading=None, use_q=True):
    """Full-frame image, depth (normalized) and normal map for one camera.

    Samples sit at bin midpoints so the result is deterministic.  ``t_render``
    None renders with the frequency mask fully open.
    """
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    ids = np.full(len(pix), cam.image_id)
    q = params["image.q"] if use_q else None
    if cam.image_id >= params.config.n_images:
        q = None
    colors, depths, pts = [], [], []
    cams = {cam.image_id: cam}
    with diff.no_grad():
        for s in range(0, len(pix), chunk):
            rays = make_rays(cams, frame, ids[s:s + chunk], pix[s:s + chunk], q=q)
            t = stratified_sample(rays.t_near, rays.t_far, n_samples)
            out = render_rays(params, rays, t, cams, t_render, sched if t_render is not None else None,
                              shading)
            colors.append(out.color.data)
            depths.append(out.depth.data)
            pts.append(surface_points(rays, out.depth).data)
    img = np.concatenate(colors).reshape(cam.height, cam.width, 3)
    depth = np.concatenate(depths).reshape(cam.height, cam.width)
    normals = normal_map(np.concatenate(pts).reshape(cam.height, cam.width, 3).astype(np.float64))
    return img, depth, normals


def rendered_q(params, cam):
    """Pixel adjustment learned for ``cam`` (zero for unseen cameras)."""
    if cam.image_id >= params.config.n_images:
        return np.zeros(2)
    return params["image.q"].data[cam.image_id].astype(np.float64)
