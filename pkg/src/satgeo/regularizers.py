"""Geometric regularizers: gravity-aligned planarity and sparse depth supervision."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diff

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-8
GRAVITY = np.array([0.0, 0.0, 1.0])
CSV_HEADER = ["image_id", "u", "v", "x", "y", "z", "reproj_err_px"]


@dataclass(frozen=True)
class SparseDepthPoint:
    X: tuple  # normalized scene frame
    image_id: int
    pixel: tuple
    weight: float
    reproj_err: float = 0.0


def reprojection_weight(err_px, lo=0.1, hi=1.0):
    """w = 1 / (1 + e), clamped to [lo, hi]."""
    return np.clip(1.0 / (1.0 + np.asarray(err_px, np.float64)), lo, hi)


def explicit_normal(p, p1, p2, sx, sy):
    """Unit normals of the planes through (p, p1, p2), canonicalized by sx*sy.

    Works on single 3-vectors or (R, 3) batches, Tensors or arrays.  Returns
    ``(normals, valid)``: rows whose cross product norm is below
    ``DEGENERATE_EPS`` are flagged invalid and their normal is left at zero;
    no gradient flows through them.
    """
    p, p1, p2 = (diff.as_tensor(v) for v in (p, p1, p2))
    single = p.ndim == 1
    if single:
        p, p1, p2 = (diff.reshape(v, (1, 3)) for v in (p, p1, p2))
    c = diff.cross(p1 - p, p2 - p)
    length = np.linalg.norm(c.data.astype(np.float64), axis=-1)
    valid = length >= DEGENERATE_EPS
    sign = (np.asarray(sx) * np.asarray(sy)).reshape(-1)
    sign = np.broadcast_to(sign, valid.shape)
    idx = np.flatnonzero(valid)
    n = len(valid)
    if len(idx) == n:
        unit = c / diff.norm(c, axis=-1, keepdims=True)
        normals = unit * sign[:, None].astype(c.dtype)
    else:
        cv = diff.getitem(c, idx)
        unit = cv / diff.norm(cv, axis=-1, keepdims=True) * sign[idx, None].astype(c.dtype)
        normals = _scatter_rows(unit, idx, n)
    if single:
        return diff.reshape(normals, (3,)), bool(valid[0])
    return normals, valid


def _scatter_rows(rows, idx, n):
    out = np.zeros((n,) + rows.shape[1:], rows.dtype)
    out[idx] = rows.data

    def vjp(g):
        return (g[idx],)

    return diff.make_op(out, (rows,), vjp, "scatter_rows")


def planarity_loss(normals, valid=None, g=GRAVITY):
    """Mean of ||g - n||_2 over valid patches (zero when none are valid)."""
    normals = diff.as_tensor(normals)
    if normals.ndim == 1:
        normals = diff.reshape(normals, (1, 3))
    if valid is not None:
        idx = np.flatnonzero(valid)
        if len(idx) == 0:
            return diff.Tensor(np.zeros((), normals.dtype))
        if len(idx) < len(valid):
            normals = diff.getitem(normals, idx)
    g = np.asarray(g, normals.dtype)
    return diff.mean(diff.norm(g - normals, axis=-1))


def patch_planarity(p, p1, p2, sx, sy, g=GRAVITY):
    """Planarity loss straight from the three surface points of each patch."""
    normals, valid = explicit_normal(p, p1, p2, sx, sy)
    return planarity_loss(normals, np.atleast_1d(valid), g)


def depth_supervised_loss(depth, points, origins, weights, t_near=None, t_far=None):
    """Weighted squared error between rendered depth and ||X - o||.

    ``depth`` (R,), ``points`` (R, 3) and ``origins`` (R, 3, Tensor or array)
    share the normalized frame.  Points whose distance falls outside
    [t_near, t_far] are dropped with a warning.
    """
    depth = diff.as_tensor(depth)
    origins = diff.as_tensor(origins, depth)
    target = diff.norm(diff.as_tensor(points, depth) - origins, axis=-1)
    weights = np.asarray(weights, depth.dtype)
    keep = np.ones(len(weights), bool)
    if t_near is not None:
        keep &= target.data >= np.asarray(t_near)
    if t_far is not None:
        keep &= target.data <= np.asarray(t_far)
    if not keep.all():
        log.warning("depth supervision: excluded %d of %d points outside the ray span",
                    int((~keep).sum()), len(keep))
        idx = np.flatnonzero(keep)
        if len(idx) == 0:
            return diff.Tensor(np.zeros((), depth.dtype))
        depth, target, weights = diff.getitem(depth, idx), diff.getitem(target, idx), weights[idx]
    return diff.mean(weights * diff.square(depth - target))


@dataclass(frozen=True)
class LossWeights:
    uncertainty: bool
    planar: float
    ds: float
    mask_t: object  # iteration fed to the frequency mask, None when the mask is off


def loss_schedule(iteration, epoch, config):
    """Active loss terms for 0-based ``iteration`` in 1-based ``epoch``.

    ``config`` provides total_iterations, planar_weight, ds_weight,
    ds_fraction, planar_start_epoch, color_epochs and the use_* switches.
    """
    uncertainty = epoch > config.color_epochs
    planar = config.planar_weight if config.use_planarity and epoch >= config.planar_start_epoch else 0.0
    ds_active = config.use_depth_sup and iteration < config.ds_fraction * config.total_iterations
    ds = config.ds_weight if ds_active else 0.0
    mask_t = iteration if config.use_granularity else None
    return LossWeights(uncertainty, planar, ds, mask_t)


def save_sparse_points(path, rows):
    """Write rows of (image_id, u, v, x, y, z, reproj_err_px); x, y, z in meters."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([int(r[0]), int(r[1]), int(r[2])] + [repr(float(v)) for v in r[3:]])


def load_sparse_points(path, frame=None):
    """Read the sparse point CSV; with ``frame`` positions become normalized."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        pts = []
        for row in reader:
            iid, u, v = int(row[0]), int(row[1]), int(row[2])
            xyz = np.array([float(x) for x in row[3:6]])
            err = float(row[6])
            if frame is not None:
                xyz = frame.to_normalized(xyz)
            pts.append(SparseDepthPoint(tuple(xyz), iid, (u, v), float(reprojection_weight(err)), err))
    return pts


def points_to_arrays(points):
    return (np.array([p.image_id for p in points], np.int64),
            np.array([p.pixel for p in points], np.int64).reshape(-1, 2),
            np.array([p.X for p in points], np.float64).reshape(-1, 3),
            np.array([p.weight for p in points], np.float64))


def sparse_points_path(root):
    return Path(root) / "sparse_points.csv"
