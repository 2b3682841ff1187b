"""DSM extraction from rendered depth, vertical alignment, MAE and PSNR."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera import make_rays
from .io import read_pfm, write_pfm

NODATA = -9999.0


class EvaluationError(ValueError):
    pass


@dataclass
class DsmGrid:
    """Altitude raster; row i covers y in [oy + i res, oy + (i+1) res). NaN marks nodata."""

    origin: tuple
    resolution: float
    altitudes: np.ndarray

    def __post_init__(self):
        if not self.resolution > 0:
            raise EvaluationError("DSM resolution must be positive")
        self.altitudes = np.asarray(self.altitudes, np.float64)

    @property
    def height(self):
        return self.altitudes.shape[0]

    @property
    def width(self):
        return self.altitudes.shape[1]

    @property
    def valid(self):
        return np.isfinite(self.altitudes)

    def cell_centers(self):
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        return np.meshgrid(xs, ys)

    def same_grid(self, other):
        return (np.allclose(self.origin, other.origin) and self.resolution == other.resolution
                and self.altitudes.shape == other.altitudes.shape)

    def empty_like(self):
        return DsmGrid(self.origin, self.resolution, np.full(self.altitudes.shape, np.nan))

    def save(self, path):
        path = Path(path)
        write_pfm(path, np.where(self.valid, self.altitudes, NODATA))
        meta = {"origin_m": list(map(float, self.origin)), "resolution_m": float(self.resolution),
                "nodata": NODATA}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        alt = read_pfm(path).astype(np.float64)
        alt[alt == meta.get("nodata", NODATA)] = np.nan
        return cls(tuple(meta["origin_m"]), float(meta["resolution_m"]), alt)


def fill_nearest(alt, radius):
    """Fill NaN cells from the nearest valid cell within ``radius`` cells."""
    empty = ~np.isfinite(alt)
    if not empty.any() or empty.all():
        return alt
    dist, (ii, jj) = ndimage.distance_transform_edt(empty, return_indices=True)
    out = alt.copy()
    fill = empty & (dist <= radius)
    out[fill] = alt[ii[fill], jj[fill]]
    return out


def points_to_dsm(points_m, grid, fill_radius=3):
    """Mean altitude per cell of (N, 3) meter-space points."""
    pts = np.asarray(points_m, np.float64).reshape(-1, 3)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    col = np.floor((pts[:, 0] - grid.origin[0]) / grid.resolution).astype(np.int64)
    row = np.floor((pts[:, 1] - grid.origin[1]) / grid.resolution).astype(np.int64)
    inside = (col >= 0) & (col < grid.width) & (row >= 0) & (row < grid.height)
    if not inside.any():
        raise EvaluationError("no surface point falls inside the DSM grid")
    cell = row[inside] * grid.width + col[inside]
    n = grid.width * grid.height
    total = np.bincount(cell, weights=pts[inside, 2], minlength=n)
    count = np.bincount(cell, minlength=n)
    alt = np.full(n, np.nan)
    hit = count > 0
    alt[hit] = total[hit] / count[hit]
    alt = fill_nearest(alt.reshape(grid.height, grid.width), fill_radius)
    return DsmGrid(grid.origin, grid.resolution, alt)


def depth_to_points(depth_map, cam, frame, q=None):
    """Meter-space surface points for every pixel of a (H, W) depth map.

    ``q`` is the pixel adjustment the depth was rendered with, if any.
    """
    h, w = depth_map.shape
    vv, uu = np.mgrid[0:h, 0:w]
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    rays = make_rays({cam.image_id: cam}, frame, np.full(len(pix), cam.image_id), pix,
                     dtype=np.float64)
    o = rays.origins_array()
    if q is not None:
        o = o + np.r_[np.asarray(q, np.float64) * cam.pixel_spacing / frame.scale, 0.0]
    pts = o + depth_map.reshape(-1, 1).astype(np.float64) * rays.dirs
    return frame.to_utm(pts)


def extract_dsm(depth_map, cam, frame, grid, fill_radius=3, q=None):
    """Per-view DSM from a (H, W) map of normalized ray depths."""
    return points_to_dsm(depth_to_points(depth_map, cam, frame, q), grid, fill_radius)


def align_dsm(pred, gt, min_fraction=0.10):
    """Vertical offset median(gt - pred) over co-valid cells."""
    if not pred.same_grid(gt):
        raise EvaluationError("DSMs must share the same grid")
    both = pred.valid & gt.valid
    if both.sum() < min_fraction * both.size:
        raise EvaluationError(f"only {both.sum()} of {both.size} cells are co-valid")
    return float(np.median(gt.altitudes[both] - pred.altitudes[both]))


def mae(pred, gt, mask=None):
    """Mean |pred - gt| over co-valid cells passing ``mask``."""
    if not pred.same_grid(gt):
        raise EvaluationError("DSMs must share the same grid")
    sel = pred.valid & gt.valid
    if mask is not None:
        sel &= np.asarray(mask, bool)
    if not sel.any():
        raise EvaluationError("no valid cells to compare")
    return float(np.mean(np.abs(pred.altitudes[sel] - gt.altitudes[sel])))


def aligned_mae(pred, gt, mask=None):
    offset = align_dsm(pred, gt)
    shifted = DsmGrid(pred.origin, pred.resolution, pred.altitudes + offset)
    return mae(shifted, gt, mask), offset


def psnr(img, gt, mask=None):
    """10 log10(1 / MSE) for images in [0, 1]; +inf when identical."""
    img = np.asarray(img, np.float64)
    gt = np.asarray(gt, np.float64)
    if img.shape != gt.shape:
        raise EvaluationError(f"image shapes differ: {img.shape} vs {gt.shape}")
    err = (img - gt) ** 2
    if mask is not None:
        err = err[np.asarray(mask, bool)]
    mse = float(np.mean(err))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def write_report(path, per_view):
    maes = [v["mae_m"] for v in per_view]
    psnrs = [v["psnr_db"] for v in per_view if v.get("psnr_db") is not None]
    report = {"per_view": per_view, "mean_mae_m": float(np.mean(maes)),
              "mean_psnr_db": float(np.mean(psnrs)) if psnrs else None}
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
    return report
