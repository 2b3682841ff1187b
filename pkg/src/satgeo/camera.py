"""Parallel-ray satellite camera and ray construction in a gravity-aligned frame.

The camera stands in for an RPC model: a pixel is lifted to the two scene
height bounds and the segment between those points becomes the ray.  All
rays of one camera share a single viewing direction.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diff

GRAVITY_UP = (0.0, 0.0, 1.0)


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class SceneFrame:
    """Isotropic similarity between UTM-like meters and the normalized box."""

    origin_utm: tuple
    scale: float
    gravity_up: tuple = GRAVITY_UP

    def __post_init__(self):
        if not self.scale > 0:
            raise CameraError(f"frame scale must be positive, got {self.scale}")
        if abs(np.linalg.norm(self.gravity_up) - 1.0) > 1e-12:
            raise CameraError("gravity_up must be a unit vector")

    def to_normalized(self, p_utm):
        return (np.asarray(p_utm, np.float64) - np.asarray(self.origin_utm, np.float64)) / self.scale

    def to_utm(self, p_norm):
        return np.asarray(p_norm, np.float64) * self.scale + np.asarray(self.origin_utm, np.float64)

    def to_dict(self):
        return {"origin_utm": list(self.origin_utm), "scale": self.scale,
                "gravity_up": list(self.gravity_up)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d["origin_utm"]), float(d["scale"]),
                   tuple(float(v) for v in d.get("gravity_up", GRAVITY_UP)))


@dataclass(frozen=True)
class SatCamera:
    image_id: int
    view_dir: tuple
    pixel_spacing: float
    image_size: tuple  # (width, height)
    h_min: float
    h_max: float
    ground_anchor: tuple  # meters; where pixel (0, 0) sits at altitude h_max
    sun_dir: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        d = np.asarray(self.view_dir, np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise CameraError(f"camera {self.image_id}: view_dir must be unit length")
        if not d[2] < 0:
            raise CameraError(f"camera {self.image_id}: view_dir must look down (z < 0)")
        if not self.h_max > self.h_min:
            raise CameraError(f"camera {self.image_id}: h_max must exceed h_min")
        if not self.pixel_spacing > 0:
            raise CameraError(f"camera {self.image_id}: pixel_spacing must be positive")

    @property
    def width(self):
        return self.image_size[0]

    @property
    def height(self):
        return self.image_size[1]

    def top_points(self, u, v):
        """Meters at altitude h_max for (sub)pixel coordinates u, v."""
        u = np.asarray(u, np.float64)
        v = np.asarray(v, np.float64)
        x = self.ground_anchor[0] + u * self.pixel_spacing
        y = self.ground_anchor[1] + v * self.pixel_spacing
        return np.stack([x, y, np.full_like(x, self.h_max)], axis=-1)

    def segment_length(self):
        """Distance in meters between the h_max and h_min points of any ray."""
        return (self.h_max - self.h_min) / -self.view_dir[2]

    def project(self, p_utm):
        """Subpixel (u, v) of meter-space points (inverse of ray lifting)."""
        p = np.asarray(p_utm, np.float64)
        d = np.asarray(self.view_dir, np.float64)
        top = p - d * ((self.h_max - p[..., 2:3]) / -d[2])
        u = (top[..., 0] - self.ground_anchor[0]) / self.pixel_spacing
        v = (top[..., 1] - self.ground_anchor[1]) / self.pixel_spacing
        return np.stack([u, v], axis=-1)

    def to_dict(self):
        return {"image_id": self.image_id, "view_dir": list(self.view_dir),
                "pixel_spacing_m": self.pixel_spacing, "width": self.width,
                "height": self.height, "h_min_m": self.h_min, "h_max_m": self.h_max,
                "sun_dir": list(self.sun_dir), "ground_anchor_m": list(self.ground_anchor)}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(image_id=int(d["image_id"]),
                       view_dir=tuple(float(v) for v in d["view_dir"]),
                       pixel_spacing=float(d["pixel_spacing_m"]),
                       image_size=(int(d["width"]), int(d["height"])),
                       h_min=float(d["h_min_m"]), h_max=float(d["h_max_m"]),
                       ground_anchor=tuple(float(v) for v in d["ground_anchor_m"]),
                       sun_dir=tuple(float(v) for v in d.get("sun_dir", (0.0, 0.0, 1.0))))
        except KeyError as e:
            raise CameraError(f"camera file is missing field {e.args[0]!r}") from None


def save_camera(cam, path):
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2) + "\n")


def load_camera(path):
    return SatCamera.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_near: float
    t_far: float
    pixel: tuple
    image_id: int

    def at(self, t):
        return self.origin + t * self.dir


@dataclass
class RayBatch:
    """Rays in the normalized frame; ``origins`` may be a Tensor (through q)."""

    origins: object
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    pixels: np.ndarray
    image_ids: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.dirs)

    def origins_array(self):
        o = self.origins
        return o.data if isinstance(o, diff.Tensor) else np.asarray(o)


def _check_pixels(cam, u, v):
    u = np.asarray(u)
    v = np.asarray(v)
    if np.any((u < 0) | (u >= cam.width) | (v < 0) | (v >= cam.height)):
        raise CameraError(f"pixel outside image of size {cam.image_size}")


def make_ray(cam, frame, pixel, q=(0.0, 0.0)):
    """Ray for one pixel, shifted by the per-image adjustment ``q`` (pixels)."""
    u, v = pixel
    _check_pixels(cam, u, v)
    q = np.asarray(q, np.float64)
    if np.linalg.norm(q) > 5:
        raise CameraError(f"pixel adjustment |q| must be <= 5, got {np.linalg.norm(q):.3f}")
    start = cam.top_points(u + q[0], v + q[1])
    d = np.asarray(cam.view_dir, np.float64)
    end = start + d * cam.segment_length()
    o = frame.to_normalized(start)
    e = frame.to_normalized(end)
    length = float(np.linalg.norm(e - o))
    return Ray(origin=o, dir=(e - o) / length, t_near=0.0, t_far=length,
               pixel=(int(u), int(v)), image_id=cam.image_id)


def make_rays(cams, frame, image_ids, pixels, q=None, dtype=diff.DEFAULT_DTYPE):
    """Batched :func:`make_ray`.

    ``cams`` is indexable by image id; ``q`` is an optional (n_images, 2)
    Tensor of pixel adjustments.  When given, origins become a Tensor so the
    adjustment receives gradients.
    """
    image_ids = np.asarray(image_ids, np.int64)
    pixels = np.asarray(pixels, np.int64).reshape(-1, 2)
    n = len(image_ids)
    base = np.empty((n, 3), np.float64)
    dirs = np.empty((n, 3), np.float64)
    t_far = np.empty(n, np.float64)
    shift_scale = np.empty(n, np.float64)
    for j in np.unique(image_ids):
        cam = cams[int(j)]
        sel = image_ids == j
        _check_pixels(cam, pixels[sel, 0], pixels[sel, 1])
        start = frame.to_normalized(cam.top_points(pixels[sel, 0], pixels[sel, 1]))
        d = np.asarray(cam.view_dir, np.float64)
        seg = cam.segment_length() / frame.scale
        base[sel] = start
        dirs[sel] = d
        t_far[sel] = seg
        shift_scale[sel] = cam.pixel_spacing / frame.scale
    origins = base.astype(dtype)
    if q is not None:
        qs = diff.getitem(q, image_ids) * shift_scale[:, None].astype(dtype)
        pad = diff.Tensor(np.zeros((n, 1), dtype))
        origins = diff.Tensor(origins) + diff.concat([qs, pad], axis=1)
    return RayBatch(origins=origins, dirs=dirs.astype(dtype), t_near=np.zeros(n, dtype),
                    t_far=t_far.astype(dtype), pixels=pixels, image_ids=image_ids)


def surface_point(ray, depth):
    return ray.origin + depth * ray.dir


def surface_points(rays, depth):
    """Batched surface points; ``depth`` of shape (R,), Tensor or array."""
    depth = diff.as_tensor(depth, diff.Tensor(rays.dirs))
    return diff.add(rays.origins, diff.reshape(depth, (-1, 1)) * rays.dirs)


def sample_adjacent(pixel, image_size, rng):
    """One x-neighbor and one y-neighbor of ``pixel`` plus their side signs."""
    (nx, ny), (sx, sy) = sample_adjacent_batch(
        np.array([pixel[0]]), np.array([pixel[1]]), image_size, rng)
    return ((int(nx[0, 0]), int(nx[0, 1])), (int(ny[0, 0]), int(ny[0, 1]))), (int(sx[0]), int(sy[0]))


def sample_adjacent_batch(u, v, image_size, rng):
    w, h = image_size
    if w < 2 or h < 2:
        raise CameraError(f"adjacent sampling needs at least a 2x2 image, got {image_size}")
    u = np.asarray(u, np.int64)
    v = np.asarray(v, np.int64)
    if np.any((u < 0) | (u >= w) | (v < 0) | (v >= h)):
        raise CameraError(f"pixel outside image of size {image_size}")
    signs = rng.integers(0, 2, size=(2, len(u))) * 2 - 1
    sx = np.where(u == 0, 1, np.where(u == w - 1, -1, signs[0]))
    sy = np.where(v == 0, 1, np.where(v == h - 1, -1, signs[1]))
    nx = np.stack([u + sx, v], axis=-1)
    ny = np.stack([u, v + sy], axis=-1)
    return (nx, ny), (sx, sy)


def partial_interval(t_near, t_far, center, p_n, n_samples, mode="centered", snap=True):
    """Shrunk sampling interval for adjacent rays (vectorized over rays).

    Returns ``(new_near, new_far, n_reduced)``.  In centered mode the window of
    length ``(t_far - t_near) * p_n`` is centered on ``center`` and then shifted
    minimally to stay inside the original interval.  With ``snap`` the window
    start is aligned to the full ray's bin grid so that midpoint samples of
    the shortened ray coincide with those of the full ray.
    """
    if not 0 < p_n <= 1:
        raise CameraError(f"p_n must lie in (0, 1], got {p_n}")
    n_red = max(2, int(round(n_samples * p_n)))
    t_near = np.asarray(t_near, np.float64)
    t_far = np.asarray(t_far, np.float64)
    t_l = t_far - t_near
    if snap:
        step = t_l / n_samples
        t_n = np.minimum(step * n_red, t_l)
    else:
        t_n = t_l * p_n
    if mode == "symmetric":
        start = t_near + (t_l - t_n) / 2
    elif mode == "centered":
        start = np.asarray(center, np.float64) - t_n / 2
        if snap:
            start = t_near + np.round((start - t_near) / step) * step
        start = np.clip(start, t_near, t_far - t_n)
    else:
        raise CameraError(f"unknown partial-ray mode {mode!r}")
    return start, start + t_n, n_red


def partial_ray(ray, center_depth, p_n, n_samples, mode="centered", snap=True):
    if not ray.t_near <= center_depth <= ray.t_far:
        raise CameraError("center depth outside the ray interval")
    near, far, n_red = partial_interval(ray.t_near, ray.t_far, center_depth, p_n, n_samples,
                                        mode=mode, snap=snap)
    return Ray(ray.origin, ray.dir, float(near), float(far), ray.pixel, ray.image_id), n_red
