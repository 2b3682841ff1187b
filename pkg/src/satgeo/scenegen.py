"""Synthetic heightfield scenes with exact depths, sparse points and DSMs.

A scene is flat ground plus axis-aligned boxes and ramps.  Every primitive is
a convex solid, so ray hits are computed exactly by clipping the ray against
the primitive's half-spaces; the surface is the upper envelope (max height)
of all primitives.
"""

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import SatCamera, SceneFrame, load_camera, make_rays, save_camera
from .evaluation import DsmGrid
from .io import ensure_dir, read_pfm, read_png, write_pfm, write_png
from .regularizers import load_sparse_points, reprojection_weight, save_sparse_points


class SpecError(ValueError):
    pass


TOY_JAX = {
    "name": "toy-jax",
    "center_utm": [435200.0, 3354800.0],
    "extent_m": 64.0,
    "ground_height_m": 0.0,
    "kappa": 200.0,
    "frame_scale_m": 40.0,
    "ground_texture": {"checker_m": 4.0, "colors": [[0.62, 0.58, 0.50], [0.42, 0.45, 0.40]],
                       "noise_amp": 0.18},
    "boxes": [
        {"x0": -20.0, "x1": -4.0, "y0": -18.0, "y1": -2.0, "height": 8.0,
         "color": [0.78, 0.76, 0.72], "texture": "flat"},
        {"x0": 6.0, "x1": 18.0, "y0": 4.0, "y1": 16.0, "height": 5.0,
         "color": [0.55, 0.35, 0.30], "texture": "noise"},
    ],
    "ramps": [
        {"x0": -24.0, "x1": -8.0, "y0": 8.0, "y1": 20.0, "h0": 0.0, "h1": 3.0, "axis": "x",
         "color": [0.35, 0.36, 0.40]},
    ],
    "cameras": {"count": 9, "max_off_nadir_deg": 20.0, "pixel_spacing_m": 1.0,
                "h_min_m": -4.0, "h_max_m": 16.0, "sun_elevation_deg": 60.0},
    "color_jitter": 0.10,
    "ambient": 0.35,
    "shadows": False,
    "sparse_points": {"n": 1500, "pixel_noise_px": 0.5},
    "dsm_resolution_m": 1.0,
}

PRESETS = {"toy-jax": TOY_JAX}


def preset(name):
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def empty_spec(**overrides):
    spec = preset("toy-jax")
    spec.update(name="empty", boxes=[], ramps=[])
    spec.update(overrides)
    return spec


@dataclass
class Primitive:
    """Convex solid {p : normals @ p <= offsets} in local meters."""

    kind: str  # "ground", "box", "ramp"
    normals: np.ndarray
    offsets: np.ndarray
    top: int  # index of the half-space forming the upper surface
    color: np.ndarray
    texture: str
    params: dict

    def height(self, x, y):
        n, c = self.normals[self.top], self.offsets[self.top]
        h = (c - n[0] * x - n[1] * y) / n[2]
        inside = np.ones(np.shape(x), bool)
        for k, (nk, ck) in enumerate(zip(self.normals, self.offsets)):
            if k != self.top and nk[2] == 0:
                inside &= nk[0] * x + nk[1] * y <= ck + 1e-9
        return np.where(inside, h, -np.inf)

    def intersect(self, o, d, t_max):
        """First entry t along (o, d) and the entering half-space index (-1: miss)."""
        r = len(o)
        t_in = np.zeros(r)
        t_out = np.full(r, float(t_max))
        face = np.full(r, -1)
        ok = np.ones(r, bool)
        for k, (n, c) in enumerate(zip(self.normals, self.offsets)):
            nd = d @ n
            rhs = c - o @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = rhs / nd
            enter = nd < 0
            leave = nd > 0
            upd = enter & (t > t_in)
            t_in = np.where(upd, t, t_in)
            face = np.where(upd, k, face)
            t_out = np.where(leave, np.minimum(t_out, t), t_out)
            ok &= ~((nd == 0) & (rhs < 0))
        hit = ok & (t_in <= t_out) & (face >= 0)
        return np.where(hit, t_in, np.inf), np.where(hit, face, -1)


def _box(b):
    n = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, 1]], np.float64)
    c = np.array([-b["x0"], b["x1"], -b["y0"], b["y1"], b["height"]], np.float64)
    return Primitive("box", n, c, 4, np.asarray(b.get("color", (0.7, 0.7, 0.7)), np.float64),
                     b.get("texture", "flat"), dict(b))


def _ramp(rp):
    ax = rp.get("axis", "x")
    lo, hi = (rp["x0"], rp["x1"]) if ax == "x" else (rp["y0"], rp["y1"])
    slope = (rp["h1"] - rp["h0"]) / (hi - lo)
    top = np.array([-slope, 0, 1] if ax == "x" else [0, -slope, 1], np.float64)
    n = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], top], np.float64)
    c = np.array([-rp["x0"], rp["x1"], -rp["y0"], rp["y1"], rp["h0"] - slope * lo], np.float64)
    return Primitive("ramp", n, c, 4, np.asarray(rp.get("color", (0.4, 0.4, 0.4)), np.float64),
                     "stripes", dict(rp, slope=slope))


class HeightfieldScene:
    """Exact geometry and appearance of a generated scene (meters, UTM-like)."""

    def __init__(self, spec, seed=0):
        self.spec = validate_spec(spec)
        self.seed = seed
        self.center = np.asarray(spec["center_utm"], np.float64)
        self.extent = float(spec["extent_m"])
        self.ground = float(spec["ground_height_m"])
        self.kappa = float(spec["kappa"])
        cams = spec["cameras"]
        self.h_min, self.h_max = float(cams["h_min_m"]), float(cams["h_max_m"])
        self.frame = SceneFrame((self.center[0], self.center[1], 0.5 * (self.h_min + self.h_max)),
                                float(spec["frame_scale_m"]))
        gt = spec["ground_texture"]
        ground = Primitive("ground", np.array([[0, 0, 1.0]]), np.array([self.ground]), 0,
                           np.asarray(gt["colors"][0], np.float64), "ground", dict(gt))
        self.prims = [ground] + [_box(b) for b in spec["boxes"]] + [_ramp(r) for r in spec["ramps"]]
        rng = np.random.default_rng(seed)
        # band-limited noise: a few random plane waves with wavelengths 2-12 m
        k = rng.uniform(2 * np.pi / 12, 2 * np.pi / 2, size=6)
        ang = rng.uniform(0, 2 * np.pi, size=6)
        self._waves = (np.stack([k * np.cos(ang), k * np.sin(ang)], 1), rng.uniform(0, 2 * np.pi, 6))

    # --- geometry -------------------------------------------------------------

    def local(self, x, y):
        return np.asarray(x, np.float64) - self.center[0], np.asarray(y, np.float64) - self.center[1]

    def height(self, x, y):
        """Surface altitude at UTM (x, y): max over primitives."""
        lx, ly = self.local(x, y)
        h = np.full(np.broadcast(lx, ly).shape, self.ground)
        for p in self.prims[1:]:
            h = np.maximum(h, p.height(lx, ly))
        return h

    def surface_normal(self, x, y):
        lx, ly = self.local(x, y)
        n = np.zeros(np.broadcast(lx, ly).shape + (3,))
        n[..., 2] = 1.0
        best = np.full(n.shape[:-1], self.ground)
        for p in self.prims[1:]:
            h = p.height(lx, ly)
            upd = h > best
            top = p.normals[p.top] / np.linalg.norm(p.normals[p.top])
            n[upd] = top
            best = np.where(upd, h, best)
        return n

    def nadir_dsm(self, resolution=None):
        res = float(resolution or self.spec["dsm_resolution_m"])
        half = self.extent / 2
        origin = (self.center[0] - half, self.center[1] - half)
        cells = int(round(self.extent / res))
        grid = DsmGrid(origin, res, np.zeros((cells, cells)))
        xx, yy = grid.cell_centers()
        grid.altitudes = self.height(xx, yy)
        return grid

    def density(self, p_norm):
        """kappa * 1[z < h(x, y)] at normalized points (any leading shape)."""
        p = self.frame.to_utm(p_norm)
        return self.kappa * (p[..., 2] < self.height(p[..., 0], p[..., 1]))

    def intersect(self, o_m, d, t_max=np.inf):
        """Exact first hit of meter-space rays; returns (t_m, prim index, face index)."""
        o = np.asarray(o_m, np.float64).reshape(-1, 3) - np.array([*self.center, 0.0])
        d = np.broadcast_to(np.asarray(d, np.float64), o.shape)
        best = np.full(len(o), np.inf)
        prim = np.full(len(o), -1)
        face = np.full(len(o), -1)
        for i, p in enumerate(self.prims):
            t, f = p.intersect(o, d, t_max)
            upd = t < best
            best = np.where(upd, t, best)
            prim = np.where(upd, i, prim)
            face = np.where(upd, f, face)
        return best, prim, face

    # --- appearance -----------------------------------------------------------

    def _noise(self, lx, ly):
        k, ph = self._waves
        v = np.zeros(np.shape(lx))
        for (kx, ky), p in zip(k, ph):
            v += np.sin(kx * lx + ky * ly + p)
        return v / len(ph)

    def albedo(self, points_m, prim, face):
        """RGB albedo at surface points, given the primitive and face that were hit."""
        lx, ly = self.local(points_m[:, 0], points_m[:, 1])
        z = points_m[:, 2]
        out = np.zeros((len(lx), 3))
        gt = self.spec["ground_texture"]
        for i, p in enumerate(self.prims):
            sel = prim == i
            if not sel.any():
                continue
            x, y = lx[sel], ly[sel]
            if p.kind == "ground":
                cell = np.floor(x / gt["checker_m"]) + np.floor(y / gt["checker_m"])
                base = np.where((cell % 2 == 0)[:, None], np.asarray(gt["colors"][0]),
                                np.asarray(gt["colors"][1]))
                col = base * (1 + gt["noise_amp"] * self._noise(x, y))[:, None]
            else:
                col = np.broadcast_to(p.color, (sel.sum(), 3)).copy()
                if p.texture == "noise":
                    col *= (1 + 0.12 * self._noise(x, y))[:, None]
                elif p.texture == "checker":
                    cell = np.floor(x / 2) + np.floor(y / 2)
                    col *= np.where(cell % 2 == 0, 1.1, 0.9)[:, None]
                elif p.texture == "stripes":
                    along = x if p.params.get("axis", "x") == "x" else y
                    col *= np.where(np.floor(along / 1.5) % 2 == 0, 1.15, 0.85)[:, None]
                wall = face[sel] != p.top
                col[wall] = 0.6 * p.color * (1 + 0.1 * np.sin(z[sel][wall] * 2.0))[:, None]
            out[sel] = col
        return np.clip(out, 0.0, 1.0)

    def in_shadow(self, points_m, sun_dir):
        sun = np.asarray(sun_dir, np.float64)
        start = points_m + 1e-6 * sun
        t, _, _ = self.intersect(start, sun)
        return np.isfinite(t)


def validate_spec(spec):
    """Check required fields and primitive extents; errors name the offending field."""
    for key in ("center_utm", "extent_m", "ground_height_m", "kappa", "frame_scale_m",
                "ground_texture", "boxes", "ramps", "cameras"):
        if key not in spec:
            raise SpecError(f"scene spec is missing field {key!r}")
    half = float(spec["extent_m"]) / 2
    if not half > 0:
        raise SpecError("field 'extent_m' must be positive")
    cams = spec["cameras"]
    for key in ("count", "max_off_nadir_deg", "pixel_spacing_m", "h_min_m", "h_max_m"):
        if key not in cams:
            raise SpecError(f"scene spec is missing field 'cameras.{key}'")
    if not cams["h_max_m"] > cams["h_min_m"]:
        raise SpecError("field 'cameras.h_max_m' must exceed 'cameras.h_min_m'")
    ground = float(spec["ground_height_m"])
    if not cams["h_min_m"] < ground < cams["h_max_m"]:
        raise SpecError("field 'ground_height_m' must lie between the camera height bounds")
    for group in ("boxes", "ramps"):
        for i, prim in enumerate(spec[group]):
            name = f"{group}[{i}]"
            for key in ("x0", "x1", "y0", "y1"):
                if key not in prim:
                    raise SpecError(f"field '{name}.{key}' is missing")
                if abs(prim[key]) > half:
                    raise SpecError(f"field '{name}.{key}' lies outside the scene extent")
            if not (prim["x1"] > prim["x0"] and prim["y1"] > prim["y0"]):
                raise SpecError(f"field '{name}' has an empty footprint")
            tops = [prim["height"]] if group == "boxes" else [prim["h0"], prim["h1"]]
            for h in tops:
                if not ground <= h < cams["h_max_m"]:
                    raise SpecError(f"field '{name}' height must lie in [ground, h_max)")
    return spec


def gen_scene(spec, seed=0):
    return HeightfieldScene(spec, seed)


def random_spec(rng, n_boxes=3, n_ramps=1, extent=64.0):
    """Random primitives inside the extent (for property tests)."""
    spec = empty_spec(extent_m=extent)
    half = extent / 2 - 1

    def footprint():
        x0, y0 = rng.uniform(-half, half - 4, size=2)
        w, h = rng.uniform(2, 16, size=2)
        return dict(x0=float(x0), x1=float(min(x0 + w, half)), y0=float(y0), y1=float(min(y0 + h, half)))

    spec["boxes"] = [dict(footprint(), height=float(rng.uniform(1, 12)),
                          color=[0.6, 0.6, 0.6], texture="flat") for _ in range(n_boxes)]
    spec["ramps"] = [dict(footprint(), h0=float(rng.uniform(0, 3)), h1=float(rng.uniform(0, 10)),
                          axis=str(rng.choice(["x", "y"]))) for _ in range(n_ramps)]
    return spec


# --- cameras and rendering ------------------------------------------------------


def make_cameras(scene, rng):
    """Off-nadir cameras covering the scene extent at ground level."""
    cfg = scene.spec["cameras"]
    count = int(cfg["count"])
    spacing = float(cfg["pixel_spacing_m"])
    size = int(round(scene.extent / spacing))
    angles = np.linspace(-cfg["max_off_nadir_deg"], cfg["max_off_nadir_deg"], count) if count > 1 \
        else np.zeros(1)
    cams = []
    elev = np.radians(cfg.get("sun_elevation_deg", 60.0))
    for k, a in enumerate(np.radians(angles)):
        az = 0.0 if k % 2 == 0 else np.pi / 2
        d = np.array([np.sin(a) * np.cos(az), np.sin(a) * np.sin(az), -np.cos(a)])
        sun_az = rng.uniform(0, 2 * np.pi)
        sun = np.array([np.cos(elev) * np.cos(sun_az), np.cos(elev) * np.sin(sun_az), np.sin(elev)])
        # pixel (u, v) at ground level sits on the cell center (-half + 0.5 + u) * spacing
        ground00 = scene.center - scene.extent / 2 + 0.5 * spacing
        anchor = ground00 - d[:2] * (scene.h_max - scene.ground) / -d[2]
        cams.append(SatCamera(image_id=k, view_dir=tuple(d.tolist()), pixel_spacing=spacing,
                              image_size=(size, size), h_min=scene.h_min, h_max=scene.h_max,
                              ground_anchor=tuple(anchor.tolist()), sun_dir=tuple(sun.tolist())))
    return cams


def color_transforms(n, jitter, rng):
    """Per-image affine color jitter: diagonal gains 1 +- jitter, offsets +- jitter/2."""
    A = np.stack([np.diag(1 + rng.uniform(-jitter, jitter, 3)) for _ in range(n)])
    b = rng.uniform(-jitter / 2, jitter / 2, size=(n, 3))
    return A, b


def apply_color(albedo, A, b, ambient, s):
    """Same composition the field uses: clamp(A (albedo (amb + (1 - amb) s)) + b)."""
    shaded = albedo * (ambient + (1 - ambient) * np.asarray(s)[..., None])
    return np.clip(shaded @ np.asarray(A).T + b, 0.0, 1.0)


def trace_camera(scene, cam, pixels=None):
    """Exact hits for pixel rays; returns (depth_normalized, points_m, prim, face)."""
    frame = scene.frame
    if pixels is None:
        vv, uu = np.mgrid[0:cam.height, 0:cam.width]
        pixels = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    rays = make_rays({cam.image_id: cam}, frame, np.full(len(pixels), cam.image_id), pixels,
                     dtype=np.float64)
    o_m = frame.to_utm(rays.origins_array())
    t_m, prim, face = scene.intersect(o_m, rays.dirs, t_max=cam.segment_length())
    pts = o_m + t_m[:, None] * rays.dirs
    return t_m / frame.scale, pts, prim, face


def render_ground_truth(scene, cam, A=None, b=None, sun_dir=None, shadows=None):
    """Image (H, W, 3) and exact normalized depth (H, W) for one camera."""
    A = np.eye(3) if A is None else A
    b = np.zeros(3) if b is None else b
    shadows = scene.spec.get("shadows", False) if shadows is None else shadows
    depth, pts, prim, face = trace_camera(scene, cam)
    albedo = scene.albedo(pts, prim, face)
    s = np.ones(len(pts))
    if shadows:
        s = np.where(scene.in_shadow(pts, cam.sun_dir if sun_dir is None else sun_dir), 0.0, 1.0)
    img = apply_color(albedo, A, b, scene.spec.get("ambient", 0.35), s)
    return img.reshape(cam.height, cam.width, 3), depth.reshape(cam.height, cam.width)


def sample_sparse_points(scene, cams, n, pixel_noise_px, rng):
    """Surface points seen at a perturbed subpixel, recorded at the integer pixel.

    Only roof and ground hits are kept, so every point satisfies z = h(x, y);
    wall hits are redrawn.  Returns rows (image_id, u, v, x, y, z,
    reproj_err_px) in meters, sorted.
    """
    if n < 1:
        raise SpecError("need at least one sparse point")
    rows = []
    while len(rows) < n:
        m = n - len(rows)
        cam_idx = rng.integers(0, len(cams), size=m)
        for j in range(len(cams)):
            sel = np.flatnonzero(cam_idx == j)
            if not len(sel):
                continue
            cam = cams[j]
            uv = np.stack([rng.integers(0, cam.width, len(sel)),
                           rng.integers(0, cam.height, len(sel))], 1)
            mag = pixel_noise_px * rng.random(len(sel))
            ang = rng.uniform(0, 2 * np.pi, len(sel))
            sub = uv + np.stack([mag * np.cos(ang), mag * np.sin(ang)], 1)
            top = cam.top_points(sub[:, 0], sub[:, 1])
            d = np.broadcast_to(np.asarray(cam.view_dir), top.shape)
            t, prim, face = scene.intersect(top, d, t_max=cam.segment_length())
            pts = top + t[:, None] * d
            roof = np.array([f == scene.prims[p].top for p, f in zip(prim, face)], bool)
            for k in np.flatnonzero(roof & np.isfinite(t)):
                rows.append((j, int(uv[k, 0]), int(uv[k, 1]), *pts[k], float(mag[k])))
    rows = rows[:n]
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[6]))
    return rows


# --- dataset on disk ----------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    spec: dict
    seed: int
    frame: SceneFrame
    cams: list
    images: np.ndarray  # (n, H, W, 3) float32
    depth_gt: np.ndarray  # (n, H, W) normalized
    dsm_gt: DsmGrid
    points: list

    @property
    def n_images(self):
        return len(self.cams)

    def scene(self):
        return HeightfieldScene(self.spec, self.seed)


def generate(spec, seed=0):
    """Everything needed for a dataset, in memory."""
    scene = gen_scene(spec, seed)
    rng = np.random.default_rng(seed)
    cams = make_cameras(scene, rng)
    A, b = color_transforms(len(cams), float(spec.get("color_jitter", 0.0)), rng)
    images, depths = [], []
    for cam in cams:
        img, dep = render_ground_truth(scene, cam, A[cam.image_id], b[cam.image_id])
        images.append(img)
        depths.append(dep)
    sp = spec.get("sparse_points", {"n": 1000, "pixel_noise_px": 0.5})
    rows = sample_sparse_points(scene, cams, int(sp["n"]), float(sp["pixel_noise_px"]), rng)
    return scene, cams, (A, b), images, depths, rows


def write_dataset(out, spec, seed=0, force=False):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
    scene, cams, (A, b), images, depths, rows = generate(spec, seed)
    ensure_dir(out)
    for sub in ("cameras", "images", "depth_gt"):
        ensure_dir(out / sub)
    meta = {"spec": spec, "seed": seed, "frame": scene.frame.to_dict(),
            "color_transforms": {"A": A.tolist(), "b": b.tolist()}}
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for cam, img, dep in zip(cams, images, depths):
        save_camera(cam, out / "cameras" / f"{cam.image_id:03d}.json")
        write_png(out / "images" / f"{cam.image_id:03d}.png", img)
        write_pfm(out / "depth_gt" / f"{cam.image_id:03d}.pfm", dep)
    scene.nadir_dsm().save(out / "dsm_gt.pfm")
    save_sparse_points(out / "sparse_points.csv", rows)
    return out


def load_dataset(root):
    root = Path(root)
    if not (root / "scene.json").exists():
        raise FileNotFoundError(f"{root}: no scene.json, not a dataset directory")
    meta = json.loads((root / "scene.json").read_text())
    frame = SceneFrame.from_dict(meta["frame"])
    cams = [load_camera(p) for p in sorted((root / "cameras").glob("*.json"))]
    cams.sort(key=lambda c: c.image_id)
    if [c.image_id for c in cams] != list(range(len(cams))):
        raise ValueError(f"{root}: camera ids must be 0..n-1")
    images = np.stack([read_png(root / "images" / f"{c.image_id:03d}.png") for c in cams])
    depth = np.stack([read_pfm(root / "depth_gt" / f"{c.image_id:03d}.pfm") for c in cams])
    dsm = DsmGrid.load(root / "dsm_gt.pfm")
    points = load_sparse_points(root / "sparse_points.csv", frame)
    return Dataset(root, meta["spec"], int(meta.get("seed", 0)), frame, cams, images, depth, dsm, points)


def dataset_digest(root):
    """sha256 over every file of a dataset directory (relative path + bytes)."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def volume_depth(scene, rays, n_samples, rng=None):
    """Depth of the opaque ground-truth density rendered by volume compositing."""
    from . import diff
    from .rendering import composite, render_weights, sample_deltas, stratified_sample

    t = stratified_sample(rays.t_near.astype(np.float64), rays.t_far.astype(np.float64),
                          n_samples, rng)
    pts = rays.origins_array().astype(np.float64)[:, None, :] + t[:, :, None] * rays.dirs[:, None, :]
    sigma = scene.density(pts)
    with diff.no_grad():
        w = render_weights(diff.Tensor(sigma, dtype=np.float64),
                           sample_deltas(t, rays.t_near.astype(np.float64)))
        return composite(w, t).data


def volume_depth_map(scene, cam, n_samples=256):
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    rays = make_rays({cam.image_id: cam}, scene.frame, np.full(len(pix), cam.image_id), pix,
                     dtype=np.float64)
    return volume_depth(scene, rays, n_samples).reshape(cam.height, cam.width)
