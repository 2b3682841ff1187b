"""Volume rendering along rays and the photometric losses."""

from dataclasses import dataclass

import numpy as np

from . import diff
from .encoding import masked_encode, pos_encode
from .field import FieldOutput, compose_color, eval_density, eval_field

UNCERTAINTY_ETA = 3.0


def stratified_sample(t_near, t_far, n, rng=None):
    """One draw per equal-width bin of [t_near, t_far]; bin midpoints when ``rng`` is None.

    ``t_near``/``t_far`` are scalars or (R,) arrays; the result is (R, n).
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    t_near = np.atleast_1d(np.asarray(t_near))
    t_far = np.atleast_1d(np.asarray(t_far))
    dtype = np.result_type(t_near.dtype, t_far.dtype, np.float32)
    width = ((t_far - t_near) / n).astype(np.float64)[:, None]
    k = np.arange(n, dtype=np.float64)[None, :]
    u = 0.5 if rng is None else rng.random((len(t_near), n))
    return (t_near.astype(np.float64)[:, None] + (k + u) * width).astype(dtype)


def sample_deltas(t, t_near):
    """delta_i = t_i - t_{i-1} with the first spacing measured from t_near."""
    t = np.asarray(t)
    prev = np.concatenate([np.broadcast_to(np.asarray(t_near, t.dtype).reshape(-1, 1),
                                           (t.shape[0], 1)), t[:, :-1]], axis=1)
    return t - prev


def alphas(sigma, delta):
    """alpha_i = 1 - exp(-sigma_i delta_i)."""
    sigma = diff.as_tensor(sigma)
    return 1.0 - diff.exp(-(sigma * delta))


def transmittance(alpha):
    """T_i = prod_{j<i} (1 - alpha_j) along the last axis."""
    alpha = diff.as_tensor(alpha)
    return diff.cumprod_exclusive(1.0 - alpha)


def render_weights(sigma, delta):
    a = alphas(sigma, delta)
    return transmittance(a) * a


def composite(weights, values):
    """sum_i w_i v_i over the sample axis; ``values`` is (R, N) or (R, N, C)."""
    weights = diff.as_tensor(weights)
    values = diff.as_tensor(values, weights)
    if values.ndim == weights.ndim + 1:
        return diff.sum(diff.reshape(weights, weights.shape + (1,)) * values, axis=-2)
    return diff.sum(weights * values, axis=-1)


def color_loss(rendered, gt):
    """Batch mean of per-ray squared color error."""
    rendered = diff.as_tensor(rendered)
    err = rendered - diff.as_tensor(gt, rendered)
    return diff.mean(diff.sum(diff.square(err), axis=-1))


def uncertainty_loss(rendered, gt, beta_r, tau_r=None, beta_min=0.05, eta=UNCERTAINTY_ETA):
    """err^2 / (2 beta^2) + (log beta + eta) / 2, averaged over rays.

    With ``tau_r`` the transient scalar gates the uncertainty:
    beta = beta_min + tau_r * beta_r, which never drops below beta_min.
    """
    rendered = diff.as_tensor(rendered)
    beta = diff.as_tensor(beta_r, rendered)
    if tau_r is not None:
        beta = beta_min + diff.as_tensor(tau_r, rendered) * beta
    err2 = diff.sum(diff.square(rendered - diff.as_tensor(gt, rendered)), axis=-1)
    per_ray = err2 / (2.0 * diff.square(beta)) + (diff.log(beta) + eta) * 0.5
    return diff.mean(per_ray)


@dataclass
class RenderResult:
    color: diff.Tensor
    depth: diff.Tensor
    weights: diff.Tensor
    beta: diff.Tensor
    tau: diff.Tensor
    t: np.ndarray


def sample_points(rays, t):
    """(R, N, 3) points o + t d; a Tensor when the origins are."""
    o = diff.as_tensor(rays.origins)
    pts = diff.reshape(o, (len(rays), 1, 3)) + diff.Tensor(t[:, :, None] * rays.dirs[:, None, :])
    return pts


def _encode_points(params, pts, mask_t, sched):
    flat = diff.reshape(pts, (-1, 3))
    spec = params.config.pos_spec
    if sched is None or mask_t is None:
        return pos_encode(flat, spec)
    return masked_encode(flat, spec, mask_t, sched)


def render_rays(params, rays, t, cams, mask_t=None, sched=None, shading=None, sun_samples=32):
    """Full render of a ray batch at sample positions ``t`` (R, N).

    ``cams`` maps image id to camera (for sun direction).  ``shading`` is None
    (constant full illumination) or "sun" (transmittance toward the sun from
    the rendered surface point).
    """
    r, n = t.shape
    pts = sample_points(rays, t)
    enc_x = _encode_points(params, pts, mask_t, sched)
    dtype = pts.dtype
    enc_d = pos_encode(diff.Tensor(rays.dirs), params.config.dir_spec).data
    enc_d = np.repeat(enc_d, n, axis=0)
    sun = np.array([cams[int(j)].sun_dir for j in rays.image_ids], dtype)
    sun_rep = np.repeat(sun, n, axis=0)
    ids = np.repeat(rays.image_ids, n)
    out = eval_field(params, enc_x, enc_d, sun_rep, ids)
    delta = sample_deltas(t, rays.t_near)
    w = render_weights(diff.reshape(out.sigma, (r, n)), delta)
    depth = composite(w, t)
    s = 1.0
    if shading == "sun":
        s = diff.reshape(sun_visibility(params, rays, depth.data, sun, mask_t, sched, sun_samples),
                         (r, 1, 1))
    elif shading is not None:
        raise ValueError(f"unknown shading mode {shading!r}")
    A = diff.reshape(diff.getitem(params["image.A"], rays.image_ids), (r, 1, 3, 3))
    b = diff.reshape(diff.getitem(params["image.b"], rays.image_ids), (r, 1, 3))
    per_ray = FieldOutput(out.sigma, diff.reshape(out.albedo, (r, n, 3)),
                          diff.reshape(out.ambient, (r, n, 3)), out.beta, out.tau)
    c = compose_color(per_ray, A, b, s)
    color = composite(w, c)
    beta = composite(w, diff.reshape(out.beta, (r, n)))
    tau = composite(w, diff.reshape(out.tau, (r, n)))
    return RenderResult(color, depth, w, beta, tau, t)


def render_depth(params, rays, t, mask_t=None, sched=None):
    """Depth through the density-only path; returns (depth, weights)."""
    r, n = t.shape
    pts = sample_points(rays, t)
    sigma = eval_density(params, _encode_points(params, pts, mask_t, sched))
    w = render_weights(diff.reshape(sigma, (r, n)), sample_deltas(t, rays.t_near))
    return composite(w, t), w


def sun_visibility(params, rays, depth, sun, mask_t=None, sched=None, n_samples=32, top=1.0):
    """Fraction of sunlight reaching each rendered surface point.

    Marches from the (fixed) surface point toward the sun until the ray
    leaves the normalized box through z = ``top`` and returns exp(-sum sigma
    delta) with gradients flowing into the density.
    """
    start = rays.origins_array() + depth[:, None] * rays.dirs
    sun = np.asarray(sun, start.dtype)
    length = np.maximum((top - start[:, 2]) / np.maximum(sun[:, 2], 1e-3), 1e-3)
    t = stratified_sample(np.full(len(start), 1e-3, start.dtype), length.astype(start.dtype),
                          n_samples)
    pts = diff.Tensor(start[:, None, :] + t[:, :, None] * sun[:, None, :])
    sigma = eval_density(params, _encode_points(params, pts, mask_t, sched))
    delta = sample_deltas(t, np.full(len(start), 1e-3, start.dtype))
    od = diff.sum(diff.reshape(sigma, t.shape) * delta, axis=-1)
    return diff.exp(-od)
