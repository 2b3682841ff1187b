"""Scene MLP: density backbone plus albedo, ambient and uncertainty heads.

Per-image appearance parameters (embedding, affine color transform and the
pixel adjustment q) live next to the network weights so a single parameter
set describes the whole model.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diff
from .encoding import EncodingSpec

CHECKPOINT_MAGIC = b"SGNF"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    n_images: int
    width: int = 256
    depth: int = 8
    head_width: int = 128
    embed_dim: int = 4
    pos_freqs: int = 10
    dir_freqs: int = 4
    beta_min: float = 0.05

    @property
    def pos_spec(self):
        return EncodingSpec(self.pos_freqs)

    @property
    def dir_spec(self):
        return EncodingSpec(self.dir_freqs)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class FieldOutput:
    sigma: diff.Tensor
    albedo: diff.Tensor
    ambient: diff.Tensor
    beta: diff.Tensor
    tau: diff.Tensor


class FieldParams:
    """Ordered collection of named leaf tensors for one :class:`FieldConfig`."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def leaves(self):
        return list(self.tensors.values())

    def num_parameters(self):
        return int(np.sum([t.size for t in self.tensors.values()]))

    def flat(self):
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()]).astype("<f4")

    def with_arrays(self, arrays):
        return FieldParams(self.config, {k: diff.Tensor(arrays[k], requires_grad=True)
                                         for k in self.tensors})

    def from_flat(self, flat):
        out, pos = {}, 0
        for k, t in self.tensors.items():
            n = t.size
            out[k] = np.asarray(flat[pos:pos + n], t.dtype).reshape(t.shape)
            pos += n
        if pos != len(flat):
            raise CheckpointError(f"parameter count mismatch: expected {pos}, got {len(flat)}")
        return self.with_arrays(out)


def init_params(config, seed=0, zero_final=False, dtype=diff.DEFAULT_DTYPE):
    """Fan-in scaled uniform init; per-image terms start from the vanilla model."""
    rng = np.random.default_rng(seed)
    tensors = {}

    def layer(name, fan_in, fan_out, hidden=True, zero=False):
        bound = np.sqrt(6.0 / fan_in) if hidden else np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if zero:
            w = np.zeros_like(w)
        tensors[name + ".w"] = diff.Tensor(w.astype(dtype), requires_grad=True)
        tensors[name + ".b"] = diff.Tensor(np.zeros(fan_out, dtype), requires_grad=True)

    in_dim = config.pos_spec.out_dim(3)
    dir_dim = config.dir_spec.out_dim(3)
    for i in range(config.depth):
        layer(f"backbone.{i}", in_dim if i == 0 else config.width, config.width)
    layer("sigma", config.width, 1, hidden=False, zero=zero_final)
    layer("proj", config.width, config.width, hidden=False)
    layer("albedo.0", config.width + dir_dim, config.head_width)
    layer("albedo.1", config.head_width, 3, hidden=False, zero=zero_final)
    layer("ambient.0", config.width + 3, config.head_width)
    layer("ambient.1", config.head_width, 3, hidden=False, zero=zero_final)
    layer("uncert.0", config.width + config.embed_dim, config.head_width)
    layer("uncert.1", config.head_width, 2, hidden=False, zero=zero_final)
    n = config.n_images
    tensors["image.embed"] = diff.Tensor(
        rng.normal(0.0, 0.01, size=(n, config.embed_dim)).astype(dtype), requires_grad=True)
    tensors["image.A"] = diff.Tensor(np.tile(np.eye(3, dtype=dtype), (n, 1, 1)), requires_grad=True)
    tensors["image.b"] = diff.Tensor(np.zeros((n, 3), dtype), requires_grad=True)
    tensors["image.q"] = diff.Tensor(np.zeros((n, 2), dtype), requires_grad=True)
    return FieldParams(config, tensors)


def _lin(params, name, x, activation=None):
    return diff.linear(x, params[name + ".w"], params[name + ".b"], activation)


def _backbone(params, encoded_x):
    h = encoded_x
    for i in range(params.config.depth):
        h = _lin(params, f"backbone.{i}", h, "relu")
    return h


def _sigma(params, h):
    return diff.reshape(diff.softplus(_lin(params, "sigma", h)), (-1,))


def eval_density(params, encoded_x):
    """Density only; skips the projection layer and every head."""
    return _sigma(params, _backbone(params, encoded_x))


def eval_field(params, encoded_x, encoded_dir, sun_dir, image_id):
    """Evaluate all outputs for P samples.

    ``encoded_x`` (P, Dx) and ``encoded_dir`` (P, Dd) come from the encoding
    module, ``sun_dir`` is (P, 3) and ``image_id`` (P,) integers.
    """
    image_id = np.asarray(image_id, np.int64)
    n = params.config.n_images
    if image_id.size and (image_id.min() < 0 or image_id.max() >= n):
        raise KeyError(f"image id outside [0, {n})")
    h = _backbone(params, encoded_x)
    sigma = _sigma(params, h)
    feat = _lin(params, "proj", h)
    like = params["proj.w"]
    a = _lin(params, "albedo.0", diff.concat([feat, diff.as_tensor(encoded_dir, like)]), "relu")
    albedo = diff.sigmoid(_lin(params, "albedo.1", a))
    s = _lin(params, "ambient.0", diff.concat([feat, diff.as_tensor(sun_dir, like)]), "relu")
    ambient = diff.sigmoid(_lin(params, "ambient.1", s))
    emb = diff.getitem(params["image.embed"], image_id)
    u = _lin(params, "uncert.1", _lin(params, "uncert.0", diff.concat([feat, emb]), "relu"))
    beta = params.config.beta_min + diff.softplus(u[:, 0])
    tau = diff.sigmoid(u[:, 1])
    return FieldOutput(sigma, albedo, ambient, beta, tau)


def compose_color(out, A, b, s=1.0):
    """clamp(A (albedo * (ambient + (1 - ambient) s)) + b, 0, 1).

    ``A`` (..., 3, 3), ``b`` (..., 3) and ``s`` broadcast against the
    (..., 3) colors of ``out``.
    """
    albedo, ambient = out.albedo, out.ambient
    s = diff.as_tensor(s, albedo)
    if s.ndim and s.shape[-1] != 1:
        s = diff.reshape(s, s.shape + (1,))
    shaded = albedo * (ambient + (1.0 - ambient) * s)
    A = diff.as_tensor(A, albedo)
    lin = diff.sum(A * diff.reshape(shaded, shaded.shape[:-1] + (1, 3)), axis=-1)
    return diff.clip(lin + b, 0.0, 1.0)


def save_checkpoint(path, params, meta=None):
    """Binary parameter file plus a JSON sidecar holding the configuration."""
    path = Path(path)
    flat = params.flat()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(params.config.hash())
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.tobytes())
    side = {"field_config": params.config.to_dict(), "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def read_checkpoint_header(path):
    with open(path, "rb") as f:
        head = f.read(4 + 4 + 32 + 8)
        if len(head) < 48 or head[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a field checkpoint")
        (version,) = struct.unpack("<I", head[4:8])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", head[40:48])
        flat = np.frombuffer(f.read(4 * count), dtype="<f4")
    if flat.size != count:
        raise CheckpointError(f"{path}: truncated parameter array")
    return head[8:40], flat


def load_checkpoint(path, config=None):
    """Load parameters; ``config`` defaults to the sidecar's and must match the header hash."""
    path = Path(path)
    digest, flat = read_checkpoint_header(path)
    meta = {}
    side = Path(str(path) + ".json")
    if config is None:
        if not side.exists():
            raise CheckpointError(f"{path}: no config given and no sidecar found")
        blob = json.loads(side.read_text())
        config = FieldConfig(**blob["field_config"])
        meta = blob.get("meta", {})
    elif side.exists():
        meta = json.loads(side.read_text()).get("meta", {})
    if config.hash() != digest:
        raise CheckpointError(f"{path}: config hash mismatch")
    template = init_params(config, seed=0)
    return template.from_flat(flat.astype(diff.DEFAULT_DTYPE)), meta
