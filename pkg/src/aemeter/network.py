"""The exposure-prediction network: trimmed fire-block backbone feeding two
parallel 1x1 heads (tanh exposure map, sigmoid importance map), aggregated to
a scalar normalized exposure adjustment by a global average of EM*IM.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, ShapeError

MODEL_MAGIC = b"AEMETER1"


@dataclass
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    kind: str = "conv"


@dataclass
class FireSpec:
    squeeze: int
    expand1: int
    expand3: int
    kind: str = "fire"


@dataclass
class PoolSpec:
    kernel: int = 3
    stride: int = 3
    kind: str = "pool"


def _desk_blocks():
    return [
        ConvSpec(16, kernel=3, stride=2, pad=0),
        PoolSpec(3, 3),
        FireSpec(8, 16, 16),
        PoolSpec(3, 3),
        FireSpec(16, 32, 32),
        FireSpec(16, 32, 32),
    ]


def _paper_scale_blocks():
    # SqueezeNet-v1.1 style stem, trimmed after the seventh fire block.
    return [
        ConvSpec(64, kernel=3, stride=2, pad=0),
        PoolSpec(3, 2),
        FireSpec(16, 64, 64),
        FireSpec(16, 64, 64),
        PoolSpec(3, 2),
        FireSpec(32, 128, 128),
        FireSpec(32, 128, 128),
        PoolSpec(3, 2),
        FireSpec(48, 192, 192),
        FireSpec(48, 192, 192),
    ]


@dataclass
class NetConfig:
    input_size: int = 64
    blocks: list = field(default_factory=_desk_blocks)
    dropout_ratio: float = 0.5
    scale_ev: float = 2.0
    uniform_im: bool = False

    @staticmethod
    def desk(input_size=64, uniform_im=False):
        return NetConfig(input_size=input_size, uniform_im=uniform_im)

    @staticmethod
    def paper_scale(input_size=128, uniform_im=False):
        return NetConfig(input_size=input_size, blocks=_paper_scale_blocks(),
                         uniform_im=uniform_im)

    @staticmethod
    def tiny(input_size=32, uniform_im=False):
        blocks = [
            ConvSpec(6, kernel=3, stride=2, pad=0),
            PoolSpec(3, 3),
            FireSpec(4, 6, 6),
            PoolSpec(3, 3),
            FireSpec(4, 8, 8),
        ]
        return NetConfig(input_size=input_size, blocks=blocks,
                         uniform_im=uniform_im)

    def to_dict(self):
        d = asdict(self)
        return d

    @staticmethod
    def from_dict(d):
        kinds = {"conv": ConvSpec, "fire": FireSpec, "pool": PoolSpec}
        blocks = []
        for b in d["blocks"]:
            b = dict(b)
            cls = kinds[b.pop("kind")]
            blocks.append(cls(**b))
        return NetConfig(input_size=d["input_size"], blocks=blocks,
                         dropout_ratio=d["dropout_ratio"],
                         scale_ev=d["scale_ev"], uniform_im=d["uniform_im"])


def _conv_out(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def feature_shape(config):
    """(channels, spatial) entering the heads, by layer algebra."""
    size = config.input_size
    channels = 3
    for b in config.blocks:
        if b.kind == "conv":
            size = _conv_out(size, b.kernel, b.stride, b.pad)
            channels = b.out_channels
        elif b.kind == "fire":
            channels = b.expand1 + b.expand3
        elif b.kind == "pool":
            size = _conv_out(size, b.kernel, b.stride, 0)
        else:
            raise ValueError(f"unknown block kind {b.kind!r}")
        if size < 1:
            raise ValueError(f"config collapses feature map below 1x1 at {b}")
    return channels, size


@dataclass
class MeteringMaps:
    em: np.ndarray   # (H', W') in [-1, 1]
    im: np.ndarray   # (H', W') in [0, 1]


def build_network(config, init_rng):
    """Gaussian N(0, 0.01^2) weights, zero biases; deterministic by rng."""
    channels, size = feature_shape(config)  # validates the config
    ps = ParamSet()

    def conv_param(name, cout, cin, k):
        ps.add(f"{name}.w", init_rng.normal(0.0, 0.01, size=(cout, cin, k, k)))
        ps.add(f"{name}.b", np.zeros(cout))

    cin = 3
    for i, b in enumerate(config.blocks):
        prefix = f"backbone.{i}"
        if b.kind == "conv":
            conv_param(prefix, b.out_channels, cin, b.kernel)
            cin = b.out_channels
        elif b.kind == "fire":
            conv_param(f"{prefix}.squeeze", b.squeeze, cin, 1)
            conv_param(f"{prefix}.expand1", b.expand1, b.squeeze, 1)
            conv_param(f"{prefix}.expand3", b.expand3, b.squeeze, 3)
            cin = b.expand1 + b.expand3
    conv_param("head.em", 1, channels, 1)
    conv_param("head.im", 1, channels, 1)
    return ps


def _backbone(params, x, config):
    for i, b in enumerate(config.blocks):
        prefix = f"backbone.{i}"
        if b.kind == "conv":
            x = ag.relu(ag.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"],
                                  stride=b.stride, pad=b.pad))
        elif b.kind == "fire":
            s = ag.relu(ag.conv2d(x, params[f"{prefix}.squeeze.w"],
                                  params[f"{prefix}.squeeze.b"]))
            e1 = ag.relu(ag.conv2d(s, params[f"{prefix}.expand1.w"],
                                   params[f"{prefix}.expand1.b"]))
            e3 = ag.relu(ag.conv2d(s, params[f"{prefix}.expand3.w"],
                                   params[f"{prefix}.expand3.b"], pad=1))
            x = ag.concat_channels(e1, e3)
        elif b.kind == "pool":
            x = ag.maxpool2d(x, b.kernel, b.stride)
    return x


def forward_batch(params, images, config, mode="eval", rng=None):
    """Network forward over a batch.

    `images`: (N, 3, S, S) float64 array of encoded pixel values in [0,1].
    Returns (delta Tensor of shape (N,), em Tensor (N,1,H',W'), im Tensor).
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected (N,3,S,S) batch, got {images.shape}")
    if images.shape[2] != config.input_size or images.shape[3] != config.input_size:
        raise ShapeError(
            f"input is {images.shape[2]}x{images.shape[3]}, "
            f"config expects {config.input_size}x{config.input_size}"
        )
    x = ag.constant(images)
    feat = _backbone(params, x, config)
    feat = ag.dropout(feat, config.dropout_ratio, mode, rng)
    em = ag.tanh(ag.conv2d(feat, params["head.em.w"], params["head.em.b"]))
    if config.uniform_im:
        im = ag.constant(np.ones_like(em.data))
    else:
        im = ag.sigmoid(ag.conv2d(feat, params["head.im.w"], params["head.im.b"]))
    prod = ag.elementwise_mul(em, im)
    delta = ag.global_avg_pool(prod)       # (N, 1)
    n = delta.data.shape[0]

    def bw(o):
        ag._accumulate(delta, o.grad.reshape(n, 1))

    flat = ag.Tensor(delta.data.reshape(n), parents=(delta,), backward_fn=bw)
    return flat, em, im


def forward(params, image, config, mode="eval", rng=None):
    """Single-image forward: returns (delta_ev_norm in [-1,1], MeteringMaps).

    `image` is an ImagePlane (encoded) or a (3,S,S)/(S,S,3) array.
    """
    arr = _image_to_chw(image)
    delta, em, im = forward_batch(params, arr[None], config, mode=mode, rng=rng)
    maps = MeteringMaps(em=em.data[0, 0].copy(), im=im.data[0, 0].copy())
    return float(delta.data[0]), maps


def _image_to_chw(image):
    from .camera import ImagePlane

    if isinstance(image, ImagePlane):
        return image.data.transpose(2, 0, 1)
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr.transpose(2, 0, 1)
    raise ShapeError(f"cannot interpret image of shape {arr.shape}")


def aggregate_maps(em, im):
    """Mean of the elementwise product EM*IM."""
    em = np.asarray(em, dtype=np.float64)
    im = np.asarray(im, dtype=np.float64)
    if em.shape != im.shape:
        raise ShapeError(f"aggregate_maps: shapes {em.shape} vs {im.shape}")
    return float((em * im).mean())


def predict_delta_ev(params, image, config):
    """Deterministic run-time prediction, in EV units."""
    delta_norm, _ = forward(params, image, config, mode="eval")
    return delta_norm * config.scale_ev


def predict_delta_ev_batch(params, images, config):
    delta, _, _ = forward_batch(params, images, config, mode="eval")
    return delta.data * config.scale_ev


# ---------------------------------------------------------------------------
# model file format: magic, JSON header (config echo + manifest), float64 LE

class ModelFormatError(ValueError):
    pass


def save_params(params, config, path):
    manifest = []
    payloads = []
    for name, t in params.items():
        manifest.append({"name": name, "shape": list(t.data.shape)})
        payloads.append(np.ascontiguousarray(t.data, dtype="<f8"))
    state = {}
    for name in sorted(params.state):
        entry = {}
        for key in sorted(params.state[name]):
            val = params.state[name][key]
            if isinstance(val, np.ndarray):
                entry[key] = {"array": len(manifest), "shape": list(val.shape)}
                manifest.append({"name": f"state.{name}.{key}",
                                 "shape": list(val.shape)})
                payloads.append(np.ascontiguousarray(val, dtype="<f8"))
            else:
                entry[key] = {"scalar": val}
        state[name] = entry
    header = json.dumps({
        "version": 1,
        "config": config.to_dict(),
        "manifest": manifest,
        "state": state,
    }, sort_keys=True).encode("utf-8")
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for arr in payloads:
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load_params(path, expect_config=None):
    """Read a model file back into (ParamSet, NetConfig)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic bytes")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{path}: corrupt header: {e}") from None
    if header.get("version") != 1:
        raise ModelFormatError(f"{path}: unsupported version {header.get('version')}")
    config = NetConfig.from_dict(header["config"])
    if expect_config is not None and config.to_dict() != expect_config.to_dict():
        raise ModelFormatError(f"{path}: config echo mismatch")

    arrays = []
    pos = 16 + hlen
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(blob):
            raise ModelFormatError(f"{path}: truncated payload at {entry['name']}")
        arrays.append(np.frombuffer(blob[pos:end], dtype="<f8").reshape(shape).copy())
        pos = end
    if pos != len(blob):
        raise ModelFormatError(f"{path}: trailing bytes after payload")

    ps = ParamSet()
    by_name = {}
    for entry, arr in zip(header["manifest"], arrays):
        by_name[entry["name"]] = arr
        if not entry["name"].startswith("state."):
            ps.add(entry["name"], arr)
    for name, entry in header["state"].items():
        st = {}
        for key, desc in entry.items():
            if "scalar" in desc:
                st[key] = desc["scalar"]
            else:
                st[key] = by_name[f"state.{name}.{key}"]
        ps.state[name] = st
    return ps, config


# ---------------------------------------------------------------------------
# map visualization

def export_maps(maps, target_size):
    """Render EM (red=negative, green=positive, black=zero) and IM (linear
    grayscale) as encoded ImagePlanes, nearest-neighbor upsampled."""
    from .camera import ImagePlane

    em = np.asarray(maps.em, dtype=np.float64)
    im = np.asarray(maps.im, dtype=np.float64)
    em_rgb = np.zeros(em.shape + (3,))
    em_rgb[..., 0] = np.clip(-em, 0.0, 1.0)   # red for negative
    em_rgb[..., 1] = np.clip(em, 0.0, 1.0)    # green for positive
    im_rgb = np.repeat(np.clip(im, 0.0, 1.0)[..., None], 3, axis=2)

    def upsample(arr):
        h, w = arr.shape[:2]
        rows = (np.arange(target_size) * h) // target_size
        cols = (np.arange(target_size) * w) // target_size
        return arr[rows][:, cols]

    return (ImagePlane(upsample(em_rgb), "encoded"),
            ImagePlane(upsample(im_rgb), "encoded"))
