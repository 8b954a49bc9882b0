"""Radiometric camera model: EV algebra, gamma linearization, synthetic
exposure shifts, EV -> (shutter, ISO) decomposition, and the firmware
latency queue.

Images are real-valued RGB planes in [0,1], tagged with the space they live
in (gamma-encoded vs linear); 8-bit quantization happens only at file I/O.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

DEFAULT_GAMMA = 2.2
DEFAULT_ISO_LEVELS = (100, 200, 400, 800, 1600, 3200)
DEFAULT_LATENCY_DEPTH = 3


class SpaceError(ValueError):
    """Image is in the wrong space (encoded vs linear) for this operation."""


@dataclass
class ImagePlane:
    data: np.ndarray          # (H, W, 3) float64 in [0,1]
    space: str                # "encoded" | "linear"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"ImagePlane expects (H,W,3), got {self.data.shape}")
        if self.space not in ("encoded", "linear"):
            raise ValueError(f"bad space tag {self.space!r}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass
class HardwareLimits:
    iso_levels: tuple = DEFAULT_ISO_LEVELS
    shutter_min_s: float = 1.0 / 8000.0
    shutter_max_s: float = 0.5


@dataclass
class ExposureState:
    ev: float
    shutter_s: float
    iso: float
    limits: HardwareLimits = field(default_factory=HardwareLimits)
    saturated: bool = False


@dataclass
class SceneModel:
    """Synthetic scene: positive linear luminance field plus importance mask.

    `optimal_ev` is the oracle ground truth (importance-weighted mean linear
    luminance hits the mid-gray target when rendered there); `ev_ref` is the
    scene's normalization constant.
    """

    luminance_field: np.ndarray   # (H, W, 3), strictly positive, linear
    importance_mask: np.ndarray   # (H, W) in [0,1]
    optimal_ev: float
    ev_ref: float = 0.0
    seed: int | None = None
    spec: dict | None = None


class LatencyQueue:
    """FIFO of EV commands; a command issued at step i lands at step i+depth."""

    def __init__(self, depth, initial_ev):
        if depth < 0:
            raise ValueError("latency depth must be >= 0")
        self.depth = depth
        self.pending = deque([float(initial_ev)] * depth)

    def step(self, new_ev_command):
        self.pending.append(float(new_ev_command))
        return self.pending.popleft()


def latency_step(queue, new_ev_command):
    return queue.step(new_ev_command)


# ---------------------------------------------------------------------------
# EV algebra

def ev_from_settings(shutter_s, iso):
    if shutter_s <= 0 or iso <= 0:
        raise ValueError(f"shutter and iso must be positive, got {shutter_s}, {iso}")
    return math.log2(shutter_s * iso)


def decompose_ev(ev, limits=None):
    """Realize an EV as (shutter_s, iso, saturated), preferring the smallest
    ISO whose shutter time stays within hardware limits."""
    limits = limits or HardwareLimits()
    if not limits.iso_levels:
        raise ValueError("iso_levels must be non-empty")
    levels = sorted(limits.iso_levels)
    for iso in levels:
        shutter = 2.0 ** ev / iso
        if shutter <= limits.shutter_max_s:
            if shutter < limits.shutter_min_s:
                return limits.shutter_min_s, iso, True
            return shutter, iso, False
    return limits.shutter_max_s, levels[-1], True


# ---------------------------------------------------------------------------
# gamma and exposure shifts

def linearize(img, gamma=DEFAULT_GAMMA):
    if img.space != "encoded":
        raise SpaceError("linearize expects an encoded image")
    return ImagePlane(np.power(img.data, gamma), "linear")


def delinearize(img, gamma=DEFAULT_GAMMA):
    if img.space != "linear":
        raise SpaceError("delinearize expects a linear image")
    return ImagePlane(np.power(img.data, 1.0 / gamma), "encoded")


def apply_exposure_shift(img, delta_ev, gamma=DEFAULT_GAMMA):
    """Synthesize an exposure change: decode, scale by 2^delta_ev in linear
    light, clamp, re-encode."""
    if abs(delta_ev) > 4.0:
        raise ValueError(f"|delta_ev| must be <= 4, got {delta_ev}")
    if img.space != "encoded":
        raise SpaceError("apply_exposure_shift expects an encoded image")
    lin = np.power(img.data, gamma) * 2.0 ** delta_ev
    np.clip(lin, 0.0, 1.0, out=lin)
    return ImagePlane(np.power(lin, 1.0 / gamma), "encoded")


def render(scene, ev, gamma=DEFAULT_GAMMA):
    """Expose the scene's luminance field at `ev` and gamma-encode."""
    lin = scene.luminance_field * 2.0 ** (ev - scene.ev_ref)
    lin = np.clip(lin, 0.0, 1.0)
    return ImagePlane(np.power(lin, 1.0 / gamma), "encoded")


def mean_linear_luminance(img, weights=None, gamma=DEFAULT_GAMMA):
    """Importance-weighted mean linear luminance (channel-averaged)."""
    lin = img.data if img.space == "linear" else np.power(img.data, gamma)
    lum = lin.mean(axis=2)
    if weights is None:
        return float(lum.mean())
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return float(lum.mean())
    return float((lum * w).sum() / total)


# ---------------------------------------------------------------------------
# file I/O (8-bit at the boundary; encoded space assumed for files)

def to_uint8(img):
    return np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr):
    return ImagePlane(arr.astype(np.float64) / 255.0, "encoded")


def write_png(img, path):
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def write_ppm(img, path):
    arr = to_uint8(img)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary P6 PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return from_uint8(data.reshape(h, w, 3).copy())
