"""Data ingestion and synthesis: procedural scenes, EV-bracket augmentation,
synthetic expert oracles producing coarse three-way labels, and the
tab-separated manifest format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import (
    ImagePlane,
    SceneModel,
    apply_exposure_shift,
    linearize,
    mean_linear_luminance,
    render,
)

MID_GRAY = 0.18
WELL_EXPOSED_TOLERANCE = 0.1
DEFAULT_EXPERT_BIASES = {
    "expert_a": -0.4,
    "expert_b": -0.2,
    "expert_c": 0.0,
    "expert_d": 0.2,
    "expert_e": 0.4,
}


@dataclass
class ManifestRecord:
    image_path: str
    ground_truth_delta_ev: float | None = None
    coarse_label: str | None = None
    expert_id: str | None = None
    scene_seed: int | None = None

    def __post_init__(self):
        if self.ground_truth_delta_ev is None and self.coarse_label is None:
            raise ValueError("record needs ground_truth_delta_ev or coarse_label")
        if self.coarse_label is not None and \
                self.coarse_label not in ("under", "well", "over"):
            raise ValueError(f"bad coarse_label {self.coarse_label!r}")


@dataclass
class BracketItem:
    image: ImagePlane
    target_action: float   # corrective EV Y*_t for this item
    index: int


@dataclass
class ExpertOracle:
    expert_id: str
    bias_ev: float = 0.0
    target_statistic: float = MID_GRAY
    tolerance: float = WELL_EXPOSED_TOLERANCE


@dataclass
class SceneSpec:
    size: int = 64
    n_shapes_range: tuple = (1, 4)
    luminance_range: tuple = (0.05, 3.0)
    base_importance: float = 0.1
    scale_ev_range: tuple = (-1.5, 1.5)

    def to_dict(self):
        return {
            "size": self.size,
            "n_shapes_range": list(self.n_shapes_range),
            "luminance_range": list(self.luminance_range),
            "base_importance": self.base_importance,
            "scale_ev_range": list(self.scale_ev_range),
        }

    @staticmethod
    def from_dict(d):
        return SceneSpec(
            size=d["size"],
            n_shapes_range=tuple(d["n_shapes_range"]),
            luminance_range=tuple(d["luminance_range"]),
            base_importance=d["base_importance"],
            scale_ev_range=tuple(d["scale_ev_range"]),
        )


# ---------------------------------------------------------------------------
# manifests: one record per line, UTF-8, tab-separated key=value pairs

_MANIFEST_KEYS = {
    "image": ("image_path", str),
    "gt_delta_ev": ("ground_truth_delta_ev", float),
    "label": ("coarse_label", str),
    "expert": ("expert_id", str),
    "scene_seed": ("scene_seed", int),
}


def load_manifest(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = {}
            for token in line.split("\t"):
                if "=" not in token:
                    raise ValueError(f"{path}:{lineno}: malformed field {token!r}")
                key, value = token.split("=", 1)
                if key not in _MANIFEST_KEYS:
                    import warnings
                    warnings.warn(f"{path}:{lineno}: ignoring unknown field {key!r}")
                    continue
                attr, conv = _MANIFEST_KEYS[key]
                try:
                    fields[attr] = conv(value)
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: bad value for {key}: {value!r}"
                    ) from None
            try:
                records.append(ManifestRecord(image_path=fields.pop("image_path", ""),
                                              **fields))
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return records


def save_manifest(records, path):
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for r in records:
            parts = [f"image={r.image_path}"]
            if r.ground_truth_delta_ev is not None:
                parts.append(f"gt_delta_ev={r.ground_truth_delta_ev:.9f}")
            if r.coarse_label is not None:
                parts.append(f"label={r.coarse_label}")
            if r.expert_id is not None:
                parts.append(f"expert={r.expert_id}")
            if r.scene_seed is not None:
                parts.append(f"scene_seed={r.scene_seed}")
            f.write("\t".join(parts) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# bracket synthesis

def bracket_targets(lo=-2.0, hi=2.0, step=0.2):
    n_steps = (hi - lo) / step
    if step <= 0 or lo >= hi:
        raise ValueError(f"bad bracket ladder ({lo}, {hi}, {step})")
    if abs(n_steps - round(n_steps)) > 1e-9:
        raise ValueError(f"(hi-lo)/step must be integral, got {n_steps}")
    count = int(round(n_steps)) + 1
    return [lo + t * step for t in range(count)]


def synth_bracket(image, lo=-2.0, hi=2.0, step=0.2):
    """Expand one image into a ladder of exposure-shifted variants.

    Item t carries target_action Y*_t = lo + t*step and the image shifted by
    -Y*_t, so applying Y*_t to item t restores the original exposure. The
    zero-target item is the original, untouched.
    """
    items = []
    for t, target in enumerate(bracket_targets(lo, hi, step)):
        if abs(target) < 1e-12:
            shifted = ImagePlane(image.data.copy(), image.space)
        else:
            shifted = apply_exposure_shift(image, -target)
        items.append(BracketItem(image=shifted, target_action=target, index=t))
    return items


# ---------------------------------------------------------------------------
# procedural scenes

def generate_scene(seed, spec=None):
    """Deterministic synthetic scene: background gradient plus foreground
    shapes flagged important; optimal_ev found by monotone bisection so the
    importance-weighted mean linear luminance of the render hits mid-gray."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    size = spec.size
    lo, hi = spec.luminance_range

    ys = np.linspace(0.0, 1.0, size)[:, None]
    top = rng.uniform(lo, hi)
    bottom = rng.uniform(lo, hi)
    base = top + (bottom - top) * ys
    tint = rng.uniform(0.7, 1.3, size=3)
    lum = np.repeat(base[:, :, None], 3, axis=2) * tint

    mask = np.full((size, size), spec.base_importance)
    n_shapes = int(rng.integers(spec.n_shapes_range[0], spec.n_shapes_range[1] + 1))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n_shapes):
        cx, cy = rng.uniform(0.15, 0.85, size=2) * size
        r = rng.uniform(0.08, 0.25) * size
        shape_lum = rng.uniform(lo, hi)
        shape_tint = rng.uniform(0.7, 1.3, size=3)
        if rng.random() < 0.5:
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            inside = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r * 0.8)
        lum[inside] = shape_lum * shape_tint
        mask[inside] = 1.0

    lum *= 2.0 ** rng.uniform(*spec.scale_ev_range)
    lum = np.maximum(lum, 1e-6)

    scene = SceneModel(luminance_field=lum, importance_mask=mask,
                       optimal_ev=0.0, ev_ref=0.0, seed=int(seed),
                       spec=spec.to_dict())
    scene.optimal_ev = _bisect_optimal_ev(scene)
    return scene


def _weighted_stat_at(scene, ev):
    lin = np.clip(scene.luminance_field * 2.0 ** (ev - scene.ev_ref), 0.0, 1.0)
    lum = lin.mean(axis=2)
    w = scene.importance_mask
    return float((lum * w).sum() / w.sum())


def _bisect_optimal_ev(scene, target=MID_GRAY, lo=-12.0, hi=12.0, iters=60):
    if _weighted_stat_at(scene, hi) < target:
        return hi
    if _weighted_stat_at(scene, lo) > target:
        return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _weighted_stat_at(scene, mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# expert oracles

def _shifted_stat(lin_lum, weights, delta):
    lum = np.clip(lin_lum * 2.0 ** delta, None, 1.0).mean(axis=2)
    if weights is None:
        return float(lum.mean())
    return float((lum * weights).sum() / weights.sum())


def oracle_delta_ev(image, oracle, weights=None):
    """Corrective EV for `image` under the oracle's preference: the shift
    landing its weighted mean linear luminance on the target, plus bias."""
    lin = linearize(image).data
    lo, hi = -8.0, 8.0
    target = oracle.target_statistic
    if _shifted_stat(lin, weights, hi) < target:
        return 2.0    # all-black: cannot bracket, clamp by deficit sign
    if _shifted_stat(lin, weights, lo) > target:
        return -2.0   # all-white
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _shifted_stat(lin, weights, mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) + oracle.bias_ev


def expert_label(image, oracle, weights=None):
    """Three-way coarse label plus the underlying ground-truth correction."""
    gt = oracle_delta_ev(image, oracle, weights=weights)
    tol = oracle.tolerance
    if abs(gt) < tol:
        label = "well"
    elif gt >= tol:
        label = "under"   # needs more exposure
    else:
        label = "over"
    return label, gt


def default_experts(ids_and_biases=None):
    items = ids_and_biases or DEFAULT_EXPERT_BIASES
    return {eid: ExpertOracle(expert_id=eid, bias_ev=bias)
            for eid, bias in items.items()}


# ---------------------------------------------------------------------------
# splits

def split_train_test(records, test_fraction, seed):
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0,1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(records))
    n_test = int(round(len(records) * test_fraction))
    test_idx = set(idx[:n_test].tolist())
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


# ---------------------------------------------------------------------------
# training-pair construction used by the pipelines

def scene_training_pairs(scenes, lo=-2.0, hi=2.0, step=0.2, gamma=2.2):
    """(chw image array, normalized label) pairs: every scene rendered at its
    optimal EV and expanded through the bracket ladder."""
    pairs = []
    for scene in scenes:
        well = render(scene, scene.optimal_ev, gamma=gamma)
        for item in synth_bracket(well, lo, hi, step):
            pairs.append((item.image.data.transpose(2, 0, 1).astype(np.float32),
                          item.target_action))
    return pairs
