"""Procedural cartoon faces: a redistributable stand-in for expression databases.

Faces live in a canonical square [-1, 1]^2 (y pointing down). Each identity
fixes head shape, eye placement, brow height, skin tone and a resting mouth
curvature; each expression class pushes a few geometry axes away from the
neutral face, scaled linearly by intensity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .datamodel import DatasetManifest, ManifestEntry, to_uint8
from .datasets import write_manifest

SUPPORTED_SIZES = (32, 64, 128)
SUPERSAMPLE = 4
NOISE_AMPLITUDE = 0.02

CLASS_NAMES = ("happy", "sad", "surprise", "angry", "disgust", "fear", "contempt")

# geometry deltas at intensity 1:
# (mouth_curvature, brow_angle, eye_openness, brow_raise, mouth_open, mouth_tilt)
_CLASS_DELTAS = {
    "happy": (0.55, 0.0, -0.25, 0.0, 0.0, 0.0),
    "sad": (-0.5, 0.35, -0.1, 0.0, 0.0, 0.0),
    "surprise": (0.0, 0.0, 0.5, 0.08, 0.09, 0.0),
    "angry": (-0.1, -0.4, 0.1, -0.04, 0.0, 0.0),
    "disgust": (-0.25, -0.2, -0.35, 0.0, 0.03, 0.0),
    "fear": (-0.15, 0.3, 0.35, 0.06, 0.05, 0.0),
    "contempt": (0.1, 0.0, 0.0, 0.0, 0.0, 0.35),
}

# per-identity uniform ranges; chosen so every feature stays inside the frame
IDENTITY_RANGES = {
    "face_aspect": (0.78, 1.05),
    "eye_spacing": (0.28, 0.42),
    "eye_size": (0.07, 0.11),
    "brow_baseline": (0.06, 0.12),
    "skin_tone": (0.45, 0.85),
    "eye_height": (-0.28, -0.12),
    "mouth_height": (0.32, 0.46),
    "mouth_width": (0.18, 0.3),
    "mouth_rest": (-0.2, 0.2),
}


@dataclass(frozen=True)
class ToyIdentity:
    face_aspect: float
    eye_spacing: float
    eye_size: float
    brow_baseline: float
    skin_tone: float
    eye_height: float = -0.2
    mouth_height: float = 0.4
    mouth_width: float = 0.24
    mouth_rest: float = 0.0

    @classmethod
    def sample(cls, rng) -> "ToyIdentity":
        return cls(**{k: float(rng.uniform(lo, hi)) for k, (lo, hi) in IDENTITY_RANGES.items()})


@dataclass(frozen=True)
class ToyExpressionSpec:
    class_index: int
    intensity: float = 1.0

    def __post_init__(self):
        if not 0 <= self.class_index < len(CLASS_NAMES):
            raise ValueError(f"class index {self.class_index} outside 0..{len(CLASS_NAMES) - 1}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity {self.intensity} outside [0, 1]")

    @property
    def name(self) -> str:
        return CLASS_NAMES[self.class_index]

    def geometry(self) -> dict:
        keys = ("mouth_curvature", "brow_angle", "eye_openness", "brow_raise",
                "mouth_open", "mouth_tilt")
        deltas = _CLASS_DELTAS[self.name]
        return {k: self.intensity * d for k, d in zip(keys, deltas)}


def _canvas(size: int):
    n = size * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return np.meshgrid(c, c)  # xx, yy


def _ellipse(xx, yy, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _segment(xx, yy, x0, y0, x1, y1, half_width):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy)) <= half_width


def render(identity: ToyIdentity, expr: ToyExpressionSpec, size: int = 32,
           channels: int = 1, noise_seed=0) -> np.ndarray:
    """Rasterize one face to a ``[channels, size, size]`` array in [-1, 1].

    ``noise_seed=None`` disables the pixel noise.
    """
    if size not in SUPPORTED_SIZES:
        raise ValueError(f"unsupported size {size}; choose from {SUPPORTED_SIZES}")
    g = expr.geometry()
    idt = identity
    xx, yy = _canvas(size)
    img = np.full(xx.shape, 0.12)

    head = _ellipse(xx, yy, 0.0, 0.05, 0.62 * idt.face_aspect, 0.82)
    img[head] = idt.skin_tone

    openness = max(1.0 + g["eye_openness"], 0.15)
    eye_ry = 0.75 * idt.eye_size * openness
    brow_y = idt.eye_height - idt.eye_size - idt.brow_baseline - g["brow_raise"]
    for side in (-1.0, 1.0):
        cx = side * idt.eye_spacing
        img[_ellipse(xx, yy, cx, idt.eye_height, idt.eye_size, eye_ry)] = 0.05
        # positive brow_angle lifts the inner end (towards the nose)
        half = 0.12
        inner_x, outer_x = cx - side * half, cx + side * half
        lift = 0.5 * g["brow_angle"] * half * 2
        img[_segment(xx, yy, inner_x, brow_y - lift, outer_x, brow_y + lift, 0.03)] = 0.1

    mw = idt.mouth_width
    u = xx / mw
    curv = idt.mouth_rest + g["mouth_curvature"]
    # positive curvature raises the corners
    line = idt.mouth_height - 0.07 * curv * u**2 + 0.1 * g["mouth_tilt"] * u
    thick = 0.028 + g["mouth_open"] * np.clip(1.0 - u**2, 0.0, None)
    mouth = (np.abs(u) <= 1.0) & (np.abs(yy - line) <= thick)
    img[mouth] = 0.08

    img = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    if channels == 3:
        tint = np.array([1.0, 0.85, 0.72])[:, None, None]
        img = img[None] * tint
    elif channels == 1:
        img = img[None]
    else:
        raise ValueError("channels must be 1 or 3")
    out = img * 2.0 - 1.0
    if noise_seed is not None:
        rng = np.random.default_rng(noise_seed)
        out = out + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=out.shape)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def identity_for(seed: int, index: int) -> ToyIdentity:
    return ToyIdentity.sample(np.random.default_rng([seed, index]))


def save_png(img: np.ndarray, path) -> None:
    arr = to_uint8(img)
    if arr.shape[0] == 1:
        PILImage.fromarray(arr[0], mode="L").save(path)
    else:
        PILImage.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path)


def generate_dataset(n_identities: int, num_classes: int, intensities, size: int = 32,
                     seed: int = 0, out_dir=".", channels: int = 1) -> DatasetManifest:
    """Render every (identity, class, intensity) combination and write a manifest."""
    if n_identities < 1:
        raise ValueError("need at least one identity")
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must lie in [2, {len(CLASS_NAMES)}]")
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_identities):
        identity = identity_for(seed, i)
        subject = f"s{i:04d}"
        for k in range(num_classes):
            for j, level in enumerate(intensities):
                img = render(identity, ToyExpressionSpec(k, float(level)), size, channels,
                             noise_seed=(seed, i, k, j))
                rel = f"images/{subject}_c{k}_i{j}.png"
                save_png(img, out / rel)
                entries.append(ManifestEntry(rel, subject, k))
    manifest = DatasetManifest(tuple(entries), num_classes, size, channels, root=str(out))
    write_manifest(manifest, out / "manifest.tsv")
    return manifest
