"""Core value types: labels, triplets, dataset manifests and the experiment config.

Images are plain arrays (numpy ``[c, H, W]`` or torch ``[B, c, H, W]``) with
values in [-1, 1]; there is deliberately no wrapper class around pixels.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .variants import VARIANTS

PAPER_LAMBDAS = (1.0, 10.0, 5.0, 1.0, 1.0, 0.001)


@dataclass(frozen=True)
class ExpressionLabel:
    class_index: int
    num_classes: int

    def __post_init__(self):
        if not 0 <= self.class_index < self.num_classes:
            raise ValueError(
                f"class index {self.class_index} out of range for K={self.num_classes}"
            )

    @property
    def onehot(self) -> np.ndarray:
        y = np.zeros(self.num_classes, dtype=np.float32)
        y[self.class_index] = 1.0
        return y


@dataclass(frozen=True)
class Triplet:
    """Anchor real image, same-class real image, same-class synthetic image."""

    x: Any
    x_pr: Any
    x_pf: Any
    label: ExpressionLabel


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: str
    class_index: int


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    num_classes: int
    image_size: int
    channels: int = 1
    root: str = "."

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else Path(self.root) / p

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})


@dataclass
class ExperimentConfig:
    # lambda_1..lambda_6: adv_g_z, rec, id, classifier terms, adv_d_img, intra
    lambdas: tuple[float, ...] = PAPER_LAMBDAS
    p_pre: int = 2000
    p_max: int = 6000
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    latent_dim: int = 64
    image_size: int = 32
    channels: int = 1
    num_classes: int = 6
    gp_coeff: float = 10.0
    variant: str = "FESR_JL"
    seed: int = 0

    # architecture scaling (64 reproduces the 128x128 widths of the FESGAN table)
    base_width: int = 64
    recognizer_widths: tuple[int, ...] = (256, 512)
    recognizer_hidden: int = 2048
    feature_dim: int = 512
    dropout: float = 0.5

    # toy identity embedder (stand-in for a pre-trained face recognition net)
    embed_dim: int = 64
    embed_width: int = 16
    embed_steps: int = 300

    d_steps: int = 1
    checkpoint_every: int = 0
    identity_on_synth: bool = False
    pair_same_subject: bool = False
    fold_count: int = 5
    debug_isolation: bool = False

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if isinstance(v, list):
                v = tuple(v)
            kwargs[k] = v
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """Return one message per broken invariant; empty when the config is usable."""
    problems = []
    if len(cfg.lambdas) != 6:
        problems.append(f"lambdas must have 6 entries, got {len(cfg.lambdas)}")
    for i, lam in enumerate(cfg.lambdas, start=1):
        if not lam >= 0:
            problems.append(f"lambda{i} = {lam} must be non-negative")
    if cfg.p_pre < 0:
        problems.append(f"p_pre = {cfg.p_pre} must be >= 0")
    if cfg.p_pre > cfg.p_max:
        problems.append(f"p_pre <= p_max violated: p_pre={cfg.p_pre}, p_max={cfg.p_max}")
    if cfg.batch_size < 1:
        problems.append(f"batch_size = {cfg.batch_size} must be >= 1")
    if not cfg.learning_rate > 0:
        problems.append(f"learning_rate = {cfg.learning_rate} must be positive")
    for name in ("beta1", "beta2"):
        b = getattr(cfg, name)
        if not 0 <= b < 1:
            problems.append(f"{name} = {b} must lie in [0, 1)")
    if not (_is_pow2(cfg.image_size) and cfg.image_size >= 32):
        problems.append(f"image_size = {cfg.image_size} must be a power of two >= 32")
    if cfg.channels < 1:
        problems.append(f"channels = {cfg.channels} must be >= 1")
    if cfg.num_classes < 2:
        problems.append(f"num_classes = {cfg.num_classes} must be >= 2")
    if cfg.latent_dim < 1:
        problems.append(f"latent_dim = {cfg.latent_dim} must be >= 1")
    if cfg.gp_coeff < 0:
        problems.append(f"gp_coeff = {cfg.gp_coeff} must be non-negative")
    if cfg.variant not in VARIANTS:
        problems.append(f"unknown variant {cfg.variant!r}")
    if cfg.d_steps < 1:
        problems.append(f"d_steps = {cfg.d_steps} must be >= 1")
    if cfg.checkpoint_every < 0:
        problems.append(f"checkpoint_every = {cfg.checkpoint_every} must be >= 0")
    if not 0 <= cfg.dropout < 1:
        problems.append(f"dropout = {cfg.dropout} must lie in [0, 1)")
    if cfg.fold_count < 2:
        problems.append(f"fold_count = {cfg.fold_count} must be >= 2")
    return problems


def rescale_to_unit(pixels) -> np.ndarray:
    """Map 8-bit intensities linearly onto [-1, 1] (0 -> -1, 255 -> +1)."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError(
            f"pixel values must lie in [0, 255], got [{arr.min()}, {arr.max()}]"
        )
    return (arr / 127.5 - 1.0).astype(np.float32)


def to_uint8(img) -> np.ndarray:
    """Inverse of rescale_to_unit, rounding to the nearest 8-bit level."""
    arr = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.rint((arr + 1.0) * 127.5).astype(np.uint8)
