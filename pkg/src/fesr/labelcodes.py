"""One-hot labels, the signed intensity code, and label / prior sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datamodel import ExpressionLabel


def one_hot(class_index: int, num_classes: int) -> ExpressionLabel:
    return ExpressionLabel(int(class_index), int(num_classes))


def intensity_code(label, v) -> np.ndarray:
    """u = v * (2y - 1): positive magnitude on the target class, negative elsewhere.

    ``label`` may be an ExpressionLabel or a one-hot vector.
    """
    y = label.onehot if isinstance(label, ExpressionLabel) else np.asarray(label, np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != y.shape:
        raise ValueError(f"v has shape {v.shape}, label has {y.shape}")
    if np.any(v <= 0) or np.any(v > 1):
        raise ValueError("every component of v must lie in (0, 1]")
    return v * (2.0 * y - 1.0)


@dataclass
class IntensitySampler:
    rng_seed: int = 0
    mode: str = "random_per_sample"   # or "fixed_value"
    fixed_v: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("random_per_sample", "fixed_value"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "fixed_value":
            if self.fixed_v is None:
                raise ValueError("fixed_value mode needs fixed_v")
            v = np.asarray(self.fixed_v, dtype=np.float64)
            if np.any(v <= 0) or np.any(v > 1):
                raise ValueError("fixed_v components must lie in (0, 1]")
        self.rng = np.random.default_rng(self.rng_seed)

    def draw(self, k: int) -> np.ndarray:
        if self.mode == "fixed_value":
            return np.broadcast_to(np.asarray(self.fixed_v, np.float64), (k,)).copy()
        return self.rng.uniform(0.0, 1.0, size=k)


def sample_intensity(label: ExpressionLabel, sampler: IntensitySampler) -> np.ndarray:
    v = sampler.draw(label.num_classes)
    # v ~ U[0, 1) may hit 0 exactly; the code is still well defined there
    return v * (2.0 * label.onehot - 1.0)


def sample_target_label(current: ExpressionLabel, num_classes: int, rng) -> ExpressionLabel:
    """Uniform over the K-1 classes different from ``current``."""
    if num_classes < 2:
        raise ValueError("need at least two classes to pick a different target")
    k = int(rng.integers(num_classes - 1))
    if k >= current.class_index:
        k += 1
    return ExpressionLabel(k, num_classes)


def sample_prior(n: int, rng) -> np.ndarray:
    if n < 1:
        raise ValueError("latent dimension must be >= 1")
    return rng.uniform(-1.0, 1.0, size=n)


# batched torch versions used inside the training step

def intensity_codes(labels: torch.Tensor, num_classes: int, v: torch.Tensor | None = None,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """Batched u(y) for integer labels; v drawn per sample and per class when omitted."""
    y = torch.nn.functional.one_hot(labels, num_classes).float()
    if v is None:
        v = torch.rand(y.shape, generator=generator)
    return v * (2.0 * y - 1.0)


def target_labels(labels: torch.Tensor, num_classes: int,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    shift = torch.randint(1, num_classes, labels.shape, generator=generator)
    return (labels + shift) % num_classes


def prior_batch(batch: int, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    return torch.rand(batch, n, generator=generator) * 2.0 - 1.0
