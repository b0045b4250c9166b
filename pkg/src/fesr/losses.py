"""Adversarial, classification, content and recognition objectives, and their weighting.

All losses take torch tensors and return 0-dim tensors; ``aggregate`` also
works on plain floats.
"""

from __future__ import annotations

import logging

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7

TERM_NAMES = ("adv_g_img", "adv_d_img", "gp", "adv_g_z", "adv_d_z", "cls_D_f", "cls_D_r",
              "rec", "id", "cls_R_r", "cls_R_f", "cls_R", "intra", "dist_r", "dist_rf")
TOTAL_NAMES = ("L_G", "L_Dimg", "L_Dz", "L_R")


class NonFiniteError(ValueError):
    pass


def _nonempty(*arrays):
    for a in arrays:
        if a.numel() == 0:
            raise ValueError("loss input is empty")


def adv_g_img(fake_scores: torch.Tensor) -> torch.Tensor:
    """Generator side of the Wasserstein critic loss; patch maps are averaged."""
    _nonempty(fake_scores)
    return -fake_scores.mean()


def adv_d_img(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    _nonempty(real_scores, fake_scores)
    return -real_scores.mean() + fake_scores.mean()


def gradient_penalty(disc, real: torch.Tensor, fake: torch.Tensor, coeff: float = 10.0,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """coeff * E[(||grad D(x_mix)||_2 - 1)^2] on random interpolates of real and fake.

    ``disc`` returns either the critic scores or a (scores, ...) tuple.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real {list(real.shape)} and fake {list(fake.shape)} differ in shape")
    if coeff == 0:
        return real.new_zeros(())
    eps = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=generator,
                     dtype=real.dtype)
    mix = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    out = disc(mix)
    scores = out[0] if isinstance(out, tuple) else out
    # per-sample critic value = mean over its patch map
    per_sample = scores.reshape(scores.shape[0], -1).mean(dim=1)
    (grad,) = torch.autograd.grad(per_sample.sum(), mix, create_graph=True)
    norms = grad.reshape(grad.shape[0], -1).norm(dim=1)
    return coeff * ((norms - 1.0) ** 2).mean()


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    if bool(((p <= 0) | (p >= 1)).any()):
        log.debug("clamping %d probabilities at the boundary", int(((p <= 0) | (p >= 1)).sum()))
    return torch.log(p.clamp(PROB_CLAMP, 1 - PROB_CLAMP))


def adv_g_z(p_fake: torch.Tensor) -> torch.Tensor:
    _nonempty(p_fake)
    return -_clamped_log(p_fake).mean()


def adv_d_z(p_prior: torch.Tensor, p_fake: torch.Tensor) -> torch.Tensor:
    _nonempty(p_prior, p_fake)
    return -_clamped_log(p_prior).mean() - _clamped_log(1 - p_fake).mean()


def cls_ce(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log softmax probability of the true class."""
    if logits.dim() == 1:
        logits = logits[None]
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if not torch.isfinite(logits).all():
        raise NonFiniteError("non-finite logits")
    return F.cross_entropy(logits, labels)


def recon_l1(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch {list(x.shape)} vs {list(x_rec.shape)}")
    return (x - x_rec).abs().mean()


def identity_l1(f_x: torch.Tensor, f_rec: torch.Tensor) -> torch.Tensor:
    if f_x.shape != f_rec.shape:
        raise ValueError(f"embedding shapes differ: {list(f_x.shape)} vs {list(f_rec.shape)}")
    return (f_x - f_rec).abs().mean()


def _get(report, name):
    try:
        return report[name]
    except KeyError:
        raise KeyError(f"loss term {name!r} required for this objective is missing") from None


def generator_objective(report, lambdas, stage: str, variant=None):
    """L_G; disabled components (per variant) are skipped rather than required."""
    l1, l2, l3, l4, _, _ = lambdas
    v = variant
    total = 0.0
    if v is None or v.image_disc:
        total = total + _get(report, "adv_g_img")
    if v is None or v.latent_disc:
        total = total + l1 * _get(report, "adv_g_z")
    if v is None or v.content_losses:
        total = total + l2 * _get(report, "rec")
        if v is None or v.identity_loss:
            total = total + l3 * _get(report, "id")
    cls_terms = 0.0
    if v is None or (v.image_disc and v.image_disc_cls):
        cls_terms = cls_terms + _get(report, "cls_D_f")
    if stage == "joint" and (v is None or (v.joint and v.synthesis)):
        cls_terms = cls_terms + _get(report, "cls_R_f")
    return total + l4 * cls_terms


def image_disc_objective(report, lambdas, variant=None):
    l5 = lambdas[4]
    total = l5 * _get(report, "adv_d_img") + _get(report, "gp")
    if variant is None or variant.image_disc_cls:
        total = total + _get(report, "cls_D_r")
    return total


def recognizer_objective(report, lambdas, variant=None):
    """L_R = lambda6 * intra + cls_R, cls_R being the mean CE over R's whole batch."""
    if "cls_R" in report:
        cls_r = report["cls_R"]
    elif "cls_R_f" in report:
        cls_r = 0.5 * (_get(report, "cls_R_r") + report["cls_R_f"])
    else:
        cls_r = _get(report, "cls_R_r")
    if variant is None or variant.intra_loss:
        return lambdas[5] * _get(report, "intra") + cls_r
    return cls_r


def aggregate(report, lambdas, stage: str = "pretrain", variant=None):
    """(L_G, L_Dimg, L_Dz, L_R); totals whose network is inactive come back as None."""
    if stage not in ("pretrain", "joint"):
        raise ValueError(f"unknown stage {stage!r}")
    v = variant
    l_g = generator_objective(report, lambdas, stage, v) if (v is None or v.synthesis) else None
    l_dimg = image_disc_objective(report, lambdas, v) if (v is None or (v.synthesis and v.image_disc)) else None
    l_dz = _get(report, "adv_d_z") if (v is None or (v.synthesis and v.latent_disc)) else None
    l_r = None
    if stage == "joint" and (v is None or v.recognizer):
        l_r = recognizer_objective(report, lambdas, v)
    return l_g, l_dimg, l_dz, l_r
