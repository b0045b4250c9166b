"""Intra-class feature distances and real-data-guided back-propagation (RDBP).

The real/real distance back-propagates through both feature branches. The
real/synthetic distance back-propagates only through the synthetic branch:
the real anchor's features act as a fixed target. This is realised by
detaching the anchor features in that term.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

NORM_EPS = 1e-12


class _SafeNorm(torch.autograd.Function):
    """Row-wise Euclidean norm whose gradient at a zero row is 0 instead of NaN."""

    @staticmethod
    def forward(ctx, diff):
        norm = diff.norm(dim=-1)
        ctx.save_for_backward(diff, norm)
        return norm

    @staticmethod
    def backward(ctx, grad_out):
        diff, norm = ctx.saved_tensors
        scale = grad_out / norm.clamp_min(NORM_EPS)
        return diff * scale.unsqueeze(-1)


def euclidean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {list(a.shape)} vs {list(b.shape)}")
    return _SafeNorm.apply(a - b)


@dataclass
class IntraClassTerms:
    dist_r: torch.Tensor
    dist_rf: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.dist_r + self.dist_rf


def intra_class_loss(f_x, f_xpr, f_xpf, rdbp: bool = True) -> IntraClassTerms:
    """Batch-mean distances; with ``rdbp`` the anchor is constant in the synthetic term.

    The forward values do not depend on ``rdbp``; only gradient routing does.
    """
    f_x, f_xpr, f_xpf = (torch.as_tensor(f) for f in (f_x, f_xpr, f_xpf))
    if not f_x.shape == f_xpr.shape == f_xpf.shape:
        raise ValueError("feature vectors must have equal shapes")
    anchor = f_x.detach() if rdbp else f_x
    return IntraClassTerms(euclidean(f_x, f_xpr).mean(), euclidean(anchor, f_xpf).mean())


def rdbp_gradients(extractor, x, x_pr, x_pf, rdbp: bool = True, params=None):
    """Gradients of the intra-class loss w.r.t. the extractor's parameters.

    Returns ``{"r": grads of dist_r, "rf": grads of dist_rf, "total": sum}``,
    each a list aligned with ``params``.
    """
    params = list(extractor.parameters()) if params is None else list(params)
    f_x, f_pr, f_pf = extractor(x), extractor(x_pr), extractor(x_pf)
    terms = intra_class_loss(f_x, f_pr, f_pf, rdbp=rdbp)
    if not terms.dist_rf.requires_grad and not terms.dist_r.requires_grad:
        raise ValueError("extractor outputs carry no graph to differentiate")

    def grads(loss):
        if not loss.requires_grad:
            return [torch.zeros_like(p) for p in params]
        gs = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
        return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]

    g_r, g_rf = grads(terms.dist_r), grads(terms.dist_rf)
    return {"r": g_r, "rf": g_rf, "total": [a + b for a, b in zip(g_r, g_rf)]}


def branch_gradient_norms(extractor, x, x_pr, x_pf, rdbp: bool = True) -> dict[str, float]:
    """Gradient norms arriving at each of the three feature paths (grad-audit)."""
    f_x, f_pr, f_pf = extractor(x), extractor(x_pr), extractor(x_pf)
    feats = [f.detach().requires_grad_(True) for f in (f_x, f_pr, f_pf)]
    total = intra_class_loss(*feats, rdbp=rdbp).total
    gs = torch.autograd.grad(total, feats, allow_unused=True)
    names = ("real_anchor", "real_pair", "synthetic")
    return {n: 0.0 if g is None else float(g.norm()) for n, g in zip(names, gs)}
