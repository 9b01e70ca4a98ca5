"""Trainable prototypes, entropic transport assignments, and the bidirectional
prototype-guided alignment loss."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import l2norm
from .errors import ShapeError

SINKHORN_ITERS = 3
SINKHORN_EPS = 0.05


class PrototypeBank(nn.Module):
    """k trainable unit prototypes in the joint space plus the score temperature."""

    def __init__(self, k: int, d: int, tau: float = 0.1):
        super().__init__()
        if k < 2:
            raise ShapeError("need at least 2 prototypes")
        self.k = k
        self.d = d
        self.tau = tau
        self.prototypes = nn.Parameter(torch.randn(k, d))
        self.renormalize()

    @torch.no_grad()
    def renormalize(self):
        """Rescale prototype rows to unit norm (call after every optimizer step)."""
        self.prototypes.copy_(l2norm(self.prototypes, dim=1))


def prototype_scores(embeddings: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """Row-softmax of embedding-prototype similarities; m x k with rows summing to 1."""
    if embeddings.dim() != 2 or embeddings.shape[1] != bank.d:
        raise ShapeError(
            f"embeddings {tuple(embeddings.shape)} incompatible with prototype dim {bank.d}"
        )
    return F.softmax(embeddings @ bank.prototypes.t(), dim=1)


def sinkhorn_assign(
    scores: torch.Tensor, iters: int = SINKHORN_ITERS, eps: float = SINKHORN_EPS
) -> torch.Tensor:
    """Entropic-transport soft assignments from an m x k score matrix.

    Alternates column normalization to mass 1/k with row normalization to
    mass 1/m, then rescales rows to proper distributions.  Runs detached:
    assignment targets are constants to the optimizer.
    """
    if scores.dim() != 2:
        raise ShapeError("scores must be a matrix")
    if iters < 1 or eps <= 0:
        raise ValueError("need iters >= 1 and eps > 0")
    with torch.no_grad():
        m, k = scores.shape
        tiny = torch.finfo(scores.dtype).tiny
        mat = torch.exp(scores / eps - (scores.max() / eps))  # max-shift overflow guard
        for _ in range(iters):
            mat = mat / (k * mat.sum(dim=0, keepdim=True).clamp(min=tiny))
            mat = mat / (m * mat.sum(dim=1, keepdim=True).clamp(min=tiny))
        return mat * m  # rows now sum to 1


def pga_loss(
    u_v: torch.Tensor,
    u_t: torch.Tensor,
    d_v: torch.Tensor,
    d_t: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Cross-entropy of each modality's temperature-scaled score softmax against
    the other modality's assignment rows, averaged over the batch and summed
    over directions."""
    if not (u_v.shape == u_t.shape == d_v.shape == d_t.shape):
        raise ShapeError("score and assignment matrices must share one m x k shape")
    loss_img = -(d_t * F.log_softmax(u_v / tau, dim=1)).sum(dim=1).mean()
    loss_txt = -(d_v * F.log_softmax(u_t / tau, dim=1)).sum(dim=1).mean()
    return loss_img + loss_txt


@dataclass
class AssignmentResult:
    """Scores and transport assignments for one batch."""

    u_v: torch.Tensor
    u_t: torch.Tensor
    d_v: torch.Tensor
    d_t: torch.Tensor


def assign_batch(
    v: torch.Tensor,
    t: torch.Tensor,
    bank: PrototypeBank,
    iters: int = SINKHORN_ITERS,
    eps: float = SINKHORN_EPS,
) -> AssignmentResult:
    u_v = prototype_scores(v, bank)
    u_t = prototype_scores(t, bank)
    return AssignmentResult(
        u_v=u_v,
        u_t=u_t,
        d_v=sinkhorn_assign(u_v, iters, eps),
        d_t=sinkhorn_assign(u_t, iters, eps),
    )


def pga_from_embeddings(
    v: torch.Tensor,
    t: torch.Tensor,
    bank: PrototypeBank,
    iters: int = SINKHORN_ITERS,
    eps: float = SINKHORN_EPS,
    targets=None,
) -> torch.Tensor:
    """Alignment loss straight from embeddings.

    ``targets`` optionally fixes the (d_v, d_t) assignment pair; assignments
    are constants to the optimizer either way.
    """
    u_v = prototype_scores(v, bank)
    u_t = prototype_scores(t, bank)
    if targets is None:
        d_v = sinkhorn_assign(u_v, iters, eps)
        d_t = sinkhorn_assign(u_t, iters, eps)
    else:
        d_v, d_t = targets
    return pga_loss(u_v, u_t, d_v, d_t, bank.tau)
