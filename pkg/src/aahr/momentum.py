"""Momentum encoder shadowing, FIFO feature banks, and the momentum
contrastive (InfoNCE) loss."""

import copy

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapacityError, ShapeError


class MemoryBank:
    """Fixed-capacity FIFO ring of row features, stored at 32-bit.

    After pushes totaling more than ``capacity`` rows, the retained rows are
    exactly the most recent ``capacity`` in insertion order modulo ring wrap.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise CapacityError("capacity and dim must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, dtype=torch.float32)
        self.write_index = 0
        self.filled = 0

    def push(self, feats: torch.Tensor) -> None:
        if feats.dim() != 2 or feats.shape[1] != self.dim:
            raise ShapeError(f"expected b x {self.dim} features, got {tuple(feats.shape)}")
        b = feats.shape[0]
        if b > self.capacity:
            raise CapacityError(f"batch of {b} rows exceeds bank capacity {self.capacity}")
        rows = feats.detach().to(torch.float32)
        idx = (self.write_index + torch.arange(b)) % self.capacity
        self.buffer[idx] = rows
        self.write_index = (self.write_index + b) % self.capacity
        self.filled = min(self.filled + b, self.capacity)

    def rows(self) -> torch.Tensor:
        """The filled rows (storage order; a rotation of insertion order)."""
        return self.buffer[: self.filled]

    def clear(self) -> None:
        self.buffer.zero_()
        self.write_index = 0
        self.filled = 0


class MomentumEncoder:
    """Gradient-free shadow copy of an encoder, tracked by exponential averaging."""

    def __init__(self, encoder: nn.Module, m_tilde: float = 0.999):
        if not 0.0 <= m_tilde <= 1.0:
            raise ValueError("m_tilde must lie in [0, 1]")
        self.m_tilde = m_tilde
        self.module = copy.deepcopy(encoder)
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, live: nn.Module) -> None:
        momentum_update(live, self.module, self.m_tilde)


@torch.no_grad()
def momentum_update(live: nn.Module, shadow: nn.Module, m_tilde: float) -> None:
    """shadow <- m_tilde * shadow + (1 - m_tilde) * live, elementwise per tensor."""
    live_params = dict(live.named_parameters())
    shadow_params = dict(shadow.named_parameters())
    if live_params.keys() != shadow_params.keys():
        raise ShapeError("live and shadow encoders have different parameter sets")
    for name, p_live in live_params.items():
        p_shadow = shadow_params[name]
        if p_shadow.shape != p_live.shape:
            raise ShapeError(
                f"parameter {name} shape {tuple(p_shadow.shape)} != live {tuple(p_live.shape)}"
            )
        # two explicit products + one add: matches scalar IEEE arithmetic exactly
        p_shadow.copy_(p_shadow * m_tilde + p_live * (1.0 - m_tilde))


def mcl_loss(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    bank: MemoryBank,
    tau: float,
) -> torch.Tensor:
    """One-direction InfoNCE against the paired momentum feature plus every
    filled bank row, summed over the batch.

    Gradients reach the anchors only; positives and bank rows are detached.
    The paired positive enters the denominator explicitly, so the loss is
    well-defined for any bank fill level (0 with an empty bank and a single
    candidate).
    """
    if anchors.dim() != 2 or anchors.shape != positives.shape:
        raise ShapeError(
            f"anchors {tuple(anchors.shape)} and positives {tuple(positives.shape)} must match"
        )
    if anchors.shape[0] < 1:
        raise ValueError("need at least one anchor/positive pair")
    pos = positives.detach().to(anchors.dtype)
    l_pos = (anchors * pos).sum(dim=1, keepdim=True)
    logits = l_pos
    if bank.filled > 0:
        negs = bank.rows().detach().to(anchors.dtype)
        logits = torch.cat([l_pos, anchors @ negs.t()], dim=1)
    return -F.log_softmax(logits / tau, dim=1)[:, 0].sum()


def mcl_total(
    v: torch.Tensor,
    t: torch.Tensor,
    momentum_v: torch.Tensor,
    momentum_t: torch.Tensor,
    bank_v: MemoryBank,
    bank_t: MemoryBank,
    tau: float,
) -> torch.Tensor:
    """Image-to-text term plus text-to-image term."""
    return mcl_loss(v, momentum_t, bank_t, tau) + mcl_loss(t, momentum_v, bank_v, tau)
