"""Instance-neighborhood association graph over a batch, graph message
passing (intra-modal GCN, joint GCN, filtered-bias GAT), and the hard-negative
triplet / neighborhood-interaction losses."""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import l2norm
from .errors import NumericError, ShapeError
from .prototype import SINKHORN_EPS, SINKHORN_ITERS, PrototypeBank, pga_from_embeddings

MASK_VALUE = -1e9
DEGREE_GUARD = 1e-6


@dataclass
class AssociationGraph:
    """Blocks and assembly of the 2m x 2m batch association matrix."""

    s_ii: torch.Tensor
    s_tt: torch.Tensor
    s_it: torch.Tensor
    s_ti: torch.Tensor
    s: torch.Tensor
    epsilon: float


@dataclass
class FilteredGraph:
    s_tilde: torch.Tensor
    alpha: float
    mask_value: float = MASK_VALUE


def intra_modal_similarity(embeddings: torch.Tensor, epsilon: float = 1.0) -> torch.Tensor:
    """Gaussian kernel of pairwise squared Euclidean distances; diagonal is 1."""
    if embeddings.dim() != 2:
        raise ShapeError("expected an m x d embedding matrix")
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    return torch.exp(-(diff.pow(2).sum(dim=-1)) / epsilon)


def cross_modal_similarity(regions: torch.Tensor, words: torch.Tensor):
    """Average-of-max local matching scores for one (image, text) pair.

    Returns (s_it, s_ti): region-to-word and word-to-region directions.
    Local rows are assumed L2-normalized, so dot products are cosines.
    """
    if regions.dim() != 2 or words.dim() != 2 or regions.shape[0] < 1 or words.shape[0] < 1:
        raise ShapeError("regions and words must be nonempty matrices")
    dots = regions @ words.t()  # n_r x n_t
    s_it = dots.max(dim=1).values.mean()
    s_ti = dots.max(dim=0).values.mean()
    return s_it, s_ti


def assemble_graph(
    v: torch.Tensor,
    t: torch.Tensor,
    locals_img: Sequence[torch.Tensor],
    locals_txt: Sequence[torch.Tensor],
    epsilon: float = 1.0,
) -> AssociationGraph:
    """Build [[S_ii, S_it], [S_ti, S_tt]].

    S_it[i, j] scores image i's regions against text j's words; S_ti[i, j]
    scores text i's words against image j's regions.  Both directed blocks
    are computed from the per-pair average-of-max formula directly.
    """
    m = v.shape[0]
    if t.shape[0] != m or len(locals_img) != m or len(locals_txt) != m:
        raise ShapeError("batch sizes of embeddings and locals must agree")
    s_ii = intra_modal_similarity(v, epsilon)
    s_tt = intra_modal_similarity(t, epsilon)
    s_it = v.new_zeros(m, m)
    s_ti = v.new_zeros(m, m)
    for i in range(m):
        for j in range(m):
            a, _ = cross_modal_similarity(locals_img[i], locals_txt[j])
            _, b = cross_modal_similarity(locals_img[j], locals_txt[i])
            s_it[i, j] = a
            s_ti[i, j] = b
    s = torch.cat(
        [torch.cat([s_ii, s_it], dim=1), torch.cat([s_ti, s_tt], dim=1)], dim=0
    )
    return AssociationGraph(s_ii=s_ii, s_tt=s_tt, s_it=s_it, s_ti=s_ti, s=s, epsilon=epsilon)


def seeded_dropout(
    x: torch.Tensor, p: float, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator for per-step determinism."""
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def gcn_layer(
    h: torch.Tensor,
    adj: torch.Tensor,
    weight: torch.Tensor,
    dropout: float = 0.0,
    training: bool = False,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Residual symmetric-normalized graph convolution.

    Adjacency entries are clamped at 0 so degrees stay real (cosine-derived
    cross blocks can dip negative); a +1e-6 degree guard protects empty rows.
    """
    if h.dim() != 2 or adj.shape != (h.shape[0], h.shape[0]):
        raise ShapeError(
            f"adjacency {tuple(adj.shape)} incompatible with features {tuple(h.shape)}"
        )
    adj_pos = adj.clamp(min=0)
    deg = adj_pos.sum(dim=1) + DEGREE_GUARD
    d_inv_sqrt = deg.rsqrt()
    prop = d_inv_sqrt[:, None] * adj_pos * d_inv_sqrt[None, :]
    update = F.leaky_relu(prop @ h @ weight)
    if training:
        update = seeded_dropout(update, dropout, generator)
    return h + update


def joint_gcn(
    h_img: torch.Tensor,
    h_txt: torch.Tensor,
    s: torch.Tensor,
    weight: torch.Tensor,
    dropout: float = 0.0,
    training: bool = False,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Concatenate both modalities along the batch axis and convolve with the
    full association matrix."""
    if h_img.shape != h_txt.shape:
        raise ShapeError("image and text feature matrices must share a shape")
    h = torch.cat([h_img, h_txt], dim=0)
    return gcn_layer(h, s, weight, dropout, training, generator)


def _block_median(block: torch.Tensor) -> torch.Tensor:
    # midpoint-of-central-values median (even counts average the two middles)
    return block.reshape(-1).quantile(0.5)


def filter_graph(s: torch.Tensor, alpha: float = 1.5, mask_value: float = MASK_VALUE) -> FilteredGraph:
    """Per quadrant: amplify entries at or above the block median by ``alpha``
    and mask the rest.  Ties at the median are kept."""
    n = s.shape[0]
    if s.dim() != 2 or s.shape[1] != n or n % 2 != 0:
        raise ShapeError(f"expected a 2m x 2m matrix, got {tuple(s.shape)}")
    m = n // 2
    out = torch.empty_like(s)
    for bi in (slice(0, m), slice(m, n)):
        for bj in (slice(0, m), slice(m, n)):
            block = s[bi, bj]
            med = _block_median(block.detach())
            keep = block >= med
            out[bi, bj] = torch.where(keep, alpha * block, torch.full_like(block, mask_value))
    return FilteredGraph(s_tilde=out, alpha=alpha, mask_value=mask_value)


def gat_layer(
    h: torch.Tensor,
    s_tilde: torch.Tensor,
    w_query: torch.Tensor,
    w_key: torch.Tensor,
    w_value: torch.Tensor,
    dropout: float = 0.0,
    training: bool = False,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Self-attention with the filtered association matrix added to the score
    logits, a residual connection, and re-normalized output rows."""
    n, d = h.shape
    if s_tilde.shape != (n, n):
        raise ShapeError(f"bias matrix {tuple(s_tilde.shape)} incompatible with {n} nodes")
    q = h @ w_query
    k = h @ w_key
    v = h @ w_value
    d_k = w_key.shape[1]
    logits = q @ k.t() / np.sqrt(d_k) + s_tilde
    if bool((logits.detach().max(dim=1).values <= MASK_VALUE / 2).any()):
        raise NumericError("a graph-attention row is fully masked")
    attn = F.softmax(logits, dim=1)
    if training:
        attn = seeded_dropout(attn, dropout, generator)
    return l2norm(h + attn @ v)


class NeighborhoodNet(nn.Module):
    """Parameters and forward pass of the batch-graph enhancement stack:
    intra-modal GCNs, joint GCN, then filtered-bias GAT (single layer each)."""

    def __init__(self, d: int, dropout_gcn: float = 0.6, dropout_gat: float = 0.1):
        super().__init__()
        self.d = d
        self.dropout_gcn = dropout_gcn
        self.dropout_gat = dropout_gat
        self.w_img = nn.Parameter(torch.empty(d, d))
        self.w_txt = nn.Parameter(torch.empty(d, d))
        self.w_joint = nn.Parameter(torch.empty(d, d))
        self.w_query = nn.Parameter(torch.empty(d, d))
        self.w_key = nn.Parameter(torch.empty(d, d))
        self.w_value = nn.Parameter(torch.empty(d, d))
        self.init_weights()

    def init_weights(self):
        r = np.sqrt(6.0) / np.sqrt(2 * self.d)
        with torch.no_grad():
            for w in (self.w_img, self.w_txt, self.w_joint, self.w_query, self.w_key, self.w_value):
                w.uniform_(-r, r)

    def forward(
        self,
        v: torch.Tensor,
        t: torch.Tensor,
        locals_img: Sequence[torch.Tensor],
        locals_txt: Sequence[torch.Tensor],
        epsilon: float = 1.0,
        alpha: float = 1.5,
        generator: Optional[torch.Generator] = None,
    ):
        """Returns neighborhood-enhanced (v_hat, t_hat); training only."""
        graph = assemble_graph(v, t, locals_img, locals_txt, epsilon)
        training = self.training
        h_img = gcn_layer(v, graph.s_ii, self.w_img, self.dropout_gcn, training, generator)
        h_txt = gcn_layer(t, graph.s_tt, self.w_txt, self.dropout_gcn, training, generator)
        h = joint_gcn(h_img, h_txt, graph.s, self.w_joint, self.dropout_gcn, training, generator)
        filtered = filter_graph(graph.s, alpha)
        out = gat_layer(
            h,
            filtered.s_tilde,
            self.w_query,
            self.w_key,
            self.w_value,
            self.dropout_gat,
            training,
            generator,
        )
        m = v.shape[0]
        return out[:m], out[m:]


def triplet_loss(sims: torch.Tensor, gamma: float = 0.2) -> torch.Tensor:
    """Hinge against the hardest in-batch negative in both directions, summed.

    ``sims[i, j]`` scores image i against text j; the diagonal holds the
    positives.  A singleton batch has no negatives and contributes 0.
    """
    m = sims.shape[0]
    if sims.dim() != 2 or sims.shape[1] != m:
        raise ShapeError(f"expected a square similarity matrix, got {tuple(sims.shape)}")
    if m < 2:
        return sims.new_zeros(())
    pos = sims.diag()
    eye = torch.eye(m, dtype=torch.bool, device=sims.device)
    masked = sims.masked_fill(eye, float("-inf"))
    hardest_txt = masked.max(dim=1).values  # hardest negative caption per image
    hardest_img = masked.max(dim=0).values  # hardest negative image per caption
    cost_txt = (gamma - pos + hardest_txt).clamp(min=0)
    cost_img = (gamma - pos + hardest_img).clamp(min=0)
    return cost_txt.sum() + cost_img.sum()


def nsi_loss(
    base: tuple,
    enhanced: tuple,
    bank: PrototypeBank,
    gamma: float = 0.2,
    sinkhorn_iters: int = SINKHORN_ITERS,
    sinkhorn_eps: float = SINKHORN_EPS,
    pga_targets=None,
) -> torch.Tensor:
    """Four cross-aligned hard-negative triplet terms plus the alignment loss
    on the enhanced embeddings.  ``pga_targets`` optionally pins the enhanced
    assignment pair (they are stop-gradient constants regardless)."""
    v, t = base
    v_hat, t_hat = enhanced
    loss = (
        triplet_loss(v @ t.t(), gamma)
        + triplet_loss(v_hat @ t_hat.t(), gamma)
        + triplet_loss(v @ t_hat.t(), gamma)
        + triplet_loss(v_hat @ t.t(), gamma)
    )
    return loss + pga_from_embeddings(
        v_hat, t_hat, bank, sinkhorn_iters, sinkhorn_eps, targets=pga_targets
    )
