"""Joint-space encoding: projection, local attention enhancement, global-guided
adaptive pooling, and gated fusion of fine-grained and global embeddings."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ShapeError
from .tensorio import FeatureBundle

COSINE_EPS = 1e-12  # zero-norm denominator guard


def l2norm(x: torch.Tensor, dim: int = -1, eps: float = COSINE_EPS) -> torch.Tensor:
    """L2-normalize along ``dim`` with a clamped denominator."""
    return x / x.norm(p=2, dim=dim, keepdim=True).clamp(min=eps)


def ggla_coefficients(query: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Cosine membership of ``query`` (d,) against each codeword row (n, d)."""
    if query.dim() != 1 or codebook.dim() != 2 or codebook.shape[1] != query.shape[0]:
        raise ShapeError(
            f"query {tuple(query.shape)} incompatible with codebook {tuple(codebook.shape)}"
        )
    qn = query.norm().clamp(min=COSINE_EPS)
    cn = codebook.norm(dim=1).clamp(min=COSINE_EPS)
    return (codebook @ query) / (qn * cn)


def ggla_aggregate(weights: torch.Tensor, locals_: torch.Tensor) -> torch.Tensor:
    """Weighted sum of local feature rows; ``weights`` is a probability vector."""
    if weights.dim() != 1 or locals_.dim() != 2 or weights.shape[0] != locals_.shape[0]:
        raise ShapeError(
            f"weights {tuple(weights.shape)} incompatible with locals {tuple(locals_.shape)}"
        )
    return weights @ locals_


def _xavier_(w: torch.Tensor) -> None:
    r = np.sqrt(6.0) / np.sqrt(w.shape[0] + w.shape[1])
    with torch.no_grad():
        w.uniform_(-r, r)


class BundleProjector(nn.Module):
    """Affine maps taking every raw feature stream into the d-dim joint space."""

    def __init__(self, d_v: int, d_w: int, d_g: int, d: int):
        super().__init__()
        self.d = d
        self.img_region = nn.Linear(d_v, d)
        self.txt_word = nn.Linear(d_w, d)
        self.img_global = nn.Linear(d_g, d)
        self.txt_global = nn.Linear(d_g, d)
        self.init_weights()

    def init_weights(self):
        for fc in (self.img_region, self.txt_word, self.img_global, self.txt_global):
            _xavier_(fc.weight)
            with torch.no_grad():
                fc.bias.zero_()

    def forward(self, regions, words, global_image, global_text):
        if regions.shape[-1] != self.img_region.in_features:
            raise ShapeError(
                f"regions dim {regions.shape[-1]} != projector d_v {self.img_region.in_features}"
            )
        if words.shape[-1] != self.txt_word.in_features:
            raise ShapeError(
                f"words dim {words.shape[-1]} != projector d_w {self.txt_word.in_features}"
            )
        if global_image.shape[-1] != self.img_global.in_features:
            raise ShapeError(
                f"global dim {global_image.shape[-1]} != projector d_g {self.img_global.in_features}"
            )
        return (
            self.img_region(regions),
            self.txt_word(words),
            self.img_global(global_image),
            self.txt_global(global_text),
        )


class LocalEnhancer(nn.Module):
    """Single attention layer over the fully connected intra-instance graph,
    applied residually so the identity stays reachable."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.query = nn.Parameter(torch.empty(d, d))
        self.key = nn.Parameter(torch.empty(d, d))
        self.value = nn.Parameter(torch.empty(d, d))
        self.out = nn.Parameter(torch.empty(d, d))
        self.init_weights()

    def init_weights(self):
        for w in (self.query, self.key, self.value):
            _xavier_(w)
        with torch.no_grad():
            self.out.zero_()  # residual branch starts at identity

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        q = x @ self.query
        k = x @ self.key
        scores = (q @ k.transpose(-1, -2)) / np.sqrt(self.d)
        return F.softmax(scores, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NumericError("local features contain non-finite values")
        attn = self.attention_weights(x)
        return x + (attn @ (x @ self.value)) @ self.out


class GglaPool(nn.Module):
    """Adaptive pooling weights from multi-transform cosine memberships of a
    global query vector against the local codebook, softmaxed after averaging."""

    def __init__(self, d: int, m_codes: int = 8):
        super().__init__()
        if m_codes < 1:
            raise ShapeError("m_codes must be >= 1")
        self.d = d
        self.m_codes = m_codes
        self.query_maps = nn.Parameter(torch.empty(m_codes, d, d))
        self.codebook_maps = nn.Parameter(torch.empty(m_codes, d, d))
        self.init_weights()

    def init_weights(self):
        with torch.no_grad():
            for k in range(self.m_codes):
                _xavier_(self.query_maps[k])
                _xavier_(self.codebook_maps[k])

    def weights(self, query: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
        """Pooling weights over the n codewords; sums to 1."""
        if query.dim() != 1 or codebook.dim() != 2:
            raise ShapeError("query must be a vector and codebook a matrix")
        q_k = torch.einsum("kde,e->kd", self.query_maps, query)          # m x d
        c_k = torch.einsum("kde,ne->knd", self.codebook_maps, codebook)  # m x n x d
        qn = q_k.norm(dim=1).clamp(min=COSINE_EPS)                       # m
        cn = c_k.norm(dim=2).clamp(min=COSINE_EPS)                       # m x n
        coeff = torch.einsum("knd,kd->kn", c_k, q_k) / (qn[:, None] * cn)
        return F.softmax(coeff.mean(dim=0), dim=0)

    def forward(self, query: torch.Tensor, codebook: torch.Tensor):
        w = self.weights(query, codebook)
        return ggla_aggregate(w, codebook), w


class GatedFusion(nn.Module):
    """Sigmoid gate blending the fine-grained and global embeddings, then
    L2-normalizing.  Zero init gives the neutral 0.5 gate."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.w_img = nn.Parameter(torch.zeros(2 * d))
        self.b_img = nn.Parameter(torch.zeros(()))
        self.w_txt = nn.Parameter(torch.zeros(2 * d))
        self.b_txt = nn.Parameter(torch.zeros(()))

    def forward(self, fine: torch.Tensor, global_: torch.Tensor, modality: str):
        if fine.shape != global_.shape or fine.shape[-1] != self.d:
            raise ShapeError(
                f"fine {tuple(fine.shape)} / global {tuple(global_.shape)} incompatible with d={self.d}"
            )
        if modality == "image":
            w, b = self.w_img, self.b_img
        elif modality == "text":
            w, b = self.w_txt, self.b_txt
        else:
            raise ValueError(f"unknown modality {modality!r}")
        gate = torch.sigmoid(torch.cat([fine, global_], dim=-1) @ w + b)
        fused = gate * fine + (1.0 - gate) * global_
        return l2norm(fused), gate


@dataclass
class EmbeddingPair:
    """Full-granularity embeddings for one pair (plus enhanced locals)."""

    v: torch.Tensor
    t: torch.Tensor
    locals_img: torch.Tensor
    locals_txt: torch.Tensor
    v_hat: Optional[torch.Tensor] = None
    t_hat: Optional[torch.Tensor] = None


class PairEncoder(nn.Module):
    """Full per-pair pipeline: project -> enhance -> pool -> fuse.

    Each pair is encoded independently of any batch, so gallery embeddings
    can be precomputed one at a time with identical results.
    """

    def __init__(self, d_v: int, d_w: int, d_g: int, d: int, m_codes: int = 8):
        super().__init__()
        self.proj = BundleProjector(d_v, d_w, d_g, d)
        self.img_enhancer = LocalEnhancer(d)
        self.txt_enhancer = LocalEnhancer(d)
        self.img_pool = GglaPool(d, m_codes)
        self.txt_pool = GglaPool(d, m_codes)
        self.fusion = GatedFusion(d)

    def forward(self, regions, words, global_image, global_text) -> EmbeddingPair:
        r_proj, w_proj, vg, tg = self.proj(regions, words, global_image, global_text)
        r_enh = l2norm(self.img_enhancer(r_proj))
        w_enh = l2norm(self.txt_enhancer(w_proj))
        v_f, _ = self.img_pool(vg, r_enh)
        t_f, _ = self.txt_pool(tg, w_enh)
        v, _ = self.fusion(v_f, vg, "image")
        t, _ = self.fusion(t_f, tg, "text")
        return EmbeddingPair(v=v, t=t, locals_img=r_enh, locals_txt=w_enh)

    def encode_bundle(self, bundle: FeatureBundle) -> EmbeddingPair:
        dtype = self.proj.img_region.weight.dtype
        device = self.proj.img_region.weight.device
        as_tensor = lambda a: torch.as_tensor(a, dtype=dtype, device=device)
        return self(
            as_tensor(bundle.regions),
            as_tensor(bundle.words),
            as_tensor(bundle.global_image),
            as_tensor(bundle.global_text),
        )
